#pragma once

// Study-level dataset bookkeeping: which series belong to which study, the
// arthroscopy-derived label, and the train/val/test assignment. Persisted as
// a CSV with one row per series.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/volume.hpp"

namespace slicewise {

struct SeriesRef {
    std::string path;  // relative to the manifest's directory unless absolute
    std::string series_id;
    View view = View::sagittal;
    SequenceType sequence_type = SequenceType::T2;
    bool fat_sat = false;
};

struct StudyRecord {
    std::string study_id;
    std::string patient_id;
    Label label = Label::no_tear;
    Modality modality = Modality::standard;
    Split split = Split::unassigned;
    std::vector<SeriesRef> series;
};

struct DatasetManifest {
    static constexpr int kSchemaVersion = 1;
    std::vector<StudyRecord> records;

    const StudyRecord* find(const std::string& study_id) const {
        for (const auto& r : records)
            if (r.study_id == study_id) return &r;
        return nullptr;
    }

    std::size_t series_count() const {
        std::size_t n = 0;
        for (const auto& r : records) n += r.series.size();
        return n;
    }

    // Structural invariants: unique study ids, at least one series per study.
    void validate() const {
        std::set<std::string> seen;
        for (const auto& r : records) {
            if (r.study_id.empty())
                throw ValidationError("manifest contains a study with an empty study_id");
            if (!seen.insert(r.study_id).second)
                throw ValidationError("duplicate study_id '" + r.study_id + "' in manifest");
            if (r.series.empty())
                throw ValidationError("study '" + r.study_id + "' has no series");
        }
    }
};

// ---------------------------------------------------------------------------
// CSV round trip
//
// Columns: study_id, patient_id, modality, label, split, series_path, view,
// sequence_type, fat_sat. Rows are written sorted by (study_id, series_path)
// so a manifest always serializes to identical bytes.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

}  // namespace detail

inline const char* kManifestCsvHeader =
    "study_id,patient_id,modality,label,split,series_path,view,sequence_type,fat_sat";

inline void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    manifest.validate();
    std::vector<const StudyRecord*> order;
    order.reserve(manifest.records.size());
    for (const auto& r : manifest.records) order.push_back(&r);
    std::sort(order.begin(), order.end(),
              [](const StudyRecord* a, const StudyRecord* b) { return a->study_id < b->study_id; });

    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot open '" + path.string() + "' for writing");
    out << kManifestCsvHeader << "\n";
    for (const StudyRecord* r : order) {
        auto series = r->series;
        std::sort(series.begin(), series.end(),
                  [](const SeriesRef& a, const SeriesRef& b) { return a.path < b.path; });
        for (const auto& s : series) {
            out << r->study_id << ',' << r->patient_id << ',' << to_string(r->modality) << ','
                << to_string(r->label) << ',' << to_string(r->split) << ',' << s.path << ','
                << to_string(s.view) << ',' << to_string(s.sequence_type) << ','
                << (s.fat_sat ? "true" : "false") << "\n";
        }
    }
    if (!out)
        throw IoError("write failed for '" + path.string() + "'");
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open manifest '" + path.string() + "'");

    std::string line;
    if (!std::getline(in, line))
        throw FormatError("manifest '" + path.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestCsvHeader)
        throw FormatError("manifest '" + path.string() + "' has an unexpected header row: " + line);

    DatasetManifest manifest;
    std::map<std::string, std::size_t> index;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 9)
            throw FormatError("manifest '" + path.string() + "' line " + std::to_string(lineno) +
                              ": expected 9 fields, got " + std::to_string(f.size()));

        const std::string& study_id = f[0];
        StudyRecord* rec;
        auto it = index.find(study_id);
        if (it == index.end()) {
            index.emplace(study_id, manifest.records.size());
            manifest.records.push_back({});
            rec = &manifest.records.back();
            rec->study_id = study_id;
            rec->patient_id = f[1];
            rec->modality = parse_modality(f[2]);
            rec->label = parse_label(f[3]);
            rec->split = parse_split(f[4]);
        } else {
            rec = &manifest.records[it->second];
            // every row of a study must agree on the study-level fields
            if (rec->patient_id != f[1] || rec->modality != parse_modality(f[2]) ||
                rec->label != parse_label(f[3]) || rec->split != parse_split(f[4]))
                throw FormatError("manifest '" + path.string() + "' line " + std::to_string(lineno) +
                                  ": study '" + study_id + "' has inconsistent study-level fields");
        }
        SeriesRef s;
        s.path = f[5];
        s.series_id = std::filesystem::path(f[5]).stem().string();
        s.view = parse_view(f[6]);
        s.sequence_type = parse_sequence_type(f[7]);
        s.fat_sat = parse_bool(f[8]);
        rec->series.push_back(std::move(s));
    }
    manifest.validate();
    return manifest;
}

// Resolves a series path against the directory the manifest lives in.
inline std::filesystem::path resolve_series_path(const std::filesystem::path& manifest_path,
                                                 const std::string& series_path) {
    std::filesystem::path p(series_path);
    if (p.is_absolute()) return p;
    return manifest_path.parent_path() / p;
}

// Deep check: every referenced volume exists, parses, and matches the
// metadata its manifest row claims.
inline void validate_manifest_files(const DatasetManifest& manifest,
                                    const std::filesystem::path& manifest_path) {
    for (const auto& r : manifest.records) {
        for (const auto& s : r.series) {
            const auto p = resolve_series_path(manifest_path, s.path);
            const VolumeScan scan = read_volume(p);
            if (scan.study_id != r.study_id)
                throw ValidationError("volume '" + p.string() + "' belongs to study '" +
                                      scan.study_id + "' but is listed under '" + r.study_id + "'");
            if (scan.modality != r.modality)
                throw ValidationError("volume '" + p.string() +
                                      "' modality does not match its study");
            if (scan.view != s.view || scan.sequence_type != s.sequence_type ||
                scan.fat_sat != s.fat_sat)
                throw ValidationError("volume '" + p.string() +
                                      "' acquisition metadata does not match its manifest row");
        }
    }
}

}  // namespace slicewise

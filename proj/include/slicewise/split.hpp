#pragma once

// Stratified train/val/test assignment. Strata are (label x modality);
// counts are rounded with the largest-remainder method (ties to train).
// Assignment is per patient, never per study or series: a patient with
// bilateral studies lands entirely in one split so no anatomy is shared
// between training and evaluation.

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/manifest.hpp"

namespace slicewise {

struct SplitFractions {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
};

struct SplitOptions {
    // Strict two-class stratification: every modality present in the
    // manifest must contribute both labels. When false, strata are formed
    // only over the (label, modality) pairs that actually occur.
    bool require_both_classes = true;
};

namespace detail {

inline std::array<std::int64_t, 3> largest_remainder(std::int64_t n, const SplitFractions& f) {
    const std::array<double, 3> frac = {f.train, f.val, f.test};
    std::array<std::int64_t, 3> counts{};
    std::array<double, 3> remainder{};
    std::int64_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = static_cast<double>(n) * frac[i];
        counts[i] = static_cast<std::int64_t>(std::floor(exact + 1e-12));
        remainder[i] = exact - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    // hand out the leftovers by descending remainder; equal remainders go
    // train, then val, then test
    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return remainder[a] > remainder[b]; });
    for (std::int64_t k = 0; k < n - assigned; ++k) counts[order[static_cast<std::size_t>(k) % 3]]++;
    return counts;
}

struct StratumKey {
    Label label;
    Modality modality;
    bool operator<(const StratumKey& o) const {
        if (label != o.label) return label < o.label;
        return modality < o.modality;
    }
    std::string name() const {
        return "(" + to_string(label) + ", " + to_string(modality) + ")";
    }
};

}  // namespace detail

inline DatasetManifest stratified_split(const DatasetManifest& manifest,
                                        const SplitFractions& fractions,
                                        std::uint64_t seed,
                                        const SplitOptions& options = {}) {
    manifest.validate();
    const double sum = fractions.train + fractions.val + fractions.test;
    if (fractions.train <= 0 || fractions.val <= 0 || fractions.test <= 0)
        throw ValidationError("split fractions must all be positive");
    if (std::abs(sum - 1.0) > 1e-9)
        throw ValidationError("split fractions must sum to 1, got " + std::to_string(sum));

    // stratum membership per study
    std::map<detail::StratumKey, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& r = manifest.records[i];
        strata[{r.label, r.modality}].push_back(i);
    }

    if (options.require_both_classes) {
        std::map<Modality, std::array<bool, 2>> seen;
        for (const auto& [key, _] : strata)
            seen[key.modality][key.label == Label::tear ? 1 : 0] = true;
        for (const auto& [mod, labels] : seen) {
            if (!labels[1])
                throw StratificationError("empty stratum " +
                                          detail::StratumKey{Label::tear, mod}.name() +
                                          ": no studies with that label and modality");
            if (!labels[0])
                throw StratificationError("empty stratum " +
                                          detail::StratumKey{Label::no_tear, mod}.name() +
                                          ": no studies with that label and modality");
        }
    }

    // patient groups; a group is homogeneous when all its studies fall in
    // one stratum
    std::map<std::string, std::vector<std::size_t>> patients;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
        patients[manifest.records[i].patient_id].push_back(i);

    std::map<detail::StratumKey, std::array<std::int64_t, 3>> deficit;
    for (const auto& [key, members] : strata)
        deficit[key] = detail::largest_remainder(static_cast<std::int64_t>(members.size()), fractions);

    DatasetManifest out = manifest;
    std::vector<std::string> mixed_groups;

    for (auto& [key, targets] : deficit) {
        // homogeneous patient groups of this stratum, in a seeded order
        std::vector<std::string> groups;
        for (const auto& [pid, studies] : patients) {
            bool all_here = true;
            bool any_here = false;
            for (std::size_t i : studies) {
                const bool here = manifest.records[i].label == key.label &&
                                  manifest.records[i].modality == key.modality;
                all_here = all_here && here;
                any_here = any_here || here;
            }
            if (any_here && all_here) groups.push_back(pid);
        }
        Rng rng(mix_seed(seed, "stratum:" + key.name()));
        rng.shuffle(groups);

        for (const auto& pid : groups) {
            const auto& studies = patients[pid];
            int best = 0;
            for (int s = 1; s < 3; ++s)
                if (targets[s] > targets[best]) best = s;
            for (std::size_t i : studies)
                out.records[i].split = static_cast<Split>(best);
            targets[best] -= static_cast<std::int64_t>(studies.size());
        }
    }

    // patients whose studies span strata (e.g. bilateral with one tear):
    // place the whole group where the combined deficit is largest
    for (const auto& [pid, studies] : patients) {
        detail::StratumKey first{manifest.records[studies[0]].label,
                                 manifest.records[studies[0]].modality};
        bool homogeneous = true;
        for (std::size_t i : studies)
            if (manifest.records[i].label != first.label ||
                manifest.records[i].modality != first.modality)
                homogeneous = false;
        if (homogeneous) continue;
        mixed_groups.push_back(pid);
    }
    std::sort(mixed_groups.begin(), mixed_groups.end());
    for (const auto& pid : mixed_groups) {
        const auto& studies = patients[pid];
        std::array<std::int64_t, 3> combined{};
        for (std::size_t i : studies) {
            const auto& r = manifest.records[i];
            const auto& d = deficit[{r.label, r.modality}];
            for (int s = 0; s < 3; ++s) combined[s] += d[s];
        }
        int best = 0;
        for (int s = 1; s < 3; ++s)
            if (combined[s] > combined[best]) best = s;
        for (std::size_t i : studies) {
            const auto& r = out.records[i];
            deficit[{r.label, r.modality}][best] -= 1;
            out.records[i].split = static_cast<Split>(best);
        }
    }

    return out;
}

}  // namespace slicewise

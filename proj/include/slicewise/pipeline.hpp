#pragma once

// End-to-end orchestration. One JSON config drives every subcommand; each
// writes its artifacts under output_root and a run manifest recording the
// config hash and the hashes of the artifact files it consumed, so any
// output can be traced to exact inputs. No timestamps anywhere: rerunning
// a subcommand on unchanged inputs reproduces identical bytes.
//
// Artifact layout under output_root:
//   split/manifest.csv
//   stats/intensity_stats.json
//   preprocessed/<study>/<series>.mvol, preprocessed/manifest.csv
//   models/<modality>/<view>/{selected.swckpt, pretrain.jsonl, finetune.jsonl}
//   calibration/<modality>/{threshold.json, val_predictions.csv}
//   predictions/<modality>/predictions.csv
//   evaluation/<modality>/{report.json, roc.csv, roc.svg}
//   report/report.json
//   runs/<subcommand>.json

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "slicewise/calibration.hpp"
#include "slicewise/common.hpp"
#include "slicewise/manifest.hpp"
#include "slicewise/metrics.hpp"
#include "slicewise/model.hpp"
#include "slicewise/phantom.hpp"
#include "slicewise/plot.hpp"
#include "slicewise/preprocess.hpp"
#include "slicewise/split.hpp"
#include "slicewise/training.hpp"

namespace slicewise {

// ---------------------------------------------------------------------------
// Content hashing (FNV-1a 64)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const char* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string hash_string(const std::string& s) {
    return hash_hex(fnv1a64(s.data(), s.size()));
}

inline std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file for hashing: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return hash_hex(h);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
    std::string data_root;
    std::string output_root;
    std::uint64_t seed = 0;
    bool desk_scale = false;
    std::vector<View> views = {View::sagittal, View::axial, View::coronal};
    bool has_phantom = false;
    PhantomConfig phantom;
    SplitFractions split;
    AugmentationConfig augmentation;
    nn::EncoderConfig encoder;
    bool pretrain_enabled = true;
    TrainConfig pretrain;
    TrainConfig finetune;
    std::int64_t bootstrap_iterations = 1000;

    void validate() const {
        if (data_root.empty()) throw ConfigError("data_root must be set");
        if (output_root.empty()) throw ConfigError("output_root must be set");
        if (views.empty()) throw ConfigError("views must be non-empty");
        for (std::size_t i = 0; i < views.size(); ++i)
            for (std::size_t j = i + 1; j < views.size(); ++j)
                if (views[i] == views[j])
                    throw ConfigError("views contains " + to_string(views[i]) + " twice");
        encoder.validate();
        if (encoder.architecture == nn::Architecture::SmallConvBaseline && !desk_scale)
            throw ConfigError(
                "small_conv_baseline is the desk-scale encoder; set desk_scale=true to "
                "acknowledge its reduced capacity");
        augmentation.validate();
        pretrain.validate();
        finetune.validate();
        if (bootstrap_iterations < 2) throw ConfigError("bootstrap_iterations must be >= 2");
        if (has_phantom) phantom.validate();
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<const char*> allowed,
                                const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known) throw ConfigError("unknown key \"" + it.key() + "\" in " + context);
    }
}

inline TrainConfig parse_train_block(const nlohmann::json& j, const std::string& context) {
    reject_unknown_keys(j,
                        {"max_epochs", "patience", "learning_rate", "batch_scans",
                         "pos_weight_mode", "pos_weight"},
                        context);
    TrainConfig cfg;
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.patience = j.value("patience", cfg.patience);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.batch_scans = j.value("batch_scans", cfg.batch_scans);
    if (j.contains("pos_weight_mode"))
        cfg.pos_weight_mode = parse_pos_weight_mode(j.at("pos_weight_mode").get<std::string>());
    cfg.pos_weight = j.value("pos_weight", cfg.pos_weight);
    return cfg;
}

inline nn::EncoderConfig parse_encoder_block(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"architecture", "embedding_dim", "input_channels", "image_size",
                         "patch_size", "base_width", "depths", "heads", "window", "mlp_ratio",
                         "weights_init", "checkpoint_path"},
                        "encoder");
    nn::EncoderConfig cfg;
    if (j.contains("architecture"))
        cfg.architecture = nn::parse_architecture(j.at("architecture").get<std::string>());
    if (cfg.architecture == nn::Architecture::SmallConvBaseline)
        cfg.embedding_dim = nn::EncoderConfig::kSmallConvDim;
    cfg.embedding_dim = j.value("embedding_dim", cfg.embedding_dim);
    cfg.input_channels = j.value("input_channels", cfg.input_channels);
    cfg.image_size = j.value("image_size", cfg.image_size);
    cfg.patch_size = j.value("patch_size", cfg.patch_size);
    cfg.base_width = j.value("base_width", cfg.base_width);
    if (j.contains("depths")) cfg.depths = j.at("depths").get<std::vector<std::int64_t>>();
    if (j.contains("heads")) cfg.heads = j.at("heads").get<std::vector<std::int64_t>>();
    cfg.window = j.value("window", cfg.window);
    cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
    if (j.contains("weights_init"))
        cfg.weights_init = nn::parse_weights_init(j.at("weights_init").get<std::string>());
    cfg.checkpoint_path = j.value("checkpoint_path", cfg.checkpoint_path);
    return cfg;
}

inline PhantomConfig parse_phantom_block(const nlohmann::json& j, std::uint64_t default_seed) {
    reject_unknown_keys(j,
                        {"n_studies", "positive_fraction", "dims", "views_per_study",
                         "sequences_per_view", "defect_size", "defect_contrast", "noise_sigma",
                         "modality_mix", "seed"},
                        "phantom");
    PhantomConfig cfg;
    cfg.n_studies = j.value("n_studies", cfg.n_studies);
    cfg.positive_fraction = j.value("positive_fraction", cfg.positive_fraction);
    if (j.contains("dims")) {
        const auto dims = j.at("dims").get<std::vector<std::int64_t>>();
        if (dims.size() != 3) throw ConfigError("phantom dims must be [slices, height, width]");
        cfg.slices = dims[0];
        cfg.height = dims[1];
        cfg.width = dims[2];
    }
    if (j.contains("views_per_study")) {
        cfg.views_per_study.clear();
        for (const auto& v : j.at("views_per_study"))
            cfg.views_per_study.push_back(parse_view(v.get<std::string>()));
    }
    cfg.sequences_per_view = j.value("sequences_per_view", cfg.sequences_per_view);
    cfg.defect_size = j.value("defect_size", cfg.defect_size);
    cfg.defect_contrast = j.value("defect_contrast", cfg.defect_contrast);
    cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
    cfg.modality_mix = j.value("modality_mix", cfg.modality_mix);
    cfg.seed = j.value("seed", default_seed);
    return cfg;
}

inline AugmentationConfig parse_augmentation_block(const nlohmann::json& j,
                                                   std::uint64_t default_seed) {
    reject_unknown_keys(j,
                        {"copies_per_scan", "rotation_limit", "translation_limit", "scale_low",
                         "scale_high", "flip_probability", "noise_sigma", "scope"},
                        "augmentation");
    AugmentationConfig cfg;
    cfg.copies_per_scan = j.value("copies_per_scan", cfg.copies_per_scan);
    cfg.rotation_limit = j.value("rotation_limit", cfg.rotation_limit);
    cfg.translation_limit = j.value("translation_limit", cfg.translation_limit);
    cfg.scale_low = j.value("scale_low", cfg.scale_low);
    cfg.scale_high = j.value("scale_high", cfg.scale_high);
    cfg.flip_probability = j.value("flip_probability", cfg.flip_probability);
    cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
    if (j.contains("scope")) cfg.scope = parse_augment_scope(j.at("scope").get<std::string>());
    cfg.seed = default_seed;
    return cfg;
}

}  // namespace detail

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"data_root", "output_root", "seed", "desk_scale", "views",
                                 "phantom", "split", "augmentation", "encoder", "training",
                                 "evaluation"},
                                "pipeline config");
    PipelineConfig cfg;
    try {
        cfg.data_root = j.value("data_root", std::string());
        cfg.output_root = j.value("output_root", std::string());
        cfg.seed = j.value("seed", cfg.seed);
        cfg.desk_scale = j.value("desk_scale", cfg.desk_scale);
        if (j.contains("views")) {
            cfg.views.clear();
            for (const auto& v : j.at("views")) cfg.views.push_back(parse_view(v.get<std::string>()));
        }
        if (j.contains("phantom")) {
            cfg.has_phantom = true;
            cfg.phantom = detail::parse_phantom_block(j.at("phantom"), cfg.seed);
        }
        if (j.contains("split")) {
            detail::reject_unknown_keys(j.at("split"), {"train", "val", "test"}, "split");
            cfg.split.train = j.at("split").value("train", cfg.split.train);
            cfg.split.val = j.at("split").value("val", cfg.split.val);
            cfg.split.test = j.at("split").value("test", cfg.split.test);
        }
        cfg.augmentation = detail::parse_augmentation_block(
            j.contains("augmentation") ? j.at("augmentation") : nlohmann::json::object(),
            mix_seed(cfg.seed, "augment"));
        if (j.contains("encoder")) cfg.encoder = detail::parse_encoder_block(j.at("encoder"));
        if (j.contains("training")) {
            const auto& t = j.at("training");
            detail::reject_unknown_keys(t, {"pretrain_enabled", "pretrain", "finetune"},
                                        "training");
            cfg.pretrain_enabled = t.value("pretrain_enabled", cfg.pretrain_enabled);
            if (t.contains("pretrain"))
                cfg.pretrain = detail::parse_train_block(t.at("pretrain"), "training.pretrain");
            if (t.contains("finetune"))
                cfg.finetune = detail::parse_train_block(t.at("finetune"), "training.finetune");
        }
        if (j.contains("evaluation")) {
            detail::reject_unknown_keys(j.at("evaluation"), {"bootstrap_iterations"},
                                        "evaluation");
            cfg.bootstrap_iterations =
                j.at("evaluation").value("bootstrap_iterations", cfg.bootstrap_iterations);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed pipeline config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["data_root"] = cfg.data_root;
    j["output_root"] = cfg.output_root;
    j["seed"] = cfg.seed;
    j["desk_scale"] = cfg.desk_scale;
    nlohmann::json views = nlohmann::json::array();
    for (View v : cfg.views) views.push_back(to_string(v));
    j["views"] = views;
    if (cfg.has_phantom) j["phantom"] = phantom_config_to_json(cfg.phantom);
    j["split"] = {{"train", cfg.split.train}, {"val", cfg.split.val}, {"test", cfg.split.test}};
    j["augmentation"] = {{"copies_per_scan", cfg.augmentation.copies_per_scan},
                         {"rotation_limit", cfg.augmentation.rotation_limit},
                         {"translation_limit", cfg.augmentation.translation_limit},
                         {"scale_low", cfg.augmentation.scale_low},
                         {"scale_high", cfg.augmentation.scale_high},
                         {"flip_probability", cfg.augmentation.flip_probability},
                         {"noise_sigma", cfg.augmentation.noise_sigma},
                         {"scope", to_string(cfg.augmentation.scope)}};
    j["encoder"] = detail::encoder_config_to_json(cfg.encoder);
    auto train_json = [](const TrainConfig& t) {
        return nlohmann::json{{"max_epochs", t.max_epochs},
                              {"patience", t.patience},
                              {"learning_rate", t.learning_rate},
                              {"batch_scans", t.batch_scans},
                              {"pos_weight_mode", to_string(t.pos_weight_mode)},
                              {"pos_weight", t.pos_weight}};
    };
    j["training"] = {{"pretrain_enabled", cfg.pretrain_enabled},
                     {"pretrain", train_json(cfg.pretrain)},
                     {"finetune", train_json(cfg.finetune)}};
    j["evaluation"] = {{"bootstrap_iterations", cfg.bootstrap_iterations}};
    return j;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return pipeline_config_from_json(j);
}

inline std::string config_hash(const PipelineConfig& cfg) {
    return hash_string(pipeline_config_to_json(cfg).dump());
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

struct ArtifactPaths {
    std::filesystem::path out;

    explicit ArtifactPaths(const PipelineConfig& cfg) : out(cfg.output_root) {}

    std::filesystem::path split_manifest() const { return out / "split" / "manifest.csv"; }
    std::filesystem::path stats_file() const { return out / "stats" / "intensity_stats.json"; }
    std::filesystem::path preprocessed_dir() const { return out / "preprocessed"; }
    std::filesystem::path preprocessed_manifest() const {
        return preprocessed_dir() / "manifest.csv";
    }
    std::filesystem::path model_dir(Modality m, View v) const {
        return out / "models" / to_string(m) / to_string(v);
    }
    std::filesystem::path model_file(Modality m, View v) const {
        return model_dir(m, v) / "selected.swckpt";
    }
    std::filesystem::path threshold_file(Modality m) const {
        return out / "calibration" / to_string(m) / "threshold.json";
    }
    std::filesystem::path val_predictions_file(Modality m) const {
        return out / "calibration" / to_string(m) / "val_predictions.csv";
    }
    std::filesystem::path predictions_file(Modality m) const {
        return out / "predictions" / to_string(m) / "predictions.csv";
    }
    std::filesystem::path evaluation_dir(Modality m) const {
        return out / "evaluation" / to_string(m);
    }
    std::filesystem::path report_file() const { return out / "report" / "report.json"; }
    std::filesystem::path runs_dir() const { return out / "runs"; }
};

namespace detail {

inline void require_artifact(const std::filesystem::path& path, const std::string& producer) {
    if (!std::filesystem::exists(path))
        throw PrerequisiteError("missing " + path.string() + "; run the " + producer +
                                " subcommand first");
}

// Volume files are represented by the manifest that lists them; hashing the
// bulk voxel data on every step would dominate runtime without adding trace
// value (the manifests and configs pin the generation process).
inline void write_run_manifest(const PipelineConfig& cfg, const ArtifactPaths& paths,
                               const std::string& subcommand,
                               const std::vector<std::filesystem::path>& inputs,
                               const std::vector<std::filesystem::path>& outputs,
                               const std::string& modality = "") {
    nlohmann::json j;
    j["subcommand"] = subcommand;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    if (!modality.empty()) j["modality"] = modality;
    nlohmann::json in = nlohmann::json::object();
    for (const auto& p : inputs) in[p.string()] = hash_file(p);
    j["inputs"] = in;
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& p : outputs) outs.push_back(p.string());
    j["outputs"] = outs;
    std::filesystem::create_directories(paths.runs_dir());
    const auto path = paths.runs_dir() / (subcommand + ".json");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open run manifest for writing: " + path.string());
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("short write on run manifest: " + path.string());
}

// paths in a manifest written under to_dir stay resolvable from there
inline DatasetManifest rebase_manifest(const DatasetManifest& manifest,
                                       const std::filesystem::path& from_dir,
                                       const std::filesystem::path& to_dir) {
    DatasetManifest out = manifest;
    const auto to_abs = std::filesystem::absolute(to_dir).lexically_normal();
    for (auto& rec : out.records)
        for (auto& s : rec.series) {
            std::filesystem::path p(s.path);
            if (!p.is_absolute())
                p = std::filesystem::absolute(from_dir / p).lexically_normal();
            const auto rel = p.lexically_relative(to_abs);
            s.path = rel.empty() ? p.string() : rel.string();
        }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline void cmd_synth(const PipelineConfig& cfg) {
    cfg.validate();
    if (!cfg.has_phantom)
        throw ConfigError("synth requires a \"phantom\" block in the pipeline config");
    const ArtifactPaths paths(cfg);
    generate_phantoms(cfg.phantom, cfg.data_root);
    detail::write_run_manifest(cfg, paths, "synth", {},
                               {std::filesystem::path(cfg.data_root) / "manifest.csv",
                                std::filesystem::path(cfg.data_root) / "provenance.json"});
}

inline void cmd_split(const PipelineConfig& cfg) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    const auto source = std::filesystem::path(cfg.data_root) / "manifest.csv";
    if (!std::filesystem::exists(source))
        throw PrerequisiteError("missing " + source.string() +
                                "; run the synth subcommand first or point data_root at an "
                                "existing dataset");
    DatasetManifest manifest = read_manifest(source);
    DatasetManifest split = stratified_split(manifest, cfg.split, mix_seed(cfg.seed, "split"));
    const auto out_dir = paths.split_manifest().parent_path();
    std::filesystem::create_directories(out_dir);
    DatasetManifest rebased = detail::rebase_manifest(split, source.parent_path(), out_dir);
    write_manifest(rebased, paths.split_manifest());
    detail::write_run_manifest(cfg, paths, "split", {source}, {paths.split_manifest()});
}

inline void cmd_fit_stats(const PipelineConfig& cfg, std::vector<std::string>* warnings = nullptr) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    detail::require_artifact(paths.split_manifest(), "split");
    DatasetManifest manifest = read_manifest(paths.split_manifest());
    const auto manifest_path = paths.split_manifest();
    ScanSource source = [&manifest_path](const StudyRecord&, const SeriesRef& s) {
        return resize_and_crop(read_volume(resolve_series_path(manifest_path, s.path)));
    };
    IntensityStats stats = fit_intensity_stats(manifest, source, warnings);
    std::filesystem::create_directories(paths.stats_file().parent_path());
    std::ofstream out(paths.stats_file(), std::ios::trunc);
    if (!out) throw IoError("cannot open stats file for writing: " + paths.stats_file().string());
    out << stats_to_json(stats).dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("short write on stats file: " + paths.stats_file().string());
    detail::write_run_manifest(cfg, paths, "fit-stats", {paths.split_manifest()},
                               {paths.stats_file()});
}

inline void cmd_preprocess(const PipelineConfig& cfg) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    detail::require_artifact(paths.split_manifest(), "split");
    detail::require_artifact(paths.stats_file(), "fit-stats");
    DatasetManifest manifest = read_manifest(paths.split_manifest());
    IntensityStats stats;
    {
        std::ifstream in(paths.stats_file());
        nlohmann::json j;
        in >> j;
        stats = stats_from_json(j);
    }
    const auto manifest_path = paths.split_manifest();
    DatasetManifest processed;
    for (const auto& rec : manifest.records) {
        StudyRecord out_rec = rec;
        out_rec.series.clear();
        std::filesystem::create_directories(paths.preprocessed_dir() / rec.study_id);
        for (const auto& s : rec.series) {
            VolumeScan scan = read_volume(resolve_series_path(manifest_path, s.path));
            scan = standardize_and_scale(resize_and_crop(scan), stats);
            const std::string rel = rec.study_id + "/" + s.series_id + ".mvol";
            write_volume(scan, paths.preprocessed_dir() / rel);
            SeriesRef ref = s;
            ref.path = rel;
            out_rec.series.push_back(ref);

            const bool augment_this =
                rec.split == Split::train && cfg.augmentation.copies_per_scan > 0 &&
                (cfg.augmentation.scope == AugmentScope::All || rec.label == Label::tear);
            if (augment_this) {
                for (const VolumeScan& copy : augment(scan, cfg.augmentation)) {
                    const std::string aug_rel = rec.study_id + "/" + copy.series_id + ".mvol";
                    write_volume(copy, paths.preprocessed_dir() / aug_rel);
                    SeriesRef aug_ref = s;
                    aug_ref.path = aug_rel;
                    aug_ref.series_id = copy.series_id;
                    out_rec.series.push_back(aug_ref);
                }
            }
        }
        processed.records.push_back(out_rec);
    }
    write_manifest(processed, paths.preprocessed_manifest());
    detail::write_run_manifest(cfg, paths, "preprocess",
                               {paths.split_manifest(), paths.stats_file()},
                               {paths.preprocessed_manifest()});
}

namespace detail {

inline bool is_augmented_series(const std::string& series_id) {
    return series_id.find("-aug") != std::string::npos;
}

inline std::vector<TrainScan> collect_scans(const DatasetManifest& manifest,
                                            const std::filesystem::path& manifest_path,
                                            Split split, View view, bool include_augmented) {
    std::vector<TrainScan> out;
    for (const auto& rec : manifest.records) {
        if (rec.split != split) continue;
        for (const auto& s : rec.series) {
            if (s.view != view) continue;
            if (!include_augmented && is_augmented_series(s.series_id)) continue;
            TrainScan ts;
            ts.study_id = rec.study_id;
            ts.series_id = s.series_id;
            ts.view = s.view;
            ts.modality = rec.modality;
            ts.label = rec.label == Label::tear ? 1 : 0;
            ts.mvol_path = resolve_series_path(manifest_path, s.path).string();
            out.push_back(ts);
        }
    }
    return out;
}

}  // namespace detail

inline void cmd_train(const PipelineConfig& cfg, Modality modality) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    detail::require_artifact(paths.preprocessed_manifest(), "preprocess");
    DatasetManifest manifest = read_manifest(paths.preprocessed_manifest());
    std::vector<std::filesystem::path> outputs;
    for (View view : cfg.views) {
        auto pre_train = detail::collect_scans(manifest, paths.preprocessed_manifest(),
                                               Split::train, view, true);
        auto pre_val =
            detail::collect_scans(manifest, paths.preprocessed_manifest(), Split::val, view, false);
        if (pre_train.empty())
            throw DataError("no training scans for view " + to_string(view) +
                            " in the preprocessed manifest");
        if (pre_val.empty())
            throw DataError("no validation scans for view " + to_string(view) +
                            " in the preprocessed manifest");

        StagedTrainConfig scfg;
        scfg.run_pretrain = cfg.pretrain_enabled;
        scfg.pretrain = cfg.pretrain;
        scfg.finetune = cfg.finetune;
        const std::string tag = to_string(modality) + ":" + to_string(view);
        scfg.pretrain.seed = mix_seed(cfg.seed, "train:" + tag + ":pretrain");
        scfg.finetune.seed = mix_seed(cfg.seed, "train:" + tag + ":finetune");

        const auto dir = paths.model_dir(modality, view);
        std::filesystem::create_directories(dir);
        TrainLog pre_log, fine_log;
        ScanClassifier model =
            run_staged_training(cfg.encoder, pre_train, pre_val, pre_train, pre_val, modality,
                                scfg, mvol_loader(), &pre_log, &fine_log, dir.string());
        save_model(model, paths.model_file(modality, view).string());
        if (cfg.pretrain_enabled) write_train_log(pre_log, (dir / "pretrain.jsonl").string());
        write_train_log(fine_log, (dir / "finetune.jsonl").string());
        outputs.push_back(paths.model_file(modality, view));
    }
    detail::write_run_manifest(cfg, paths, "train", {paths.preprocessed_manifest()}, outputs,
                               to_string(modality));
}

namespace detail {

struct LoadedModels {
    std::map<View, ScanClassifier> by_view;
};

inline LoadedModels load_models(const PipelineConfig& cfg, const ArtifactPaths& paths,
                                Modality modality) {
    LoadedModels m;
    for (View view : cfg.views) {
        require_artifact(paths.model_file(modality, view), "train");
        m.by_view.emplace(view, load_model(paths.model_file(modality, view).string()));
    }
    return m;
}

// per-series probabilities for every study of one modality in one split
inline std::vector<ScanPrediction> predict_split(const ArtifactPaths& paths,
                                                 const DatasetManifest& manifest,
                                                 const LoadedModels& models, Modality modality,
                                                 Split split) {
    std::vector<ScanPrediction> out;
    for (const auto& rec : manifest.records) {
        if (rec.split != split || rec.modality != modality) continue;
        for (const auto& s : rec.series) {
            if (is_augmented_series(s.series_id)) continue;
            const auto it = models.by_view.find(s.view);
            if (it == models.by_view.end()) continue;  // view not part of this run
            const VolumeScan scan =
                read_volume(resolve_series_path(paths.preprocessed_manifest(), s.path));
            out.push_back(predict_scan(scan, it->second));
        }
    }
    return out;
}

inline std::map<std::string, int> labels_by_study(const DatasetManifest& manifest,
                                                  Modality modality, Split split) {
    std::map<std::string, int> out;
    for (const auto& rec : manifest.records)
        if (rec.split == split && rec.modality == modality)
            out[rec.study_id] = rec.label == Label::tear ? 1 : 0;
    return out;
}

}  // namespace detail

inline void cmd_calibrate(const PipelineConfig& cfg, Modality modality) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    detail::require_artifact(paths.preprocessed_manifest(), "preprocess");
    DatasetManifest manifest = read_manifest(paths.preprocessed_manifest());
    detail::LoadedModels models = detail::load_models(cfg, paths, modality);
    const auto preds =
        detail::predict_split(paths, manifest, models, modality, Split::val);
    if (preds.empty())
        throw DataError("no validation-split " + to_string(modality) + " series to calibrate on");
    const auto labels = detail::labels_by_study(manifest, modality, Split::val);
    std::vector<std::pair<EnsemblePrediction, int>> pairs;
    for (const auto& ens : ensemble_by_study(preds))
        pairs.emplace_back(ens, labels.at(ens.study_id));
    CalibratedThreshold thr =
        calibrate_threshold(pairs, modality, hash_file(paths.preprocessed_manifest()));
    std::filesystem::create_directories(paths.threshold_file(modality).parent_path());
    write_threshold(thr, paths.threshold_file(modality).string());
    write_predictions_csv(preds, thr, paths.val_predictions_file(modality).string());
    std::vector<std::filesystem::path> inputs = {paths.preprocessed_manifest()};
    for (View view : cfg.views) inputs.push_back(paths.model_file(modality, view));
    detail::write_run_manifest(cfg, paths, "calibrate", inputs,
                               {paths.threshold_file(modality),
                                paths.val_predictions_file(modality)},
                               to_string(modality));
}

inline void cmd_predict(const PipelineConfig& cfg, Modality modality) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    detail::require_artifact(paths.threshold_file(modality), "calibrate");
    detail::require_artifact(paths.preprocessed_manifest(), "preprocess");
    DatasetManifest manifest = read_manifest(paths.preprocessed_manifest());
    detail::LoadedModels models = detail::load_models(cfg, paths, modality);
    const CalibratedThreshold thr = read_threshold(paths.threshold_file(modality).string());
    const auto preds =
        detail::predict_split(paths, manifest, models, modality, Split::test);
    if (preds.empty())
        throw DataError("no test-split " + to_string(modality) + " series to predict on");
    std::filesystem::create_directories(paths.predictions_file(modality).parent_path());
    write_predictions_csv(preds, thr, paths.predictions_file(modality).string());
    std::vector<std::filesystem::path> inputs = {paths.preprocessed_manifest(),
                                                 paths.threshold_file(modality)};
    for (View view : cfg.views) inputs.push_back(paths.model_file(modality, view));
    detail::write_run_manifest(cfg, paths, "predict", inputs,
                               {paths.predictions_file(modality)}, to_string(modality));
}

namespace detail {

inline std::vector<ScanPrediction> read_predictions_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open predictions CSV: " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw FormatError("predictions CSV " + path.string() + " is empty");
    if (line != "study_id,view,series_id,probability,ensemble_probability,decision")
        throw FormatError("predictions CSV " + path.string() + " has an unexpected header");
    std::vector<ScanPrediction> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != 6)
            throw FormatError("predictions CSV row has " + std::to_string(f.size()) +
                              " fields, expected 6");
        ScanPrediction p;
        p.study_id = f[0];
        p.view = parse_view(f[1]);
        p.series_id = f[2];
        p.probability = std::stod(f[3]);
        out.push_back(p);
    }
    return out;
}

}  // namespace detail

inline EvalReport cmd_evaluate(const PipelineConfig& cfg, Modality modality) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    detail::require_artifact(paths.threshold_file(modality), "calibrate");
    detail::require_artifact(paths.predictions_file(modality), "predict");
    detail::require_artifact(paths.preprocessed_manifest(), "preprocess");
    const CalibratedThreshold thr = read_threshold(paths.threshold_file(modality).string());
    const auto preds = detail::read_predictions_csv(paths.predictions_file(modality));
    DatasetManifest manifest = read_manifest(paths.preprocessed_manifest());
    const auto labels = detail::labels_by_study(manifest, modality, Split::test);
    std::vector<std::pair<EnsemblePrediction, int>> pairs;
    for (const auto& ens : ensemble_by_study(preds)) {
        const auto it = labels.find(ens.study_id);
        if (it == labels.end())
            throw DataError("predicted study " + ens.study_id +
                            " is not in the test split of the manifest");
        pairs.emplace_back(ens, it->second);
    }
    const EvalReport report = evaluate(pairs, thr, cfg.bootstrap_iterations,
                                       mix_seed(cfg.seed, "bootstrap:" + to_string(modality)));
    const auto dir = paths.evaluation_dir(modality);
    std::filesystem::create_directories(dir);
    write_report(report, (dir / "report.json").string());

    std::vector<std::pair<double, int>> ens_scores;
    std::map<View, std::vector<std::pair<double, int>>> view_scores;
    for (const auto& [ens, label] : pairs) {
        ens_scores.emplace_back(ens.ensemble_probability, label);
        for (const auto& [view, p] : ens.per_view_probability)
            view_scores[view].emplace_back(p, label);
    }
    const auto curve = roc_curve(ens_scores);
    write_roc_csv(curve, (dir / "roc.csv").string());
    const RocBand band = bootstrap_roc_band(ens_scores, cfg.bootstrap_iterations,
                                            mix_seed(cfg.seed, "bootstrap:" + to_string(modality)));
    std::vector<RocCurveSeries> series;
    {
        RocCurveSeries s;
        char label[64];
        std::snprintf(label, sizeof(label), "ensemble (AUC %.3f)", report.auc);
        s.name = label;
        s.points = curve;
        series.push_back(s);
    }
    for (const auto& [view, scores] : view_scores) {
        RocCurveSeries s;
        char label[64];
        std::snprintf(label, sizeof(label), "%s (AUC %.3f)", to_string(view).c_str(),
                      report.per_view_auc.at(view));
        s.name = label;
        s.points = roc_curve(scores);
        series.push_back(s);
    }
    write_roc_plot("ROC, " + to_string(modality) + " test set", series, &band,
                   (dir / "roc.svg").string());
    detail::write_run_manifest(cfg, paths, "evaluate",
                               {paths.threshold_file(modality), paths.predictions_file(modality),
                                paths.preprocessed_manifest()},
                               {dir / "report.json", dir / "roc.csv", dir / "roc.svg"},
                               to_string(modality));
    return report;
}

inline void cmd_report(const PipelineConfig& cfg) {
    cfg.validate();
    const ArtifactPaths paths(cfg);
    nlohmann::json modalities = nlohmann::json::object();
    std::vector<std::filesystem::path> inputs;
    for (Modality m : {Modality::standard, Modality::arthrogram}) {
        const auto report_path = paths.evaluation_dir(m) / "report.json";
        if (!std::filesystem::exists(report_path)) continue;
        nlohmann::json entry;
        {
            std::ifstream in(report_path);
            nlohmann::json j;
            in >> j;
            entry["evaluation"] = j;
        }
        entry["threshold"] = threshold_to_json(read_threshold(paths.threshold_file(m).string()));
        modalities[to_string(m)] = entry;
        inputs.push_back(report_path);
        inputs.push_back(paths.threshold_file(m));
    }
    if (modalities.empty())
        throw PrerequisiteError("no evaluation reports under " +
                                (paths.out / "evaluation").string() +
                                "; run the evaluate subcommand first");
    nlohmann::json j;
    j["config_hash"] = config_hash(cfg);
    j["modalities"] = modalities;
    std::filesystem::create_directories(paths.report_file().parent_path());
    std::ofstream out(paths.report_file(), std::ios::trunc);
    if (!out) throw IoError("cannot open report for writing: " + paths.report_file().string());
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("short write on report: " + paths.report_file().string());
    detail::write_run_manifest(cfg, paths, "report", inputs, {paths.report_file()});
}

}  // namespace slicewise

#pragma once

// Training loop: class-weighted BCE at scan level, adaptive-moment updates,
// early stopping on validation accuracy with best-epoch selection, and the
// two-stage pretrain -> per-modality finetune composition.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/manifest.hpp"
#include "slicewise/model.hpp"
#include "slicewise/nn/optim.hpp"
#include "slicewise/volume.hpp"

namespace slicewise {

enum class TrainStage { pretrain, finetune };

inline std::string to_string(TrainStage s) {
    return s == TrainStage::pretrain ? "pretrain" : "finetune";
}

inline TrainStage parse_train_stage(const std::string& s) {
    if (s == "pretrain") return TrainStage::pretrain;
    if (s == "finetune") return TrainStage::finetune;
    throw FormatError("unknown training stage: \"" + s + "\"");
}

enum class PosWeightMode { auto_inverse_frequency, manual };

inline std::string to_string(PosWeightMode m) {
    return m == PosWeightMode::auto_inverse_frequency ? "auto_inverse_frequency" : "manual";
}

inline PosWeightMode parse_pos_weight_mode(const std::string& s) {
    if (s == "auto_inverse_frequency") return PosWeightMode::auto_inverse_frequency;
    if (s == "manual") return PosWeightMode::manual;
    throw FormatError("unknown pos_weight_mode: \"" + s + "\"");
}

struct TrainConfig {
    int max_epochs = 100;
    int patience = 10;
    double learning_rate = 1e-5;
    int batch_scans = 8;
    PosWeightMode pos_weight_mode = PosWeightMode::auto_inverse_frequency;
    double pos_weight = 1.0;  // used when mode is manual
    std::uint64_t seed = 0;
    TrainStage stage = TrainStage::finetune;

    void validate() const {
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
        if (batch_scans < 1) throw ConfigError("batch_scans must be >= 1");
        if (pos_weight_mode == PosWeightMode::manual && !(pos_weight > 0))
            throw ConfigError("manual pos_weight must be > 0");
    }
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    int selected_epoch = 0;
    int stopped_epoch = 0;
    double best_val_accuracy = 0.0;
    std::int64_t n_train_scans = 0;
    std::int64_t n_val_scans = 0;
    double pos_weight = 1.0;
    std::uint64_t seed = 0;
    TrainStage stage = TrainStage::finetune;
};

// one training unit: a series volume carrying its study's label
struct TrainScan {
    std::string study_id;
    std::string series_id;
    View view = View::axial;
    Modality modality = Modality::standard;
    int label = 0;
    std::string mvol_path;
};

using TrainScanLoader = std::function<VolumeScan(const TrainScan&)>;

inline TrainScanLoader mvol_loader() {
    return [](const TrainScan& s) { return read_volume(s.mvol_path); };
}

// ---------------------------------------------------------------------------
// Loss helpers
// ---------------------------------------------------------------------------

// Reference form from the probability; the training loop itself works from
// logits for stability, which agrees with this wherever p is representable.
inline double weighted_bce(double probability, int label, double pos_weight) {
    if (!(probability > 0.0 && probability < 1.0) || !std::isfinite(probability))
        throw ValidationError("weighted_bce requires probability in (0,1), got " +
                              std::to_string(probability));
    if (label != 0 && label != 1) throw ValidationError("weighted_bce label must be 0 or 1");
    if (!(pos_weight > 0)) throw ValidationError("weighted_bce pos_weight must be > 0");
    return label == 1 ? -pos_weight * std::log(probability) : -std::log1p(-probability);
}

// N_neg / N_pos over training-split scans (series) of one modality
inline double compute_pos_weight(const DatasetManifest& manifest, Modality modality) {
    std::int64_t pos = 0, neg = 0;
    for (const auto& rec : manifest.records) {
        if (rec.split != Split::train || rec.modality != modality) continue;
        const auto n = static_cast<std::int64_t>(rec.series.size());
        (rec.label == Label::tear ? pos : neg) += n;
    }
    if (pos == 0 || neg == 0)
        throw ClassImbalanceError("training split has " + std::to_string(pos) + " positive and " +
                                  std::to_string(neg) + " negative " + to_string(modality) +
                                  " scans; both classes are required");
    return static_cast<double>(neg) / static_cast<double>(pos);
}

namespace detail {

inline double pos_weight_for(const TrainConfig& cfg, const std::vector<TrainScan>& train_scans) {
    if (cfg.pos_weight_mode == PosWeightMode::manual) return cfg.pos_weight;
    std::int64_t pos = 0, neg = 0;
    for (const auto& s : train_scans) (s.label == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw ClassImbalanceError("cannot derive pos_weight: training scans are single-class (" +
                                  std::to_string(pos) + " positive, " + std::to_string(neg) +
                                  " negative)");
    return static_cast<double>(neg) / static_cast<double>(pos);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

// Tracks best validation accuracy; stops after `patience` consecutive
// epochs without strict improvement. Ties keep the earliest epoch.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {
        if (patience < 1) throw ValidationError("patience must be >= 1");
    }

    // returns true when this epoch strictly improved on the best accuracy
    bool observe(int epoch, double val_accuracy) {
        if (stopped_) throw ValidationError("observe() after stopping");
        if (val_accuracy > best_) {
            best_ = val_accuracy;
            best_epoch_ = epoch;
            since_ = 0;
            return true;
        }
        ++since_;
        if (since_ >= patience_) stopped_ = true;
        return false;
    }

    bool should_stop() const { return stopped_; }
    int best_epoch() const { return best_epoch_; }
    double best_accuracy() const { return best_; }

private:
    int patience_;
    double best_ = -1.0;  // any real accuracy (>= 0) improves on this
    int best_epoch_ = 0;
    int since_ = 0;
    bool stopped_ = false;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

struct ValResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

inline ValResult validate_pass(const ScanClassifier& model, const std::vector<TrainScan>& scans,
                               const TrainScanLoader& load, double pos_weight) {
    KahanSum loss_sum;
    std::int64_t correct = 0;
    for (const auto& ts : scans) {
        const VolumeScan scan = load(ts);
        check_scan_dims(scan, model.config);
        nn::Tape t;
        nn::BoundParams p = nn::bind_params(t, model.params, false);
        nn::Var logit = scan_logit(t, model.config, p, t.leaf(scan_to_input(scan), false));
        const double z = logit.val().data[0];
        const double prob = nn::detail::sigmoid(z);
        loss_sum.add(ts.label == 1 ? pos_weight * nn::detail::softplus(-z)
                                   : nn::detail::softplus(z));
        const int decided = prob >= 0.5 ? 1 : 0;
        if (decided == ts.label) ++correct;
    }
    ValResult r;
    r.loss = loss_sum.value() / static_cast<double>(scans.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(scans.size());
    return r;
}

inline void write_checkpoint(const ScanClassifier& model, const std::string& dir,
                             const std::string& name) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    save_model(model, (std::filesystem::path(dir) / name).string());
}

}  // namespace detail

// Trains in place; returns the per-epoch log. The returned model carries
// the parameters of the best validation epoch, not the last one.
inline TrainLog train(ScanClassifier& model, const std::vector<TrainScan>& train_scans,
                      const std::vector<TrainScan>& val_scans, const TrainConfig& cfg,
                      const TrainScanLoader& load = mvol_loader(),
                      const std::string& checkpoint_dir = "") {
    cfg.validate();
    if (train_scans.empty()) throw DataError("training split is empty");
    if (val_scans.empty()) throw DataError("validation split is empty");

    const double pos_weight = detail::pos_weight_for(cfg, train_scans);
    nn::Adam::Config ocfg;
    ocfg.lr = cfg.learning_rate;
    nn::Adam opt(model.params, ocfg);
    EarlyStopper stopper(cfg.patience);

    TrainLog log;
    log.n_train_scans = static_cast<std::int64_t>(train_scans.size());
    log.n_val_scans = static_cast<std::int64_t>(val_scans.size());
    log.pos_weight = pos_weight;
    log.seed = cfg.seed;
    log.stage = cfg.stage;

    nn::ParamSet best = model.params;
    int epoch = 0;
    for (epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train_scans.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(cfg.seed, "epoch:" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);

        KahanSum epoch_loss;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_scans)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_scans));
            nn::Tape t;
            nn::BoundParams p = nn::bind_params(t, model.params, true);
            std::vector<nn::Var> losses;
            for (std::size_t i = start; i < end; ++i) {
                const TrainScan& ts = train_scans[order[i]];
                const VolumeScan scan = load(ts);
                detail::check_scan_dims(scan, model.config);
                nn::Var logit =
                    detail::scan_logit(t, model.config, p, t.leaf(scan_to_input(scan), false));
                losses.push_back(nn::bce_with_logits(logit, ts.label, pos_weight));
            }
            nn::Var batch_loss =
                nn::scale(nn::add_n(losses), 1.0 / static_cast<double>(losses.size()));
            t.backward(batch_loss);
            opt.step(model.params, t, p);
            epoch_loss.add(batch_loss.val().data[0] * static_cast<double>(losses.size()));
        }

        const detail::ValResult val = detail::validate_pass(model, val_scans, load, pos_weight);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss.value() / static_cast<double>(train_scans.size());
        rec.val_loss = val.loss;
        rec.val_accuracy = val.accuracy;
        log.epochs.push_back(rec);

        if (stopper.observe(epoch, val.accuracy)) {
            best = model.params;
            detail::write_checkpoint(model, checkpoint_dir,
                                     "epoch-" + std::to_string(epoch) + ".swckpt");
        }
        if (stopper.should_stop()) break;
    }
    log.stopped_epoch = std::min(epoch, cfg.max_epochs);
    log.selected_epoch = stopper.best_epoch();
    log.best_val_accuracy = stopper.best_accuracy();
    model.params = std::move(best);
    if (!checkpoint_dir.empty()) detail::write_checkpoint(model, checkpoint_dir, "selected.swckpt");
    return log;
}

// ---------------------------------------------------------------------------
// Staged training
// ---------------------------------------------------------------------------

struct StagedTrainConfig {
    bool run_pretrain = true;
    TrainConfig pretrain;
    TrainConfig finetune;
};

// Scan lists are already view-filtered by the caller; modality filtering of
// the finetune lists happens here so the "modality absent" contract lives
// in one place.
inline ScanClassifier run_staged_training(
    const nn::EncoderConfig& enc_cfg, const std::vector<TrainScan>& pre_train,
    const std::vector<TrainScan>& pre_val, const std::vector<TrainScan>& fine_train,
    const std::vector<TrainScan>& fine_val, Modality modality, const StagedTrainConfig& cfg,
    const TrainScanLoader& load = mvol_loader(), TrainLog* pretrain_log = nullptr,
    TrainLog* finetune_log = nullptr, const std::string& checkpoint_dir = "") {
    enc_cfg.validate();

    ScanClassifier model =
        enc_cfg.weights_init == nn::WeightsInit::Random
            ? make_model(enc_cfg, cfg.run_pretrain ? cfg.pretrain.seed : cfg.finetune.seed)
            : load_model_as(enc_cfg.checkpoint_path, enc_cfg);

    if (cfg.run_pretrain) {
        TrainConfig pcfg = cfg.pretrain;
        pcfg.stage = TrainStage::pretrain;
        TrainLog plog = train(model, pre_train, pre_val, pcfg, load,
                              checkpoint_dir.empty() ? "" : checkpoint_dir + "/pretrain");
        if (pretrain_log) *pretrain_log = std::move(plog);
    }

    auto filter = [modality](const std::vector<TrainScan>& scans) {
        std::vector<TrainScan> out;
        for (const auto& s : scans)
            if (s.modality == modality) out.push_back(s);
        return out;
    };
    std::vector<TrainScan> ft = filter(fine_train);
    std::vector<TrainScan> fv = filter(fine_val);
    if (ft.empty())
        throw DataError("no " + to_string(modality) + " training scans in the finetune data");
    if (fv.empty())
        throw DataError("no " + to_string(modality) + " validation scans in the finetune data");

    TrainConfig fcfg = cfg.finetune;
    fcfg.stage = TrainStage::finetune;
    TrainLog flog = train(model, ft, fv, fcfg, load,
                          checkpoint_dir.empty() ? "" : checkpoint_dir + "/finetune");
    if (finetune_log) *finetune_log = std::move(flog);
    return model;
}

// ---------------------------------------------------------------------------
// Log persistence: one JSON object per epoch, then a summary line
// ---------------------------------------------------------------------------

inline void write_train_log(const TrainLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open training log for writing: " + path);
    for (const auto& e : log.epochs) {
        nlohmann::json j;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        j["val_loss"] = e.val_loss;
        j["val_accuracy"] = e.val_accuracy;
        out << j.dump() << '\n';
    }
    nlohmann::json s;
    s["summary"] = true;
    s["stage"] = to_string(log.stage);
    s["selected_epoch"] = log.selected_epoch;
    s["stopped_epoch"] = log.stopped_epoch;
    s["best_val_accuracy"] = log.best_val_accuracy;
    s["n_train_scans"] = log.n_train_scans;
    s["n_val_scans"] = log.n_val_scans;
    s["pos_weight"] = log.pos_weight;
    s["seed"] = log.seed;
    out << s.dump() << '\n';
    out.flush();
    if (!out) throw IoError("short write on training log: " + path);
}

}  // namespace slicewise

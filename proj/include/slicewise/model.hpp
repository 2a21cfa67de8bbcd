#pragma once

// Scan-level classifier: per-slice encoder, element-wise max over the slice
// axis, affine head, logistic link. One scan is one bag of slices; nothing
// here ever pads the slice axis.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/nn/autograd.hpp"
#include "slicewise/nn/encoders.hpp"
#include "slicewise/nn/params.hpp"
#include "slicewise/volume.hpp"

namespace slicewise {

struct ScanClassifier {
    nn::EncoderConfig config;
    nn::ParamSet params;  // encoder.* plus head.weight / head.bias
    nlohmann::json provenance = nlohmann::json::object();
};

struct ScanPrediction {
    std::string study_id;
    std::string series_id;
    View view = View::axial;
    double probability = 0.5;
};

inline ScanClassifier make_model(const nn::EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ScanClassifier model;
    model.config = cfg;
    nn::add_encoder_params(model.params, cfg, seed);
    {
        nn::Tensor w({cfg.embedding_dim});
        Rng rng = nn::detail::init_rng(seed, "head.weight");
        nn::fill_normal(w, rng, 1.0 / std::sqrt(static_cast<double>(cfg.embedding_dim)));
        model.params.add("head.weight", std::move(w));
    }
    model.params.add("head.bias", nn::Tensor({1}));
    return model;
}

// (S,H,W) voxels replicated to the encoder's 3 input channels, as doubles
inline nn::Tensor scan_to_input(const VolumeScan& scan) {
    const std::int64_t S = scan.slices, H = scan.height, W = scan.width;
    nn::Tensor x({S, 3, H, W});
    const std::int64_t plane = H * W;
    for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t i = 0; i < plane; ++i) {
            const double v = static_cast<double>(scan.voxels[static_cast<std::size_t>(s * plane + i)]);
            for (std::int64_t c = 0; c < 3; ++c)
                x.data[static_cast<std::size_t>((s * 3 + c) * plane + i)] = v;
        }
    return x;
}

namespace detail {

inline void check_scan_dims(const VolumeScan& scan, const nn::EncoderConfig& cfg) {
    if (scan.height != cfg.image_size || scan.width != cfg.image_size)
        throw ShapeError("scan " + scan.series_id + " is " + std::to_string(scan.height) + "x" +
                         std::to_string(scan.width) + ", encoder expects " +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
}

// full scan graph: embeddings -> max over slices -> affine head -> logit
inline nn::Var scan_logit(nn::Tape& t, const nn::EncoderConfig& cfg, const nn::BoundParams& p,
                          nn::Var input) {
    nn::Var emb = nn::encoder_forward(t, cfg, p, input);  // (S,D)
    nn::Var agg = nn::colmax(emb);                        // (D)
    return nn::add(nn::dot(agg, p.at("head.weight")), p.at("head.bias"));
}

}  // namespace detail

inline nn::Tensor encode_slices(const VolumeScan& scan, const ScanClassifier& model) {
    detail::check_scan_dims(scan, model.config);
    nn::Tape t;
    nn::BoundParams p = nn::bind_params(t, model.params, false);
    nn::Var emb = nn::encoder_forward(t, model.config, p, t.leaf(scan_to_input(scan), false));
    return emb.val();
}

inline nn::Tensor aggregate_max(const nn::Tensor& embeddings) {
    if (embeddings.rank() != 2)
        throw ShapeError("aggregate_max expects (S,D) embeddings, got " + embeddings.shape_str());
    if (embeddings.dim(0) < 1) throw ValidationError("aggregate_max: scan has no slices");
    const std::int64_t S = embeddings.dim(0), D = embeddings.dim(1);
    nn::Tensor out({D});
    for (std::int64_t j = 0; j < D; ++j) {
        double best = embeddings.data[static_cast<std::size_t>(j)];
        for (std::int64_t s = 1; s < S; ++s)
            best = std::max(best, embeddings.data[static_cast<std::size_t>(s * D + j)]);
        out.data[static_cast<std::size_t>(j)] = best;
    }
    return out;
}

inline ScanPrediction predict_scan(const VolumeScan& scan, const ScanClassifier& model) {
    detail::check_scan_dims(scan, model.config);
    if (scan.slices < 1) throw ValidationError("predict_scan: scan has no slices");
    nn::Tape t;
    nn::BoundParams p = nn::bind_params(t, model.params, false);
    nn::Var logit = detail::scan_logit(t, model.config, p, t.leaf(scan_to_input(scan), false));
    const double prob = nn::detail::sigmoid(logit.val().data[0]);
    ScanPrediction pred;
    pred.study_id = scan.study_id;
    pred.series_id = scan.series_id;
    pred.view = scan.view;
    // keep the probability in the open interval even for extreme logits
    pred.probability = clampd(prob, 1e-12, 1.0 - 1e-12);
    return pred;
}

// ---------------------------------------------------------------------------
// Checkpoint io: one-line JSON metadata header, '\n', then every parameter
// tensor as raw little-endian float64 in metadata order.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json encoder_config_to_json(const nn::EncoderConfig& cfg) {
    nlohmann::json j;
    j["architecture"] = nn::to_string(cfg.architecture);
    j["embedding_dim"] = cfg.embedding_dim;
    j["input_channels"] = cfg.input_channels;
    j["image_size"] = cfg.image_size;
    if (cfg.architecture == nn::Architecture::HierarchicalWindowedTransformer) {
        j["patch_size"] = cfg.patch_size;
        j["base_width"] = cfg.base_width;
        j["depths"] = cfg.depths;
        j["heads"] = cfg.heads;
        j["window"] = cfg.window;
        j["mlp_ratio"] = cfg.mlp_ratio;
    }
    return j;
}

inline nn::EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    nn::EncoderConfig cfg;
    cfg.architecture = nn::parse_architecture(j.at("architecture").get<std::string>());
    cfg.embedding_dim = j.at("embedding_dim").get<std::int64_t>();
    cfg.input_channels = j.at("input_channels").get<std::int64_t>();
    cfg.image_size = j.at("image_size").get<std::int64_t>();
    if (cfg.architecture == nn::Architecture::HierarchicalWindowedTransformer) {
        cfg.patch_size = j.at("patch_size").get<std::int64_t>();
        cfg.base_width = j.at("base_width").get<std::int64_t>();
        cfg.depths = j.at("depths").get<std::vector<std::int64_t>>();
        cfg.heads = j.at("heads").get<std::vector<std::int64_t>>();
        cfg.window = j.at("window").get<std::int64_t>();
        cfg.mlp_ratio = j.at("mlp_ratio").get<double>();
    }
    return cfg;
}

}  // namespace detail

inline void save_model(const ScanClassifier& model, const std::string& path) {
    nlohmann::json meta;
    meta["format"] = "swckpt";
    meta["version"] = kCheckpointVersion;
    meta["encoder"] = detail::encoder_config_to_json(model.config);
    meta["provenance"] = model.provenance;
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& [name, t] : model.params.items()) {
        nlohmann::json p;
        p["name"] = name;
        p["shape"] = t.shape;
        plist.push_back(std::move(p));
    }
    meta["params"] = std::move(plist);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << meta.dump() << '\n';
    for (const auto& [name, t] : model.params.items())
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    out.flush();
    if (!out) throw IoError("short write while saving checkpoint: " + path);
}

inline ScanClassifier load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string header;
    if (!std::getline(in, header)) throw CheckpointError("checkpoint has no header line: " + path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint header is not valid JSON (" + path + "): " + e.what());
    }
    try {
        if (meta.at("format").get<std::string>() != "swckpt")
            throw CheckpointError("not a model checkpoint: " + path);
        if (meta.at("version").get<int>() != kCheckpointVersion)
            throw CheckpointError("unsupported checkpoint version " +
                                  meta.at("version").dump() + " in " + path);
        ScanClassifier model;
        model.config = detail::encoder_config_from_json(meta.at("encoder"));
        model.config.validate();
        model.provenance = meta.value("provenance", nlohmann::json::object());
        for (const auto& p : meta.at("params")) {
            const auto name = p.at("name").get<std::string>();
            const auto shape = p.at("shape").get<std::vector<std::int64_t>>();
            nn::Tensor t(shape);
            in.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            if (in.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(double)))
                throw CheckpointError("checkpoint payload truncated at parameter \"" + name +
                                      "\": " + path);
            model.params.add(name, std::move(t));
        }
        if (in.peek() != std::ifstream::traits_type::eof())
            throw CheckpointError("checkpoint has trailing bytes after the last parameter: " + path);

        // the stored tensors must be exactly the set this config would create
        ScanClassifier expect = make_model(model.config, 0);
        if (expect.params.size() != model.params.size())
            throw CheckpointError("checkpoint parameter list does not match its architecture: " +
                                  path);
        for (std::size_t i = 0; i < expect.params.items().size(); ++i) {
            const auto& [ename, et] = expect.params.items()[i];
            const auto& [lname, lt] = model.params.items()[i];
            if (ename != lname || et.shape != lt.shape)
                throw CheckpointError("checkpoint parameter \"" + lname +
                                      "\" does not match the declared architecture: " + path);
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed checkpoint metadata (" + path + "): " + e.what());
    }
}

// load with an architecture expectation, e.g. resuming a configured run
inline ScanClassifier load_model_as(const std::string& path, const nn::EncoderConfig& expected) {
    ScanClassifier model = load_model(path);
    if (model.config.architecture != expected.architecture)
        throw CheckpointError("checkpoint holds a " + nn::to_string(model.config.architecture) +
                              " model but the configuration expects " +
                              nn::to_string(expected.architecture) + ": " + path);
    if (model.config.embedding_dim != expected.embedding_dim)
        throw CheckpointError("checkpoint embedding_dim " +
                              std::to_string(model.config.embedding_dim) +
                              " does not match the configured " +
                              std::to_string(expected.embedding_dim) + ": " + path);
    return model;
}

}  // namespace slicewise

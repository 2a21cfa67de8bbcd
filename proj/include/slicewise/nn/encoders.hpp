#pragma once

// Slice encoders: a 3-block conv baseline for desk-scale runs and a
// hierarchical windowed-attention transformer (Swin V1 layout: windowed
// multi-head self-attention with relative position bias, alternating
// cyclic-shifted windows, patch merging between stages). Both map a batch
// of 3-channel slices to one embedding per slice.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/nn/autograd.hpp"
#include "slicewise/nn/params.hpp"
#include "slicewise/nn/tensor.hpp"

namespace slicewise::nn {

enum class Architecture { HierarchicalWindowedTransformer, SmallConvBaseline };

inline std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::HierarchicalWindowedTransformer: return "hierarchical_windowed_transformer";
        case Architecture::SmallConvBaseline: return "small_conv_baseline";
    }
    throw ValidationError("unhandled architecture");
}

inline Architecture parse_architecture(const std::string& s) {
    if (s == "hierarchical_windowed_transformer") return Architecture::HierarchicalWindowedTransformer;
    if (s == "small_conv_baseline") return Architecture::SmallConvBaseline;
    throw FormatError("unknown architecture: \"" + s + "\"");
}

enum class WeightsInit { ImagenetPretrained, Random, FromCheckpoint };

inline std::string to_string(WeightsInit w) {
    switch (w) {
        case WeightsInit::ImagenetPretrained: return "imagenet_pretrained";
        case WeightsInit::Random: return "random";
        case WeightsInit::FromCheckpoint: return "from_checkpoint";
    }
    throw ValidationError("unhandled weights init");
}

inline WeightsInit parse_weights_init(const std::string& s) {
    if (s == "imagenet_pretrained") return WeightsInit::ImagenetPretrained;
    if (s == "random") return WeightsInit::Random;
    if (s == "from_checkpoint") return WeightsInit::FromCheckpoint;
    throw FormatError("unknown weights_init: \"" + s + "\"");
}

struct EncoderConfig {
    Architecture architecture = Architecture::HierarchicalWindowedTransformer;
    std::int64_t embedding_dim = 768;  // D, the per-slice feature width
    std::int64_t input_channels = 3;
    WeightsInit weights_init = WeightsInit::Random;
    std::string checkpoint_path;  // required for pretrained / from_checkpoint

    std::int64_t image_size = 224;

    // transformer shape; defaults are the smallest standard variant
    std::int64_t patch_size = 4;
    std::int64_t base_width = 96;
    std::vector<std::int64_t> depths = {2, 2, 6, 2};
    std::vector<std::int64_t> heads = {3, 6, 12, 24};
    std::int64_t window = 7;
    double mlp_ratio = 4.0;

    static constexpr std::int64_t kSmallConvDim = 64;

    std::int64_t stages() const { return static_cast<std::int64_t>(depths.size()); }

    // width of the final stage
    std::int64_t derived_dim() const {
        if (architecture == Architecture::SmallConvBaseline) return kSmallConvDim;
        return base_width << (stages() - 1);
    }

    std::int64_t stage_resolution(std::int64_t i) const {
        return (image_size / patch_size) >> i;
    }

    // windows wider than the feature map shrink to cover it exactly
    std::int64_t effective_window(std::int64_t i) const {
        return std::min(window, stage_resolution(i));
    }

    void validate() const {
        if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
        if (input_channels != 3)
            throw ConfigError("input_channels is fixed at 3 (single-channel slices are replicated)");
        if (image_size < 1) throw ConfigError("image_size must be >= 1");
        if (weights_init != WeightsInit::Random && checkpoint_path.empty())
            throw ConfigError("weights_init \"" + to_string(weights_init) +
                              "\" requires checkpoint_path (no weights are bundled)");
        if (architecture == Architecture::SmallConvBaseline) {
            if (embedding_dim != kSmallConvDim)
                throw ConfigError("small_conv_baseline has a fixed embedding_dim of " +
                                  std::to_string(kSmallConvDim));
            return;
        }
        if (depths.empty() || depths.size() != heads.size())
            throw ConfigError("depths and heads must be non-empty and equal-length");
        for (auto d : depths)
            if (d < 1) throw ConfigError("every stage depth must be >= 1");
        if (patch_size < 1 || base_width < 1 || window < 1 || !(mlp_ratio > 0))
            throw ConfigError("patch_size, base_width, window and mlp_ratio must be positive");
        if (image_size % patch_size != 0)
            throw ConfigError("image_size must be divisible by patch_size");
        if (embedding_dim != derived_dim())
            throw ConfigError("embedding_dim " + std::to_string(embedding_dim) +
                              " does not match the transformer's final width " +
                              std::to_string(derived_dim()) +
                              " (base_width * 2^(stages-1))");
        for (std::int64_t i = 0; i < stages(); ++i) {
            const std::int64_t res = stage_resolution(i);
            if (res < 1)
                throw ConfigError("image too small: stage " + std::to_string(i) +
                                  " resolution collapses to zero");
            const std::int64_t w = effective_window(i);
            if (res % w != 0)
                throw ConfigError("stage " + std::to_string(i) + " resolution " +
                                  std::to_string(res) + " is not divisible by window " +
                                  std::to_string(w));
            const std::int64_t width = base_width << i;
            if (width % heads[static_cast<std::size_t>(i)] != 0)
                throw ConfigError("stage " + std::to_string(i) + " width " + std::to_string(width) +
                                  " is not divisible by its head count");
            if (i + 1 < stages() && res % 2 != 0)
                throw ConfigError("stage " + std::to_string(i) + " resolution " +
                                  std::to_string(res) + " must be even to merge patches");
        }
    }
};

// a tiny transformer variant for fast tests; exercises shifting and merging
inline EncoderConfig desk_scale_transformer_config() {
    EncoderConfig cfg;
    cfg.architecture = Architecture::HierarchicalWindowedTransformer;
    cfg.image_size = 16;
    cfg.patch_size = 2;
    cfg.base_width = 8;
    cfg.depths = {2, 1};
    cfg.heads = {2, 2};
    cfg.window = 2;
    cfg.embedding_dim = 16;
    return cfg;
}

inline EncoderConfig small_conv_config() {
    EncoderConfig cfg;
    cfg.architecture = Architecture::SmallConvBaseline;
    cfg.embedding_dim = EncoderConfig::kSmallConvDim;
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

namespace detail {

inline Rng init_rng(std::uint64_t seed, const std::string& name) {
    return Rng(mix_seed(seed, "init:" + name));
}

inline void add_conv(ParamSet& ps, std::uint64_t seed, const std::string& name, std::int64_t co,
                     std::int64_t ci, std::int64_t kh, std::int64_t kw) {
    Tensor w({co, ci, kh, kw});
    Rng rng = init_rng(seed, name + ".w");
    fill_he_normal(w, rng, ci * kh * kw);
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", Tensor({co}));
}

inline void add_linear(ParamSet& ps, std::uint64_t seed, const std::string& name, std::int64_t in,
                       std::int64_t out) {
    Tensor w({in, out});
    Rng rng = init_rng(seed, name + ".w");
    fill_trunc_normal(w, rng, 0.02);
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", Tensor({out}));
}

inline void add_norm(ParamSet& ps, const std::string& name, std::int64_t d) {
    ps.add(name + ".g", Tensor::full({d}, 1.0));
    ps.add(name + ".b", Tensor({d}));
}

}  // namespace detail

inline void add_encoder_params(ParamSet& ps, const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.architecture == Architecture::SmallConvBaseline) {
        detail::add_conv(ps, seed, "encoder.conv1", 16, cfg.input_channels, 7, 7);
        detail::add_conv(ps, seed, "encoder.conv2", 32, 16, 3, 3);
        detail::add_conv(ps, seed, "encoder.conv3", 64, 32, 3, 3);
        return;
    }
    detail::add_conv(ps, seed, "encoder.patch", cfg.base_width, cfg.input_channels,
                     cfg.patch_size, cfg.patch_size);
    detail::add_norm(ps, "encoder.patch_norm", cfg.base_width);
    for (std::int64_t i = 0; i < cfg.stages(); ++i) {
        const std::int64_t c = cfg.base_width << i;
        const std::int64_t w = cfg.effective_window(i);
        const std::int64_t hidden = static_cast<std::int64_t>(std::llround(cfg.mlp_ratio * static_cast<double>(c)));
        for (std::int64_t j = 0; j < cfg.depths[static_cast<std::size_t>(i)]; ++j) {
            const std::string b =
                "encoder.s" + std::to_string(i) + ".b" + std::to_string(j);
            detail::add_norm(ps, b + ".n1", c);
            detail::add_linear(ps, seed, b + ".attn.qkv", c, 3 * c);
            detail::add_linear(ps, seed, b + ".attn.proj", c, c);
            {
                Tensor bias({(2 * w - 1) * (2 * w - 1), cfg.heads[static_cast<std::size_t>(i)]});
                Rng rng = detail::init_rng(seed, b + ".attn.bias");
                fill_trunc_normal(bias, rng, 0.02);
                ps.add(b + ".attn.bias", std::move(bias));
            }
            detail::add_norm(ps, b + ".n2", c);
            detail::add_linear(ps, seed, b + ".mlp.fc1", c, hidden);
            detail::add_linear(ps, seed, b + ".mlp.fc2", hidden, c);
        }
        if (i + 1 < cfg.stages()) {
            const std::string m = "encoder.s" + std::to_string(i) + ".merge";
            detail::add_norm(ps, m + ".norm", 4 * c);
            detail::add_linear(ps, seed, m, 4 * c, 2 * c);
        }
    }
    detail::add_norm(ps, "encoder.norm", cfg.embedding_dim);
}

// ---------------------------------------------------------------------------
// Windowed attention helpers (tape-free constants)
// ---------------------------------------------------------------------------

namespace detail {

// flattened (n*n) pair -> row of the relative position bias table
inline std::shared_ptr<const std::vector<std::int64_t>> relative_index(std::int64_t w) {
    const std::int64_t n = w * w;
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n * n));
    for (std::int64_t a = 0; a < n; ++a) {
        const std::int64_t ar = a / w, ac = a % w;
        for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t br = b / w, bc = b % w;
            const std::int64_t di = ar - br + w - 1;
            const std::int64_t dj = ac - bc + w - 1;
            (*idx)[static_cast<std::size_t>(a * n + b)] = di * (2 * w - 1) + dj;
        }
    }
    return idx;
}

// additive mask (nW, n, n) for shifted windows: 0 within a contiguous
// region, -100 across regions that only meet through the cyclic shift
inline Tensor shift_mask(std::int64_t H, std::int64_t W, std::int64_t w, std::int64_t s) {
    std::vector<std::int64_t> region(static_cast<std::size_t>(H * W));
    auto band = [&](std::int64_t v, std::int64_t size) {
        if (v < size - w) return std::int64_t{0};
        if (v < size - s) return std::int64_t{1};
        return std::int64_t{2};
    };
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t x = 0; x < W; ++x)
            region[static_cast<std::size_t>(h * W + x)] = band(h, H) * 3 + band(x, W);
    const std::int64_t nWh = H / w, nWw = W / w, n = w * w;
    Tensor mask({nWh * nWw, n, n});
    for (std::int64_t wh = 0; wh < nWh; ++wh)
        for (std::int64_t ww = 0; ww < nWw; ++ww) {
            const std::int64_t widx = wh * nWw + ww;
            for (std::int64_t a = 0; a < n; ++a) {
                const std::int64_t ra =
                    region[static_cast<std::size_t>((wh * w + a / w) * W + ww * w + a % w)];
                for (std::int64_t b = 0; b < n; ++b) {
                    const std::int64_t rb =
                        region[static_cast<std::size_t>((wh * w + b / w) * W + ww * w + b % w)];
                    mask.data[static_cast<std::size_t>((widx * n + a) * n + b)] =
                        ra == rb ? 0.0 : -100.0;
                }
            }
        }
    return mask;
}

// (N,H,W,C) -> (N*nW, w*w, C)
inline Var window_partition(Var x, std::int64_t w) {
    const auto& s = x.val().shape;
    const std::int64_t N = s[0], H = s[1], W = s[2], C = s[3];
    Var r = reshape(x, {N, H / w, w, W / w, w, C});
    Var p = permute(r, {0, 1, 3, 2, 4, 5});
    return reshape(p, {N * (H / w) * (W / w), w * w, C});
}

inline Var window_reverse(Var x, std::int64_t w, std::int64_t N, std::int64_t H, std::int64_t W) {
    const std::int64_t C = x.val().shape.back();
    Var r = reshape(x, {N, H / w, W / w, w, w, C});
    Var p = permute(r, {0, 1, 3, 2, 4, 5});
    return reshape(p, {N, H, W, C});
}

// windowed multi-head self-attention over (B_, n, C) with relative position
// bias; mask applies per window when the input was cyclically shifted
inline Var window_attention(Tape& t, const BoundParams& p, const std::string& prefix, Var xw,
                            std::int64_t heads, std::int64_t win, std::int64_t batch_n,
                            const Tensor* mask) {
    const auto& s = xw.val().shape;
    const std::int64_t B = s[0], n = s[1], C = s[2];
    const std::int64_t d = C / heads;
    Var qkv = linear(reshape(xw, {B * n, C}), p.at(prefix + ".qkv.w"), p.at(prefix + ".qkv.b"));
    Var qkv3 = reshape(qkv, {B, n, 3 * C});
    auto split_heads = [&](Var v) {
        return reshape(permute(reshape(v, {B, n, heads, d}), {0, 2, 1, 3}), {B * heads, n, d});
    };
    Var q = split_heads(narrow_last(qkv3, 0, C));
    Var k = split_heads(narrow_last(qkv3, C, C));
    Var v = split_heads(narrow_last(qkv3, 2 * C, C));
    q = scale(q, 1.0 / std::sqrt(static_cast<double>(d)));
    Var attn = bmm(q, k, true);  // (B*heads, n, n)

    Var bias_rows = gather_rows(p.at(prefix + ".bias"), relative_index(win));  // (n*n, heads)
    Var bias = permute(reshape(bias_rows, {n, n, heads}), {2, 0, 1});          // (heads, n, n)
    Var a4 = add_bcast(reshape(attn, {B, heads, n, n}), bias);

    if (mask != nullptr) {
        const std::int64_t nW = mask->shape[0];
        Var m = t.leaf(Tensor({nW, 1, n, n}, mask->data), false);
        Var a5 = reshape(a4, {batch_n, nW, heads, n, n});
        a4 = reshape(add_bcast(a5, m), {B, heads, n, n});
    }
    Var soft = softmax_last(reshape(a4, {B * heads, n, n}));
    Var out = bmm(soft, v);  // (B*heads, n, d)
    Var merged = reshape(permute(reshape(out, {B, heads, n, d}), {0, 2, 1, 3}), {B * n, C});
    Var proj = linear(merged, p.at(prefix + ".proj.w"), p.at(prefix + ".proj.b"));
    return reshape(proj, {B, n, C});
}

inline Var swin_block(Tape& t, const BoundParams& p, const std::string& prefix, Var x,
                      std::int64_t heads, std::int64_t win, std::int64_t shift) {
    const auto& s = x.val().shape;
    const std::int64_t N = s[0], H = s[1], W = s[2], C = s[3];
    Var shortcut = x;
    Var h = layernorm(x, p.at(prefix + ".n1.g"), p.at(prefix + ".n1.b"));
    Tensor mask;
    if (shift > 0) {
        h = roll_hw(h, -shift, -shift);
        mask = shift_mask(H, W, win, shift);
    }
    Var windows = window_partition(h, win);
    Var attended = window_attention(t, p, prefix + ".attn", windows, heads, win, N,
                                    shift > 0 ? &mask : nullptr);
    Var back = window_reverse(attended, win, N, H, W);
    if (shift > 0) back = roll_hw(back, shift, shift);
    x = add(shortcut, back);

    Var h2 = layernorm(x, p.at(prefix + ".n2.g"), p.at(prefix + ".n2.b"));
    Var flat = reshape(h2, {N * H * W, C});
    Var m1 = gelu(linear(flat, p.at(prefix + ".mlp.fc1.w"), p.at(prefix + ".mlp.fc1.b")));
    Var m2 = linear(m1, p.at(prefix + ".mlp.fc2.w"), p.at(prefix + ".mlp.fc2.b"));
    return add(x, reshape(m2, {N, H, W, C}));
}

// (N,H,W,C) -> (N,H/2,W/2,2C)
inline Var patch_merge(const BoundParams& p, const std::string& prefix, Var x) {
    const auto& s = x.val().shape;
    const std::int64_t N = s[0], H = s[1], W = s[2], C = s[3];
    Var x0 = subsample_hw(x, 0, 0);
    Var x1 = subsample_hw(x, 1, 0);
    Var x2 = subsample_hw(x, 0, 1);
    Var x3 = subsample_hw(x, 1, 1);
    Var cat = concat_last({x0, x1, x2, x3});  // (N,H/2,W/2,4C)
    Var norm = layernorm(cat, p.at(prefix + ".norm.g"), p.at(prefix + ".norm.b"));
    Var flat = reshape(norm, {N * (H / 2) * (W / 2), 4 * C});
    Var red = linear(flat, p.at(prefix + ".w"), p.at(prefix + ".b"));
    return reshape(red, {N, H / 2, W / 2, 2 * C});
}

inline Var small_conv_forward(const BoundParams& p, Var x) {
    Var h1 = relu(conv2d(x, p.at("encoder.conv1.w"), p.at("encoder.conv1.b"), 4, 3));
    Var h2 = relu(conv2d(h1, p.at("encoder.conv2.w"), p.at("encoder.conv2.b"), 2, 1));
    Var h3 = relu(conv2d(h2, p.at("encoder.conv3.w"), p.at("encoder.conv3.b"), 2, 1));
    return gap_nchw(h3);
}

inline Var transformer_forward(Tape& t, const EncoderConfig& cfg, const BoundParams& p, Var x) {
    const std::int64_t N = x.val().shape[0];
    Var emb = conv2d(x, p.at("encoder.patch.w"), p.at("encoder.patch.b"), cfg.patch_size, 0);
    Var tokens = permute(emb, {0, 2, 3, 1});  // (N,Hp,Wp,C)
    tokens = layernorm(tokens, p.at("encoder.patch_norm.g"), p.at("encoder.patch_norm.b"));
    for (std::int64_t i = 0; i < cfg.stages(); ++i) {
        const std::int64_t win = cfg.effective_window(i);
        const std::int64_t res = cfg.stage_resolution(i);
        const std::int64_t heads = cfg.heads[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < cfg.depths[static_cast<std::size_t>(i)]; ++j) {
            // alternate plain and shifted windows; a single window covering
            // the whole map makes shifting a no-op
            const std::int64_t shift = (j % 2 == 1 && win < res) ? win / 2 : 0;
            tokens = swin_block(t, p, "encoder.s" + std::to_string(i) + ".b" + std::to_string(j),
                                tokens, heads, win, shift);
        }
        if (i + 1 < cfg.stages())
            tokens = patch_merge(p, "encoder.s" + std::to_string(i) + ".merge", tokens);
    }
    Var normed = layernorm(tokens, p.at("encoder.norm.g"), p.at("encoder.norm.b"));
    const auto& s = normed.val().shape;
    const std::int64_t T = s[1] * s[2], C = s[3];
    Var seq = permute(reshape(normed, {N, T, C}), {0, 2, 1});  // (N,C,T)
    return gap_nchw(reshape(seq, {N, C, T, 1}));               // token mean -> (N,C)
}

}  // namespace detail

// x: (S, 3, H, W) -> per-slice embeddings (S, D)
inline Var encoder_forward(Tape& t, const EncoderConfig& cfg, const BoundParams& p, Var x) {
    const auto& s = x.val().shape;
    if (s.size() != 4 || s[1] != cfg.input_channels)
        throw ShapeError("encoder input must be (S," + std::to_string(cfg.input_channels) +
                         ",H,W), got " + x.val().shape_str());
    if (cfg.architecture == Architecture::SmallConvBaseline)
        return detail::small_conv_forward(p, x);
    if (s[2] != cfg.image_size || s[3] != cfg.image_size)
        throw ShapeError("transformer encoder requires " + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + " slices, got " + x.val().shape_str());
    return detail::transformer_forward(t, cfg, p, x);
}

}  // namespace slicewise::nn

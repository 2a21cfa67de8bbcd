#pragma once

// Reverse-mode autodiff on a dynamic tape. Each op computes its value
// eagerly and, when any input wants gradients, registers a closure that
// pushes the output gradient back to its parents. backward() walks the tape
// in reverse creation order, which is a valid topological order because a
// node can only depend on earlier nodes.
//
// Ops capture their own output id by reading the tape size before they
// append. Every backward formula here is covered by a finite-difference
// check in the test suite; keep it that way when adding ops.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/nn/tensor.hpp"

namespace slicewise::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
    bool requires_grad() const;
};

class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated on first touch
        bool requires_grad = false;
        bool grad_live = false;
        std::function<void(Tape&)> backward;  // empty for leaves
    };

    Var leaf(Tensor value, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var node(Tensor value, bool requires_grad, std::function<void(Tape&)> backward) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false,
                              requires_grad ? std::move(backward) : std::function<void(Tape&)>{}});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    int next_id() const { return static_cast<int>(nodes_.size()); }

    const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    Tensor& val(int id) { return nodes_[static_cast<std::size_t>(id)].value; }

    bool requires_grad(int id) const {
        return nodes_[static_cast<std::size_t>(id)].requires_grad;
    }

    // gradient accumulator for a node; zero-initialized on first access
    Tensor& grad(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_live) {
            n.grad = Tensor(n.value.shape);
            n.grad_live = true;
        }
        return n.grad;
    }

    bool grad_live(int id) const { return nodes_[static_cast<std::size_t>(id)].grad_live; }

    void backward(Var root) {
        if (root.tape != this) throw ValidationError("backward: var from another tape");
        Node& r = nodes_[static_cast<std::size_t>(root.id)];
        if (r.value.numel() != 1)
            throw ShapeError("backward requires a scalar root, got " + r.value.shape_str());
        if (!r.requires_grad)
            throw ValidationError("backward: root does not require gradients");
        grad(root.id).data[0] = 1.0;
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad_live && n.backward) n.backward(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;  // deque keeps Node references stable as the tape grows
};

inline const Tensor& Var::val() const { return tape->val(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

namespace detail {

inline void check_same_tape(std::initializer_list<Var> vars) {
    const Tape* t = nullptr;
    for (const Var& v : vars) {
        if (!v.valid()) throw ValidationError("op received an invalid Var");
        if (t == nullptr) t = v.tape;
        else if (v.tape != t) throw ValidationError("op mixes Vars from different tapes");
    }
}

inline std::vector<std::int64_t> strides_of(const std::vector<std::int64_t>& shape) {
    std::vector<std::int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[static_cast<std::size_t>(i)] =
            s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    return s;
}

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double softplus(double z) {  // log(1 + e^z), overflow-safe
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / scalar
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    detail::check_same_tape({a, b});
    if (!same_shape(a.val(), b.val()))
        throw ShapeError("add: shape mismatch " + a.val().shape_str() + " vs " +
                         b.val().shape_str());
    Tape& t = *a.tape;
    Tensor out = a.val();
    const auto& bd = b.val().data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
    const int ia = a.id, ib = b.id, io = t.next_id();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return t.node(std::move(out), ga || gb, [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        if (ga) {
            auto& d = tp.grad(ia).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (gb) {
            auto& d = tp.grad(ib).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    detail::check_same_tape({a, b});
    if (!same_shape(a.val(), b.val()))
        throw ShapeError("sub: shape mismatch");
    Tape& t = *a.tape;
    Tensor out = a.val();
    const auto& bd = b.val().data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bd[i];
    const int ia = a.id, ib = b.id, io = t.next_id();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return t.node(std::move(out), ga || gb, [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        if (ga) {
            auto& d = tp.grad(ia).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (gb) {
            auto& d = tp.grad(ib).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    detail::check_same_tape({a, b});
    if (!same_shape(a.val(), b.val()))
        throw ShapeError("mul: shape mismatch");
    Tape& t = *a.tape;
    Tensor out = a.val();
    const auto& bd = b.val().data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
    const int ia = a.id, ib = b.id, io = t.next_id();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return t.node(std::move(out), ga || gb, [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        const auto& av = tp.val(ia).data;
        const auto& bv = tp.val(ib).data;
        if (ga) {
            auto& d = tp.grad(ia).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
        }
        if (gb) {
            auto& d = tp.grad(ib).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
        }
    });
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (auto& x : out.data) x *= c;
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
    });
}

inline Var add_scalar(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (auto& x : out.data) x += c;
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

// sum of same-shaped vars
inline Var add_n(const std::vector<Var>& vs) {
    if (vs.empty()) throw ValidationError("add_n: empty input");
    Tape& t = *vs[0].tape;
    Tensor out = vs[0].val();
    bool rg = vs[0].requires_grad();
    std::vector<int> ids{vs[0].id};
    std::vector<bool> want{vs[0].requires_grad()};
    for (std::size_t k = 1; k < vs.size(); ++k) {
        detail::check_same_tape({vs[0], vs[k]});
        if (!same_shape(out, vs[k].val())) throw ShapeError("add_n: shape mismatch");
        const auto& d = vs[k].val().data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += d[i];
        rg = rg || vs[k].requires_grad();
        ids.push_back(vs[k].id);
        want.push_back(vs[k].requires_grad());
    }
    const int io = t.next_id();
    return t.node(std::move(out), rg, [ids, want, io](Tape& tp) {
        const auto& g = tp.grad(io).data;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!want[k]) continue;
            auto& d = tp.grad(ids[k]).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Var relu(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (auto& x : out.data) x = x > 0 ? x : 0.0;
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        const auto& x = tp.val(ia).data;
        auto& d = tp.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0) d[i] += g[i];
    });
}

inline Var gelu(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (auto& x : out.data) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        const auto& x = tp.val(ia).data;
        auto& d = tp.grad(ia).data;
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double phi = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
            d[i] += g[i] * (phi + x[i] * pdf);
        }
    });
}

inline Var logistic(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (auto& x : out.data) x = detail::sigmoid(x);
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        const auto& y = tp.val(io).data;
        auto& d = tp.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

// softmax over the last axis, numerically stable
inline Var softmax_last(Var a) {
    Tape& t = *a.tape;
    const auto& shape = a.val().shape;
    if (shape.empty()) throw ShapeError("softmax_last: scalar input");
    const std::int64_t n = shape.back();
    const std::int64_t rows = a.val().numel() / n;
    Tensor out = a.val();
    for (std::int64_t r = 0; r < rows; ++r) {
        double* p = out.data.data() + r * n;
        double mx = p[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, p[j]);
        double sum = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
        }
        for (std::int64_t j = 0; j < n; ++j) p[j] /= sum;
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        const auto& y = tp.val(io).data;
        auto& d = tp.grad(ia).data;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * n;
            const double* yr = y.data() + r * n;
            double* dr = d.data() + r * n;
            double dot = 0;
            for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            for (std::int64_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    detail::check_same_tape({a, b});
    const auto& as = a.val().shape;
    const auto& bs = b.val().shape;
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        throw ShapeError("matmul: incompatible shapes " + a.val().shape_str() + " x " +
                         b.val().shape_str());
    const std::int64_t M = as[0], K = as[1], N = bs[1];
    Tape& t = *a.tape;
    Tensor out({M, N});
    {
        CMapM A(a.val().data.data(), M, K), B(b.val().data.data(), K, N);
        MapM C(out.data.data(), M, N);
        C.noalias() = A * B;
    }
    const int ia = a.id, ib = b.id, io = t.next_id();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return t.node(std::move(out), ga || gb, [=](Tape& tp) {
        CMapM G(tp.grad(io).data.data(), M, N);
        if (ga) {
            CMapM B(tp.val(ib).data.data(), K, N);
            MapM GA(tp.grad(ia).data.data(), M, K);
            GA.noalias() += G * B.transpose();
        }
        if (gb) {
            CMapM A(tp.val(ia).data.data(), M, K);
            MapM GB(tp.grad(ib).data.data(), K, N);
            GB.noalias() += A.transpose() * G;
        }
    });
}

// y = x * w (+ bias per output column). x: (N,K), w: (K,M), bias: (M).
inline Var linear(Var x, Var w, Var bias) {
    detail::check_same_tape({x, w, bias});
    const auto& xs = x.val().shape;
    const auto& ws = w.val().shape;
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
        throw ShapeError("linear: incompatible shapes " + x.val().shape_str() + " x " +
                         w.val().shape_str());
    const std::int64_t N = xs[0], K = xs[1], M = ws[1];
    if (bias.val().numel() != M) throw ShapeError("linear: bias size mismatch");
    Tape& t = *x.tape;
    Tensor out({N, M});
    {
        CMapM X(x.val().data.data(), N, K), W(w.val().data.data(), K, M);
        MapM Y(out.data.data(), N, M);
        Y.noalias() = X * W;
        Eigen::Map<const Eigen::RowVectorXd> B(bias.val().data.data(), M);
        Y.rowwise() += B;
    }
    const int ix = x.id, iw = w.id, ib = bias.id, io = t.next_id();
    const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = bias.requires_grad();
    return t.node(std::move(out), gx || gw || gb, [=](Tape& tp) {
        CMapM G(tp.grad(io).data.data(), N, M);
        if (gx) {
            CMapM W(tp.val(iw).data.data(), K, M);
            MapM GX(tp.grad(ix).data.data(), N, K);
            GX.noalias() += G * W.transpose();
        }
        if (gw) {
            CMapM X(tp.val(ix).data.data(), N, K);
            MapM GW(tp.grad(iw).data.data(), K, M);
            GW.noalias() += X.transpose() * G;
        }
        if (gb) {
            Eigen::Map<Eigen::RowVectorXd> GB(tp.grad(ib).data.data(), M);
            GB += G.colwise().sum();
        }
    });
}

// batched matmul: a (B,M,K) x b (B,K,N) -> (B,M,N); with trans_b, b is
// (B,N,K) and the product is a * b^T.
inline Var bmm(Var a, Var b, bool trans_b = false) {
    detail::check_same_tape({a, b});
    const auto& as = a.val().shape;
    const auto& bs = b.val().shape;
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0])
        throw ShapeError("bmm: expects rank-3 tensors with equal batch");
    const std::int64_t B = as[0], M = as[1], K = as[2];
    const std::int64_t N = trans_b ? bs[1] : bs[2];
    const std::int64_t bk = trans_b ? bs[2] : bs[1];
    if (bk != K) throw ShapeError("bmm: inner dimension mismatch");
    Tape& t = *a.tape;
    Tensor out({B, M, N});
    for (std::int64_t i = 0; i < B; ++i) {
        CMapM A(a.val().data.data() + i * M * K, M, K);
        MapM C(out.data.data() + i * M * N, M, N);
        if (trans_b) {
            CMapM Bm(b.val().data.data() + i * N * K, N, K);
            C.noalias() = A * Bm.transpose();
        } else {
            CMapM Bm(b.val().data.data() + i * K * N, K, N);
            C.noalias() = A * Bm;
        }
    }
    const int ia = a.id, ib = b.id, io = t.next_id();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return t.node(std::move(out), ga || gb, [=](Tape& tp) {
        for (std::int64_t i = 0; i < B; ++i) {
            CMapM G(tp.grad(io).data.data() + i * M * N, M, N);
            if (trans_b) {
                if (ga) {
                    CMapM Bm(tp.val(ib).data.data() + i * N * K, N, K);
                    MapM GA(tp.grad(ia).data.data() + i * M * K, M, K);
                    GA.noalias() += G * Bm;
                }
                if (gb) {
                    CMapM A(tp.val(ia).data.data() + i * M * K, M, K);
                    MapM GB(tp.grad(ib).data.data() + i * N * K, N, K);
                    GB.noalias() += G.transpose() * A;
                }
            } else {
                if (ga) {
                    CMapM Bm(tp.val(ib).data.data() + i * K * N, K, N);
                    MapM GA(tp.grad(ia).data.data() + i * M * K, M, K);
                    GA.noalias() += G * Bm.transpose();
                }
                if (gb) {
                    CMapM A(tp.val(ia).data.data() + i * M * K, M, K);
                    MapM GB(tp.grad(ib).data.data() + i * K * N, K, N);
                    GB.noalias() += A.transpose() * G;
                }
            }
        }
    });
}

inline Var dot(Var a, Var b) {
    detail::check_same_tape({a, b});
    if (a.val().numel() != b.val().numel())
        throw ShapeError("dot: size mismatch");
    Tape& t = *a.tape;
    double s = 0;
    const auto& av = a.val().data;
    const auto& bv = b.val().data;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
    const int ia = a.id, ib = b.id, io = t.next_id();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return t.node(Tensor::scalar(s), ga || gb, [=](Tape& tp) {
        const double g = tp.grad(io).data[0];
        const auto& av2 = tp.val(ia).data;
        const auto& bv2 = tp.val(ib).data;
        if (ga) {
            auto& d = tp.grad(ia).data;
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * bv2[i];
        }
        if (gb) {
            auto& d = tp.grad(ib).data;
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * av2[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

// col is (Ci*kh*kw) x (Ho*Wo), row-major
inline void im2col(const double* x, std::int64_t Ci, std::int64_t H, std::int64_t W,
                   std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                   std::int64_t Ho, std::int64_t Wo, double* col) {
    const std::int64_t L = Ho * Wo;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < Ci; ++ci) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj, ++row) {
                double* dst = col + row * L;
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    const std::int64_t ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        for (std::int64_t ow = 0; ow < Wo; ++ow) *dst++ = 0.0;
                        continue;
                    }
                    const double* src = x + (ci * H + ih) * W;
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                        const std::int64_t iw = ow * stride - pad + kj;
                        *dst++ = (iw < 0 || iw >= W) ? 0.0 : src[iw];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* col, std::int64_t Ci, std::int64_t H, std::int64_t W,
                       std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                       std::int64_t Ho, std::int64_t Wo, double* x) {
    const std::int64_t L = Ho * Wo;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < Ci; ++ci) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj, ++row) {
                const double* src = col + row * L;
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    const std::int64_t ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        src += Wo;
                        continue;
                    }
                    double* dst = x + (ci * H + ih) * W;
                    for (std::int64_t ow = 0; ow < Wo; ++ow, ++src) {
                        const std::int64_t iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) dst[iw] += *src;
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: (N,Ci,H,W), w: (Co,Ci,kh,kw), bias: (Co) -> (N,Co,Ho,Wo)
inline Var conv2d(Var x, Var w, Var bias, std::int64_t stride, std::int64_t pad) {
    detail::check_same_tape({x, w, bias});
    const auto& xs = x.val().shape;
    const auto& ws = w.val().shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw ShapeError("conv2d: incompatible shapes " + x.val().shape_str() + " and " +
                         w.val().shape_str());
    if (stride < 1 || pad < 0) throw ValidationError("conv2d: bad stride/pad");
    const std::int64_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
    const std::int64_t Co = ws[0], kh = ws[2], kw = ws[3];
    if (bias.val().numel() != Co) throw ShapeError("conv2d: bias size mismatch");
    const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
    const std::int64_t K = Ci * kh * kw, L = Ho * Wo;

    Tape& t = *x.tape;
    const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = bias.requires_grad();
    const bool any_grad = gx || gw || gb;
    Tensor out({N, Co, Ho, Wo});
    // col blocks are cached per batch element when a backward pass will need
    // them; inference reuses a single scratch block
    auto cols = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>((any_grad ? N : 1) * K * L));
    {
        CMapM Wm(w.val().data.data(), Co, K);
        for (std::int64_t n = 0; n < N; ++n) {
            double* col = cols->data() + (any_grad ? n * K * L : 0);
            detail::im2col(x.val().data.data() + n * Ci * H * W, Ci, H, W, kh, kw, stride, pad,
                           Ho, Wo, col);
            CMapM Col(col, K, L);
            MapM Y(out.data.data() + n * Co * L, Co, L);
            Y.noalias() = Wm * Col;
            for (std::int64_t co = 0; co < Co; ++co)
                Y.row(co).array() += bias.val().data[static_cast<std::size_t>(co)];
        }
    }
    const int ix = x.id, iw = w.id, ib = bias.id, io = t.next_id();
    if (!any_grad) return t.node(std::move(out), false, nullptr);
    return t.node(std::move(out), true, [=](Tape& tp) {
        std::vector<double> colg;
        if (gx) colg.resize(static_cast<std::size_t>(K * L));
        for (std::int64_t n = 0; n < N; ++n) {
            CMapM G(tp.grad(io).data.data() + n * Co * L, Co, L);
            CMapM Col(cols->data() + n * K * L, K, L);
            if (gw) {
                MapM GW(tp.grad(iw).data.data(), Co, K);
                GW.noalias() += G * Col.transpose();
            }
            if (gb) {
                auto& d = tp.grad(ib).data;
                for (std::int64_t co = 0; co < Co; ++co) d[static_cast<std::size_t>(co)] += G.row(co).sum();
            }
            if (gx) {
                CMapM Wm(tp.val(iw).data.data(), Co, K);
                MapM CG(colg.data(), K, L);
                CG.noalias() = Wm.transpose() * G;
                detail::col2im_add(colg.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                                   tp.grad(ix).data.data() + n * Ci * H * W);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// LayerNorm over the last axis. x: (..., D); gamma, beta: (D).
inline Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    detail::check_same_tape({x, gamma, beta});
    const auto& xs = x.val().shape;
    if (xs.empty()) throw ShapeError("layernorm: scalar input");
    const std::int64_t D = xs.back();
    if (gamma.val().numel() != D || beta.val().numel() != D)
        throw ShapeError("layernorm: gamma/beta size mismatch");
    const std::int64_t R = x.val().numel() / D;

    Tape& t = *x.tape;
    Tensor out(xs);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R * D));
    auto istd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R));
    {
        const auto& xv = x.val().data;
        const auto& gv = gamma.val().data;
        const auto& bv = beta.val().data;
        for (std::int64_t r = 0; r < R; ++r) {
            const double* p = xv.data() + r * D;
            double mean = 0;
            for (std::int64_t j = 0; j < D; ++j) mean += p[j];
            mean /= static_cast<double>(D);
            double var = 0;
            for (std::int64_t j = 0; j < D; ++j) {
                const double c = p[j] - mean;
                var += c * c;
            }
            var /= static_cast<double>(D);
            const double is = 1.0 / std::sqrt(var + eps);
            (*istd)[static_cast<std::size_t>(r)] = is;
            double* xh = xhat->data() + r * D;
            double* o = out.data.data() + r * D;
            for (std::int64_t j = 0; j < D; ++j) {
                xh[j] = (p[j] - mean) * is;
                o[j] = gv[static_cast<std::size_t>(j)] * xh[j] + bv[static_cast<std::size_t>(j)];
            }
        }
    }
    const int ix = x.id, ig = gamma.id, ib = beta.id, io = t.next_id();
    const bool gx = x.requires_grad(), gg = gamma.requires_grad(), gb = beta.requires_grad();
    if (!(gx || gg || gb)) return t.node(std::move(out), false, nullptr);
    return t.node(std::move(out), true, [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        const auto& gv = tp.val(ig).data;
        for (std::int64_t r = 0; r < R; ++r) {
            const double* gr = g.data() + r * D;
            const double* xh = xhat->data() + r * D;
            if (gg) {
                auto& d = tp.grad(ig).data;
                for (std::int64_t j = 0; j < D; ++j) d[static_cast<std::size_t>(j)] += gr[j] * xh[j];
            }
            if (gb) {
                auto& d = tp.grad(ib).data;
                for (std::int64_t j = 0; j < D; ++j) d[static_cast<std::size_t>(j)] += gr[j];
            }
            if (gx) {
                double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                for (std::int64_t j = 0; j < D; ++j) {
                    const double dxh = gr[j] * gv[static_cast<std::size_t>(j)];
                    m1 += dxh;
                    m2 += dxh * xh[j];
                }
                m1 /= static_cast<double>(D);
                m2 /= static_cast<double>(D);
                const double is = (*istd)[static_cast<std::size_t>(r)];
                auto& d = tp.grad(ix).data;
                double* dr = d.data() + r * D;
                for (std::int64_t j = 0; j < D; ++j) {
                    const double dxh = gr[j] * gv[static_cast<std::size_t>(j)];
                    dr[j] += is * (dxh - m1 - xh[j] * m2);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Var reshape(Var a, std::vector<std::int64_t> shape) {
    Tape& t = *a.tape;
    if (Tensor::count(shape) != a.val().numel())
        throw ShapeError("reshape: element count mismatch " + a.val().shape_str());
    Tensor out(std::move(shape), a.val().data);
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

// out dim k corresponds to input dim perm[k]
inline Var permute(Var a, std::vector<int> perm) {
    Tape& t = *a.tape;
    const auto& in_shape = a.val().shape;
    const std::size_t rank = in_shape.size();
    if (perm.size() != rank) throw ShapeError("permute: rank mismatch");
    std::vector<bool> seen(rank, false);
    std::vector<std::int64_t> out_shape(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        const int p = perm[k];
        if (p < 0 || static_cast<std::size_t>(p) >= rank || seen[static_cast<std::size_t>(p)])
            throw ShapeError("permute: invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
        out_shape[k] = in_shape[static_cast<std::size_t>(p)];
    }
    const auto in_strides = detail::strides_of(in_shape);
    // stride to walk the input when advancing each output coordinate
    std::vector<std::int64_t> walk(rank);
    for (std::size_t k = 0; k < rank; ++k) walk[k] = in_strides[static_cast<std::size_t>(perm[k])];

    Tensor out(out_shape);
    const std::int64_t n = out.numel();
    {
        const auto& src = a.val().data;
        std::vector<std::int64_t> coord(rank, 0);
        std::int64_t in_idx = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            out.data[static_cast<std::size_t>(i)] = src[static_cast<std::size_t>(in_idx)];
            // odometer increment over output coords
            for (int k = static_cast<int>(rank) - 1; k >= 0; --k) {
                coord[static_cast<std::size_t>(k)]++;
                in_idx += walk[static_cast<std::size_t>(k)];
                if (coord[static_cast<std::size_t>(k)] < out_shape[static_cast<std::size_t>(k)]) break;
                in_idx -= walk[static_cast<std::size_t>(k)] * out_shape[static_cast<std::size_t>(k)];
                coord[static_cast<std::size_t>(k)] = 0;
            }
        }
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        std::vector<std::int64_t> coord(rank, 0);
        std::int64_t in_idx = 0;
        const std::int64_t total = static_cast<std::int64_t>(g.size());
        for (std::int64_t i = 0; i < total; ++i) {
            d[static_cast<std::size_t>(in_idx)] += g[static_cast<std::size_t>(i)];
            for (int k = static_cast<int>(rank) - 1; k >= 0; --k) {
                coord[static_cast<std::size_t>(k)]++;
                in_idx += walk[static_cast<std::size_t>(k)];
                if (coord[static_cast<std::size_t>(k)] < out_shape[static_cast<std::size_t>(k)]) break;
                in_idx -= walk[static_cast<std::size_t>(k)] * out_shape[static_cast<std::size_t>(k)];
                coord[static_cast<std::size_t>(k)] = 0;
            }
        }
    });
}

// cyclic roll of the H and W axes of (S,H,W,C): out[s][h][w] = in[s][h-dh][w-dw]
inline Var roll_hw(Var a, std::int64_t dh, std::int64_t dw) {
    Tape& t = *a.tape;
    const auto& s = a.val().shape;
    if (s.size() != 4) throw ShapeError("roll_hw: expects (S,H,W,C)");
    const std::int64_t S = s[0], H = s[1], W = s[2], C = s[3];
    auto wrap = [](std::int64_t v, std::int64_t m) { return ((v % m) + m) % m; };
    Tensor out(s);
    {
        const auto& src = a.val().data;
        for (std::int64_t b = 0; b < S; ++b)
            for (std::int64_t h = 0; h < H; ++h) {
                const std::int64_t sh = wrap(h - dh, H);
                for (std::int64_t w = 0; w < W; ++w) {
                    const std::int64_t sw = wrap(w - dw, W);
                    const double* sp = src.data() + ((b * H + sh) * W + sw) * C;
                    double* dp = out.data.data() + ((b * H + h) * W + w) * C;
                    for (std::int64_t c = 0; c < C; ++c) dp[c] = sp[c];
                }
            }
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        for (std::int64_t b = 0; b < S; ++b)
            for (std::int64_t h = 0; h < H; ++h) {
                const std::int64_t sh = wrap(h - dh, H);
                for (std::int64_t w = 0; w < W; ++w) {
                    const std::int64_t sw = wrap(w - dw, W);
                    double* dp = d.data() + ((b * H + sh) * W + sw) * C;
                    const double* gp = g.data() + ((b * H + h) * W + w) * C;
                    for (std::int64_t c = 0; c < C; ++c) dp[c] += gp[c];
                }
            }
    });
}

// every second row/col of (S,H,W,C) starting at (r0,c0) -> (S,H/2,W/2,C)
inline Var subsample_hw(Var a, std::int64_t r0, std::int64_t c0) {
    Tape& t = *a.tape;
    const auto& s = a.val().shape;
    if (s.size() != 4) throw ShapeError("subsample_hw: expects (S,H,W,C)");
    const std::int64_t S = s[0], H = s[1], W = s[2], C = s[3];
    if (H % 2 || W % 2) throw ShapeError("subsample_hw: H and W must be even");
    const std::int64_t Ho = H / 2, Wo = W / 2;
    Tensor out({S, Ho, Wo, C});
    {
        const auto& src = a.val().data;
        for (std::int64_t b = 0; b < S; ++b)
            for (std::int64_t i = 0; i < Ho; ++i)
                for (std::int64_t j = 0; j < Wo; ++j) {
                    const double* sp = src.data() + ((b * H + 2 * i + r0) * W + 2 * j + c0) * C;
                    double* dp = out.data.data() + ((b * Ho + i) * Wo + j) * C;
                    for (std::int64_t c = 0; c < C; ++c) dp[c] = sp[c];
                }
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        for (std::int64_t b = 0; b < S; ++b)
            for (std::int64_t i = 0; i < Ho; ++i)
                for (std::int64_t j = 0; j < Wo; ++j) {
                    double* dp = d.data() + ((b * H + 2 * i + r0) * W + 2 * j + c0) * C;
                    const double* gp = g.data() + ((b * Ho + i) * Wo + j) * C;
                    for (std::int64_t c = 0; c < C; ++c) dp[c] += gp[c];
                }
    });
}

inline Var narrow_last(Var a, std::int64_t start, std::int64_t len) {
    Tape& t = *a.tape;
    const auto& s = a.val().shape;
    if (s.empty()) throw ShapeError("narrow_last: scalar input");
    const std::int64_t L = s.back();
    if (start < 0 || len < 1 || start + len > L) throw ShapeError("narrow_last: bad range");
    const std::int64_t R = a.val().numel() / L;
    std::vector<std::int64_t> out_shape = s;
    out_shape.back() = len;
    Tensor out(out_shape);
    {
        const auto& src = a.val().data;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t j = 0; j < len; ++j)
                out.data[static_cast<std::size_t>(r * len + j)] =
                    src[static_cast<std::size_t>(r * L + start + j)];
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t j = 0; j < len; ++j)
                d[static_cast<std::size_t>(r * L + start + j)] +=
                    g[static_cast<std::size_t>(r * len + j)];
    });
}

inline Var concat_last(const std::vector<Var>& vs) {
    if (vs.empty()) throw ValidationError("concat_last: empty input");
    Tape& t = *vs[0].tape;
    const auto& s0 = vs[0].val().shape;
    std::int64_t total_last = 0;
    bool rg = false;
    for (const auto& v : vs) {
        detail::check_same_tape({vs[0], v});
        const auto& s = v.val().shape;
        if (s.size() != s0.size()) throw ShapeError("concat_last: rank mismatch");
        for (std::size_t k = 0; k + 1 < s.size(); ++k)
            if (s[k] != s0[k]) throw ShapeError("concat_last: leading dims differ");
        total_last += s.back();
        rg = rg || v.requires_grad();
    }
    std::vector<std::int64_t> out_shape = s0;
    out_shape.back() = total_last;
    const std::int64_t R = Tensor::count(out_shape) / total_last;
    Tensor out(out_shape);
    {
        std::int64_t off = 0;
        for (const auto& v : vs) {
            const std::int64_t L = v.val().shape.back();
            const auto& src = v.val().data;
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t j = 0; j < L; ++j)
                    out.data[static_cast<std::size_t>(r * total_last + off + j)] =
                        src[static_cast<std::size_t>(r * L + j)];
            off += L;
        }
    }
    std::vector<int> ids;
    std::vector<std::int64_t> lens;
    std::vector<bool> want;
    for (const auto& v : vs) {
        ids.push_back(v.id);
        lens.push_back(v.val().shape.back());
        want.push_back(v.requires_grad());
    }
    const int io = t.next_id();
    return t.node(std::move(out), rg, [ids, lens, want, R, total_last, io](Tape& tp) {
        const auto& g = tp.grad(io).data;
        std::int64_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::int64_t L = lens[k];
            if (want[k]) {
                auto& d = tp.grad(ids[k]).data;
                for (std::int64_t r = 0; r < R; ++r)
                    for (std::int64_t j = 0; j < L; ++j)
                        d[static_cast<std::size_t>(r * L + j)] +=
                            g[static_cast<std::size_t>(r * total_last + off + j)];
            }
            off += L;
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

// element-wise max over the rows of (S,D) -> (D); gradient routes to the
// first attaining row
inline Var colmax(Var a) {
    Tape& t = *a.tape;
    const auto& s = a.val().shape;
    if (s.size() != 2) throw ShapeError("colmax: expects (S,D)");
    const std::int64_t S = s[0], D = s[1];
    if (S < 1) throw ShapeError("colmax: empty row axis");
    Tensor out({D});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(D), 0);
    {
        const auto& src = a.val().data;
        for (std::int64_t j = 0; j < D; ++j) {
            double best = src[static_cast<std::size_t>(j)];
            std::int64_t arg = 0;
            for (std::int64_t r = 1; r < S; ++r) {
                const double v = src[static_cast<std::size_t>(r * D + j)];
                if (v > best) {
                    best = v;
                    arg = r;
                }
            }
            out.data[static_cast<std::size_t>(j)] = best;
            (*argmax)[static_cast<std::size_t>(j)] = arg;
        }
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        for (std::int64_t j = 0; j < D; ++j)
            d[static_cast<std::size_t>((*argmax)[static_cast<std::size_t>(j)] * D + j)] +=
                g[static_cast<std::size_t>(j)];
    });
}

inline Var mean_rows(Var a) {
    Tape& t = *a.tape;
    const auto& s = a.val().shape;
    if (s.size() != 2) throw ShapeError("mean_rows: expects (R,D)");
    const std::int64_t R = s[0], D = s[1];
    Tensor out({D});
    {
        const auto& src = a.val().data;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t j = 0; j < D; ++j)
                out.data[static_cast<std::size_t>(j)] += src[static_cast<std::size_t>(r * D + j)];
        for (auto& v : out.data) v /= static_cast<double>(R);
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        const double inv = 1.0 / static_cast<double>(R);
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t j = 0; j < D; ++j)
                d[static_cast<std::size_t>(r * D + j)] += g[static_cast<std::size_t>(j)] * inv;
    });
}

// global average pool: (N,C,H,W) -> (N,C)
inline Var gap_nchw(Var a) {
    Tape& t = *a.tape;
    const auto& s = a.val().shape;
    if (s.size() != 4) throw ShapeError("gap_nchw: expects (N,C,H,W)");
    const std::int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({N, C});
    {
        const auto& src = a.val().data;
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const double* p = src.data() + (n * C + c) * HW;
                double sum = 0;
                for (std::int64_t i = 0; i < HW; ++i) sum += p[i];
                out.data[static_cast<std::size_t>(n * C + c)] = sum / static_cast<double>(HW);
            }
    }
    const int ia = a.id, io = t.next_id();
    return t.node(std::move(out), a.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(ia).data;
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const double gv = g[static_cast<std::size_t>(n * C + c)] * inv;
                double* p = d.data() + (n * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) p[i] += gv;
            }
    });
}

// ---------------------------------------------------------------------------
// Broadcast add and gather
// ---------------------------------------------------------------------------

// a + broadcast(b): b's shape is right-aligned against a's; each of b's dims
// must equal a's or be 1.
inline Var add_bcast(Var a, Var b) {
    detail::check_same_tape({a, b});
    Tape& t = *a.tape;
    const auto& as = a.val().shape;
    const auto bs_in = b.val().shape;
    if (bs_in.size() > as.size()) throw ShapeError("add_bcast: b has higher rank than a");
    std::vector<std::int64_t> bs(as.size(), 1);
    for (std::size_t k = 0; k < bs_in.size(); ++k)
        bs[as.size() - bs_in.size() + k] = bs_in[k];
    for (std::size_t k = 0; k < as.size(); ++k)
        if (bs[k] != 1 && bs[k] != as[k])
            throw ShapeError("add_bcast: incompatible shapes " + a.val().shape_str() + " vs " +
                             b.val().shape_str());
    const auto b_strides_full = detail::strides_of(bs);
    std::vector<std::int64_t> bstride(as.size());
    for (std::size_t k = 0; k < as.size(); ++k) bstride[k] = bs[k] == 1 ? 0 : b_strides_full[k];

    const std::size_t rank = as.size();
    Tensor out = a.val();
    {
        const auto& bd = b.val().data;
        std::vector<std::int64_t> coord(rank, 0);
        std::int64_t bidx = 0;
        const std::int64_t n = out.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            out.data[static_cast<std::size_t>(i)] += bd[static_cast<std::size_t>(bidx)];
            for (int k = static_cast<int>(rank) - 1; k >= 0; --k) {
                coord[static_cast<std::size_t>(k)]++;
                bidx += bstride[static_cast<std::size_t>(k)];
                if (coord[static_cast<std::size_t>(k)] < as[static_cast<std::size_t>(k)]) break;
                bidx -= bstride[static_cast<std::size_t>(k)] * as[static_cast<std::size_t>(k)];
                coord[static_cast<std::size_t>(k)] = 0;
            }
        }
    }
    const int ia = a.id, ib = b.id, io = t.next_id();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    const auto a_shape = as;
    return t.node(std::move(out), ga || gb, [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        if (ga) {
            auto& d = tp.grad(ia).data;
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (gb) {
            auto& d = tp.grad(ib).data;
            std::vector<std::int64_t> coord(rank, 0);
            std::int64_t bidx = 0;
            const std::int64_t n = static_cast<std::int64_t>(g.size());
            for (std::int64_t i = 0; i < n; ++i) {
                d[static_cast<std::size_t>(bidx)] += g[static_cast<std::size_t>(i)];
                for (int k = static_cast<int>(rank) - 1; k >= 0; --k) {
                    coord[static_cast<std::size_t>(k)]++;
                    bidx += bstride[static_cast<std::size_t>(k)];
                    if (coord[static_cast<std::size_t>(k)] < a_shape[static_cast<std::size_t>(k)]) break;
                    bidx -= bstride[static_cast<std::size_t>(k)] * a_shape[static_cast<std::size_t>(k)];
                    coord[static_cast<std::size_t>(k)] = 0;
                }
            }
        }
    });
}

// table: (R,C), indices into its rows -> (K,C)
inline Var gather_rows(Var table, std::shared_ptr<const std::vector<std::int64_t>> indices) {
    Tape& t = *table.tape;
    const auto& s = table.val().shape;
    if (s.size() != 2) throw ShapeError("gather_rows: table must be (R,C)");
    const std::int64_t R = s[0], C = s[1];
    const std::int64_t K = static_cast<std::int64_t>(indices->size());
    Tensor out({K, C});
    {
        const auto& src = table.val().data;
        for (std::int64_t k = 0; k < K; ++k) {
            const std::int64_t r = (*indices)[static_cast<std::size_t>(k)];
            if (r < 0 || r >= R) throw ShapeError("gather_rows: index out of range");
            for (std::int64_t c = 0; c < C; ++c)
                out.data[static_cast<std::size_t>(k * C + c)] =
                    src[static_cast<std::size_t>(r * C + c)];
        }
    }
    const int it = table.id, io = t.next_id();
    return t.node(std::move(out), table.requires_grad(), [=](Tape& tp) {
        const auto& g = tp.grad(io).data;
        auto& d = tp.grad(it).data;
        for (std::int64_t k = 0; k < K; ++k) {
            const std::int64_t r = (*indices)[static_cast<std::size_t>(k)];
            for (std::int64_t c = 0; c < C; ++c)
                d[static_cast<std::size_t>(r * C + c)] += g[static_cast<std::size_t>(k * C + c)];
        }
    });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Class-weighted binary cross-entropy from the logit (overflow-safe):
//   label=1: pos_weight * log(1 + e^{-z});  label=0: log(1 + e^{z})
inline Var bce_with_logits(Var logit, int label, double pos_weight) {
    if (logit.val().numel() != 1) throw ShapeError("bce_with_logits: logit must be scalar");
    if (label != 0 && label != 1) throw ValidationError("bce_with_logits: label must be 0 or 1");
    if (!(pos_weight > 0) || !std::isfinite(pos_weight))
        throw ValidationError("bce_with_logits: pos_weight must be positive and finite");
    Tape& t = *logit.tape;
    const double z = logit.val().data[0];
    const double loss = label == 1 ? pos_weight * detail::softplus(-z) : detail::softplus(z);
    const int iz = logit.id, io = t.next_id();
    return t.node(Tensor::scalar(loss), logit.requires_grad(), [=](Tape& tp) {
        const double g = tp.grad(io).data[0];
        const double zz = tp.val(iz).data[0];
        const double p = detail::sigmoid(zz);
        tp.grad(iz).data[0] += g * (label == 1 ? pos_weight * (p - 1.0) : p);
    });
}

}  // namespace slicewise::nn

#pragma once

// Adaptive-moment optimizer (Adam) over a ParamSet. State is keyed by the
// set's insertion order; a parameter that received no gradient this step is
// updated with a zero gradient so moment decay stays uniform.

#include <cmath>
#include <cstdint>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/nn/autograd.hpp"
#include "slicewise/nn/params.hpp"

namespace slicewise::nn {

class Adam {
public:
    struct Config {
        double lr = 1e-5;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(const ParamSet& ps, Config cfg) : cfg_(cfg) {
        if (!(cfg.lr > 0)) throw ValidationError("Adam: learning rate must be positive");
        m_.reserve(ps.size());
        v_.reserve(ps.size());
        for (const auto& [name, t] : ps.items()) {
            m_.emplace_back(t.data.size(), 0.0);
            v_.emplace_back(t.data.size(), 0.0);
        }
    }

    // applies one update from the gradients accumulated on the tape
    void step(ParamSet& ps, Tape& tape, const BoundParams& bp) {
        if (bp.vars.size() != m_.size())
            throw ValidationError("Adam: bound parameter count does not match optimizer state");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < bp.vars.size(); ++i) {
            auto& p = ps.items()[i].second.data;
            auto& m = m_[i];
            auto& v = v_[i];
            const int id = bp.vars[i].id;
            const bool live = tape.grad_live(id);
            const std::vector<double>* g = live ? &tape.grad(id).data : nullptr;
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double gk = g ? (*g)[k] : 0.0;
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                p[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::int64_t steps_taken() const { return t_; }

private:
    Config cfg_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace slicewise::nn

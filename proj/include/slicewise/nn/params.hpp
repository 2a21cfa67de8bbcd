#pragma once

// Named parameter registry. Insertion order is the canonical order for
// serialization and optimizer state, so two models built from the same
// config always agree on it.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/nn/autograd.hpp"
#include "slicewise/nn/tensor.hpp"

namespace slicewise::nn {

class ParamSet {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
        index_.emplace(name, items_.size());
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter name: " + name);
        return items_[it->second].second;
    }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter name: " + name);
        return items_[it->second].second;
    }

    std::size_t size() const { return items_.size(); }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Parameters pushed onto a tape as leaves, addressable by name. Values are
// copied onto the tape; after backward() the gradients live there too.
struct BoundParams {
    std::vector<Var> vars;  // same order as the ParamSet
    std::unordered_map<std::string, std::size_t> index;

    Var at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw ValidationError("unknown parameter name: " + name);
        return vars[it->second];
    }
};

inline BoundParams bind_params(Tape& t, const ParamSet& ps, bool requires_grad) {
    BoundParams bp;
    for (std::size_t i = 0; i < ps.items().size(); ++i) {
        bp.index.emplace(ps.items()[i].first, i);
        bp.vars.push_back(t.leaf(ps.items()[i].second, requires_grad));
    }
    return bp;
}

// ---------------------------------------------------------------------------
// Initializers. Each parameter gets its own stream keyed by name, so adding
// or reordering parameters never perturbs the others.
// ---------------------------------------------------------------------------

inline void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (auto& x : t.data) x = rng.normal() * stddev;
}

// normal(0, stddev) resampled until within 2 stddev, as used by vision
// transformer inits
inline void fill_trunc_normal(Tensor& t, Rng& rng, double stddev) {
    for (auto& x : t.data) {
        double v = rng.normal();
        while (std::abs(v) > 2.0) v = rng.normal();
        x = v * stddev;
    }
}

inline void fill_he_normal(Tensor& t, Rng& rng, std::int64_t fan_in) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    fill_normal(t, rng, stddev);
}

}  // namespace slicewise::nn

#pragma once

// Shared vocabulary for the whole library: acquisition enums, error types,
// deterministic RNG streams, and small numeric helpers.

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "slicewise assumes a little-endian host");

namespace slicewise {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Base for everything thrown by the library. exit_code() is what the CLI
// maps a failure to: 1 = validation/config problem, 2 = runtime failure.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
    virtual int exit_code() const { return 1; }
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 2; }
};

class FormatError : public Error { public: using Error::Error; };
class TruncationError : public Error { public: using Error::Error; };
class ValidationError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class ShapeError : public Error { public: using Error::Error; };
class StratificationError : public Error { public: using Error::Error; };
class MissingStatsError : public Error { public: using Error::Error; };
class CheckpointError : public Error { public: using Error::Error; };
class ClassImbalanceError : public Error { public: using Error::Error; };
class CalibrationError : public Error { public: using Error::Error; };
class UndefinedRateError : public Error { public: using Error::Error; };
class UndefinedKappaError : public Error { public: using Error::Error; };
class BootstrapError : public Error { public: using Error::Error; };
class AssumptionError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };
class PrerequisiteError : public Error { public: using Error::Error; };

// ---------------------------------------------------------------------------
// Acquisition metadata enums
// ---------------------------------------------------------------------------

enum class View { sagittal, axial, coronal };
enum class SequenceType { T1, T2, PD, MERGE, STIR };
enum class Modality { standard, arthrogram };
enum class Side { left, right };
enum class Label { no_tear, tear };
enum class Split { train, val, test, unassigned };

inline std::string to_string(View v) {
    switch (v) {
        case View::sagittal: return "sagittal";
        case View::axial: return "axial";
        case View::coronal: return "coronal";
    }
    throw ValidationError("invalid View value");
}

inline std::string to_string(SequenceType s) {
    switch (s) {
        case SequenceType::T1: return "T1";
        case SequenceType::T2: return "T2";
        case SequenceType::PD: return "PD";
        case SequenceType::MERGE: return "MERGE";
        case SequenceType::STIR: return "STIR";
    }
    throw ValidationError("invalid SequenceType value");
}

inline std::string to_string(Modality m) {
    return m == Modality::standard ? "standard" : "arthrogram";
}

inline std::string to_string(Side s) {
    return s == Side::left ? "left" : "right";
}

inline std::string to_string(Label l) {
    return l == Label::tear ? "tear" : "no_tear";
}

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    throw ValidationError("invalid Split value");
}

inline View parse_view(std::string_view s) {
    if (s == "sagittal") return View::sagittal;
    if (s == "axial") return View::axial;
    if (s == "coronal") return View::coronal;
    throw FormatError("unknown view '" + std::string(s) +
                      "' (expected sagittal, axial, or coronal)");
}

inline SequenceType parse_sequence_type(std::string_view s) {
    if (s == "T1") return SequenceType::T1;
    if (s == "T2") return SequenceType::T2;
    if (s == "PD") return SequenceType::PD;
    if (s == "MERGE") return SequenceType::MERGE;
    if (s == "STIR") return SequenceType::STIR;
    throw FormatError("unknown sequence_type '" + std::string(s) + "'");
}

inline Modality parse_modality(std::string_view s) {
    if (s == "standard") return Modality::standard;
    if (s == "arthrogram") return Modality::arthrogram;
    throw FormatError("unknown modality '" + std::string(s) + "'");
}

inline Side parse_side(std::string_view s) {
    if (s == "left") return Side::left;
    if (s == "right") return Side::right;
    throw FormatError("unknown side '" + std::string(s) + "'");
}

inline Label parse_label(std::string_view s) {
    if (s == "tear") return Label::tear;
    if (s == "no_tear") return Label::no_tear;
    throw FormatError("unknown label '" + std::string(s) + "'");
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw FormatError("unknown split '" + std::string(s) + "'");
}

inline bool parse_bool(std::string_view s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw FormatError("expected boolean, got '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Hashing (provenance / run manifests, not cryptographic)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// All randomness in the library flows through these streams so results are
// bit-reproducible for a fixed seed on any platform. Stream seeds are derived
// by mixing a base seed with context strings/indices, so independent stages
// (per study, per bootstrap iteration, per epoch) never share a stream.
// ---------------------------------------------------------------------------

struct SplitMix64 {
    std::uint64_t state;
    explicit SplitMix64(std::uint64_t s) : state(s) {}
    std::uint64_t next() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
};

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
    SplitMix64 sm(base ^ (salt + 0x9e3779b97f4a7c15ULL));
    sm.next();
    return sm.next();
}

inline std::uint64_t mix_seed(std::uint64_t base, std::string_view salt) {
    return mix_seed(base, fnv1a64(salt));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& w : s_) w = sm.next();
        if (s_[0] == 0 && s_[1] == 0 && s_[2] == 0 && s_[3] == 0) s_[0] = 1;
    }

    // xoshiro256++
    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1) with 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ValidationError("Rng::below(0)");
        std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal via Marsaglia polar (no libm trig, fully deterministic)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Numeric helpers
// ---------------------------------------------------------------------------

// Kahan-compensated accumulator; the sum is independent of how the input was
// batched to well below 1e-9 relative error.
struct KahanSum {
    double sum = 0.0;
    double c = 0.0;
    void add(double x) {
        double y = x - c;
        double t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    double value() const { return sum; }
};

inline double clampd(double x, double lo, double hi) {
    return x < lo ? lo : (x > hi ? hi : x);
}

}  // namespace slicewise

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "c2fdft/tensor.hpp"

namespace c2fdft {

// Deterministic random source. The raw mt19937_64 sequence is pinned by the
// standard; the distributions are hand-rolled here because the std ones are
// implementation-defined and their hidden state cannot be checkpointed.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo + 1));
    }

    // standard normal via Box-Muller; the spare value is explicit state so
    // save/load reproduces the stream exactly
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0, u2 = 0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(normal());
    }

    template <typename T>
    Tensor<T> normal_tensor(Shape shape) {
        Tensor<T> t(std::move(shape));
        fill_normal(t);
        return t;
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

    uint64_t raw() { return engine_(); }

    // Derive an independent stream (worker/image substreams).
    static uint64_t mix(uint64_t seed, uint64_t index) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::string save_state() const {
        std::ostringstream os;
        os << engine_ << " " << (has_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << spare_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        int spare_flag = 0;
        is >> engine_ >> spare_flag >> spare_;
        require(!is.fail(), "malformed rng state");
        has_spare_ = spare_flag != 0;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace c2fdft

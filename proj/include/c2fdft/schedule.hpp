#pragma once

#include <span>
#include <vector>

#include "c2fdft/tensor.hpp"

namespace c2fdft {

// Variance schedule of the forward diffusion process. Arrays are kept in
// double precision: the terminal cumulative product is ~1e-5 and single
// precision running products drift. Storage is 0-based, the math-level
// timestep t in [1, T] is translated at every accessor.
struct DiffusionSchedule {
    int T = 0;
    double beta_1 = 0, beta_T = 0;  // endpoints, enough to reconstruct
    std::vector<double> beta;       // beta[t-1] = beta_t
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // running product of alpha

    double beta_at(int t) const {
        require(t >= 1 && t <= T, "timestep out of range [1,T]");
        return beta[static_cast<size_t>(t - 1)];
    }
    double alpha_at(int t) const {
        require(t >= 1 && t <= T, "timestep out of range [1,T]");
        return alpha[static_cast<size_t>(t - 1)];
    }
    // defined for t in [0, T]; alpha_bar(0) = 1 so the sampling endpoint is exact
    double alpha_bar_at(int t) const {
        require(t >= 0 && t <= T, "timestep out of range [0,T]");
        return t == 0 ? 1.0 : alpha_bar[static_cast<size_t>(t - 1)];
    }
};

inline DiffusionSchedule make_schedule(int T, double beta_1, double beta_T) {
    require(T >= 1, "make_schedule: T must be positive");
    require(beta_1 > 0 && beta_T < 1 && beta_1 <= beta_T,
            "make_schedule: betas must satisfy 0 < beta_1 <= beta_T < 1");
    DiffusionSchedule s;
    s.T = T;
    s.beta_1 = beta_1;
    s.beta_T = beta_T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double b = T == 1 ? beta_1
                                : beta_1 + (beta_T - beta_1) * static_cast<double>(i) /
                                               static_cast<double>(T - 1);
        s.beta[static_cast<size_t>(i)] = b;
        s.alpha[static_cast<size_t>(i)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(i)] = prod;
    }
    return s;
}

// One forward-chain step: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps
template <typename T>
Tensor<T> q_step(const Tensor<T>& x_prev, int t, const Tensor<T>& eps,
                 const DiffusionSchedule& sched) {
    require(x_prev.same_shape(eps), "q_step: shape mismatch");
    const double b = sched.beta_at(t);
    const T ca = static_cast<T>(std::sqrt(1.0 - b));
    const T cb = static_cast<T>(std::sqrt(b));
    Tensor<T> out(x_prev.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = ca * x_prev[i] + cb * eps[i];
    return out;
}

template <typename T>
struct NoisySample {
    Tensor<T> x_t;
    std::vector<int> t;  // per-sample timestep
    Tensor<T> eps;
};

// Closed-form jump to timestep t: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
// t is per-sample over the batch axis.
template <typename T>
NoisySample<T> q_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps,
                        const DiffusionSchedule& sched) {
    require(x0.same_shape(eps), "q_sample: shape mismatch");
    require(x0.rank() == 4, "q_sample: rank-4 input required");
    require(static_cast<int64_t>(t.size()) == x0.dim(0), "q_sample: one timestep per sample");
    NoisySample<T> out;
    out.x_t = Tensor<T>(x0.shape());
    out.t.assign(t.begin(), t.end());
    out.eps = eps;
    const int64_t per = x0.numel() / x0.dim(0);
    for (int64_t b = 0; b < x0.dim(0); ++b) {
        const double abar = sched.alpha_bar_at(t[static_cast<size_t>(b)]);
        require(t[static_cast<size_t>(b)] >= 1, "q_sample: timestep out of range [1,T]");
        const T cs = static_cast<T>(std::sqrt(abar));
        const T cn = static_cast<T>(std::sqrt(1.0 - abar));
        for (int64_t i = b * per; i < (b + 1) * per; ++i)
            out.x_t[i] = cs * x0[i] + cn * eps[i];
    }
    return out;
}

template <typename T>
NoisySample<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                        const DiffusionSchedule& sched) {
    std::vector<int> ts(static_cast<size_t>(x0.dim(0)), t);
    return q_sample(x0, std::span<const int>(ts), eps, sched);
}

}  // namespace c2fdft

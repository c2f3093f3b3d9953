#pragma once

#include <functional>
#include <optional>

#include "c2fdft/ops.hpp"
#include "c2fdft/rng.hpp"
#include "c2fdft/schedule.hpp"

namespace c2fdft {

// Implicit-sampling timestep grid: S entries t_S > ... > t_1 = 1 plus the
// t_0 = 0 terminal convention. The generating formula lands on T+1 at j = S,
// which is clamped to T.
struct SamplerPlan {
    int S = 0;
    int T = 0;
    std::vector<int> grid;  // grid[0] = t_S, ..., grid[S-1] = t_1

    // timestep the step from grid[idx] lands on (t_0 = 0 at the end)
    int t_after(size_t idx) const {
        return idx + 1 < grid.size() ? grid[idx + 1] : 0;
    }
};

inline SamplerPlan timestep_grid(int S, int T) {
    require(S >= 2, "timestep_grid: S must be >= 2 (the grid formula divides by S-1)");
    require(S <= T, "timestep_grid: S must not exceed T");
    SamplerPlan p;
    p.S = S;
    p.T = T;
    for (int j = S; j >= 1; --j) {
        int64_t t = static_cast<int64_t>(j - 1) * T / (S - 1) + 1;
        if (t > T) t = T;
        p.grid.push_back(static_cast<int>(t));
    }
    for (size_t i = 1; i < p.grid.size(); ++i)
        require(p.grid[i] < p.grid[i - 1], "timestep_grid: grid not strictly decreasing");
    require(p.grid.back() == 1, "timestep_grid: grid must end at 1");
    return p;
}

// One implicit step t_j -> t_{j-1}: recover x0_hat from the noise estimate,
// re-noise to the smaller timestep. Differentiable in x and eps_hat.
template <typename T>
Var<T> implicit_step(const Var<T>& x, const Var<T>& eps_hat, int t_j, int t_jm1,
                     const DiffusionSchedule& sched) {
    require(t_j > t_jm1 && t_jm1 >= 0, "implicit_step: need t_j > t_{j-1} >= 0");
    require(t_j <= sched.T, "implicit_step: t_j exceeds schedule length");
    const double abar_j = sched.alpha_bar_at(t_j);
    const double abar_m = sched.alpha_bar_at(t_jm1);
    Var<T> x0 = scale(sub(x, scale(eps_hat, std::sqrt(1.0 - abar_j))), 1.0 / std::sqrt(abar_j));
    if (t_jm1 == 0) return x0;  // alpha_bar(0) = 1: the step returns x0_hat exactly
    return add(scale(x0, std::sqrt(abar_m)), scale(eps_hat, std::sqrt(1.0 - abar_m)));
}

template <typename T>
Tensor<T> implicit_step(const Tensor<T>& x, const Tensor<T>& eps_hat, int t_j, int t_jm1,
                        const DiffusionSchedule& sched) {
    NoGradGuard guard;
    return implicit_step(Var<T>(x), Var<T>(eps_hat), t_j, t_jm1, sched).value();
}

// Ancestral (DDPM) posterior-mean step, reference/diagnostic path only.
// z must be zero at t = 1.
template <typename T>
Var<T> ancestral_step(const Var<T>& x, const Var<T>& eps_hat, int t, const Var<T>& z,
                      const DiffusionSchedule& sched) {
    require(t >= 1 && t <= sched.T, "ancestral_step: t out of range");
    if (t == 1)
        for (int64_t i = 0; i < z.numel(); ++i)
            require(z.value()[i] == T(0), "ancestral_step: z must be zero at t = 1");
    const double a_t = sched.alpha_at(t);
    const double abar_t = sched.alpha_bar_at(t);
    const double b_t = sched.beta_at(t);
    Var<T> mu = scale(sub(x, scale(eps_hat, (1.0 - a_t) / std::sqrt(1.0 - abar_t))),
                      1.0 / std::sqrt(a_t));
    return add(mu, scale(z, std::sqrt(b_t)));
}

// Full restoration chain: x_{t_S} ~ N(0, I) from the seeded generator, then S
// implicit steps conditioned on y. With track_gradients the entire chain stays
// differentiable (the fine-training path); without it no history is recorded.
// step_sink, when set, receives each intermediate (step index from S-1 down to
// 0, the timestep landed on, and the image).
template <typename T, typename Predictor>
Var<T> sample_restore(Predictor&& predictor, const Tensor<T>& y, const SamplerPlan& plan,
                      const DiffusionSchedule& sched, uint64_t seed, bool track_gradients,
                      const std::function<void(int, int, const Tensor<T>&)>& step_sink = {}) {
    require(y.rank() == 4, "sample_restore: y must be (B,3,H,W)");
    require(y.dim(2) % 8 == 0 && y.dim(3) % 8 == 0,
            "sample_restore: H and W must be divisible by 8");
    require(plan.S >= 2 && static_cast<int>(plan.grid.size()) == plan.S,
            "sample_restore: invalid plan");
    require(plan.T == sched.T, "sample_restore: plan and schedule disagree on T");
    Rng rng(seed);
    Tensor<T> x_init = rng.normal_tensor<T>(y.shape());

    std::optional<NoGradGuard> guard;
    if (!track_gradients) guard.emplace();
    Var<T> x(std::move(x_init));
    Var<T> yv(y);
    for (size_t idx = 0; idx < plan.grid.size(); ++idx) {
        const int t_j = plan.grid[idx];
        const int t_jm1 = plan.t_after(idx);
        Var<T> eps_hat = predictor(x, yv, t_j);
        require(eps_hat.value().same_shape(y), "sample_restore: predictor shape mismatch");
        x = implicit_step(x, eps_hat, t_j, t_jm1, sched);
        if (step_sink) step_sink(static_cast<int>(plan.grid.size() - 1 - idx), t_jm1, x.value());
    }
    return x;
}

}  // namespace c2fdft

#pragma once

#include <sstream>

#include "c2fdft/data.hpp"
#include "c2fdft/dft.hpp"
#include "c2fdft/metrics.hpp"
#include "c2fdft/sampler.hpp"
#include "c2fdft/schedule.hpp"

namespace c2fdft {

struct PatchCycleSchedule {
    std::vector<std::pair<int, int>> entries;  // (patch size, batch size)
    int64_t period = 10000;                    // iterations per entry

    void validate() const {
        require(!entries.empty(), "train: patch cycle must not be empty");
        require(period > 0, "train: patch cycle period must be positive");
        for (const auto& [p, b] : entries) {
            require(p > 0 && p % 8 == 0, "train: patch sizes must be positive multiples of 8");
            require(b > 0, "train: batch sizes must be positive");
        }
    }
};

inline std::pair<int, int> patch_cycle_at(int64_t iter, const PatchCycleSchedule& s) {
    require(iter >= 0, "patch_cycle_at: negative iteration");
    s.validate();
    return s.entries[static_cast<size_t>((iter / s.period) %
                                         static_cast<int64_t>(s.entries.size()))];
}

enum class TrainStage { kCoarse, kFine };

inline std::string to_string(TrainStage s) { return s == TrainStage::kCoarse ? "coarse" : "fine"; }

inline TrainStage stage_from_string(const std::string& s) {
    if (s == "coarse") return TrainStage::kCoarse;
    if (s == "fine") return TrainStage::kFine;
    fail("unknown training stage: " + s + " (expected coarse|fine)");
}

struct TrainPlan {
    TrainStage stage = TrainStage::kCoarse;
    int64_t total_iters = 270000;
    double lr_start = 3e-4;
    double lr_end = 1e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double weight_decay = 0.0;
    PatchCycleSchedule patch_cycle{{{32, 360}, {64, 96}, {128, 24}}, 10000};
    double lambda_ssim = 0.84;  // fine stage
    int sample_steps = 4;       // fine stage
    double grad_clip = 1.0;     // fine stage, global norm
    bool augment = true;
    uint64_t seed = 0;

    void validate() const {
        require(total_iters > 0, "train: total_iters must be positive");
        require(lr_start >= lr_end && lr_end > 0, "train: need lr_start >= lr_end > 0");
        require(lambda_ssim >= 0 && lambda_ssim <= 1, "train: lambda_ssim must be in [0,1]");
        if (stage == TrainStage::kFine)
            require(sample_steps >= 2, "train: fine stage needs sample_steps >= 2");
        patch_cycle.validate();
    }
};

// Cosine annealing from lr_start (iter 0) to lr_end (iter total_iters).
inline double lr_at(int64_t iter, const TrainPlan& plan) {
    require(iter >= 0 && iter <= plan.total_iters, "lr_at: iteration out of range");
    const double c = std::cos(3.14159265358979323846 * static_cast<double>(iter) /
                              static_cast<double>(plan.total_iters));
    return plan.lr_end + 0.5 * (plan.lr_start - plan.lr_end) * (1.0 + c);
}

// Coarse objective: mean absolute error between drawn and estimated noise.
template <typename T>
Var<T> coarse_loss(const Var<T>& eps, const Var<T>& eps_hat) {
    return l1_loss(eps, eps_hat);
}

// Fine objective: lambda (1 - SSIM) + (1 - lambda) L1 against ground truth.
// The SSIM window shrinks below 11 only when the patch itself is smaller.
template <typename T>
Var<T> fine_loss(const Var<T>& x_t0, const Var<T>& x, double lambda) {
    require(lambda >= 0 && lambda <= 1, "fine_loss: lambda must be in [0,1]");
    require(x_t0.value().same_shape(x.value()), "fine_loss: shape mismatch");
    const auto& s = x.shape();
    const int win = ssim_window_for(s[2], s[3]);
    Var<T> ssim_term = affine(ssim_var(x_t0, x, win), -1.0, 1.0);
    Var<T> l1_term = l1_loss(x_t0, x);
    return add(scale(ssim_term, lambda), scale(l1_term, 1.0 - lambda));
}

template <typename T>
double global_grad_norm(const ParamStore<T>& params) {
    double acc = 0;
    for (const auto& [name, p] : params.items())
        if (!p.grad().empty())
            for (int64_t i = 0; i < p.grad().numel(); ++i)
                acc += static_cast<double>(p.grad()[i]) * static_cast<double>(p.grad()[i]);
    return std::sqrt(acc);
}

template <typename T>
void clip_grad_norm(ParamStore<T>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm <= max_norm || norm == 0.0) return;
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : params.items())
        if (!p.grad().empty()) p.grad_buffer() *= s;
}

// AdamW with bias correction. Slot order follows the parameter registry, so
// optimizer state serializes by parameter name.
template <typename T>
class AdamW {
public:
    AdamW(ParamStore<T>& params, double beta1 = 0.9, double beta2 = 0.999,
          double weight_decay = 0.0, double eps = 1e-8)
        : params_(params), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {
        for (const auto& [name, p] : params.items()) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }

    void step(double lr) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
        auto& items = params_.items();
        for (size_t k = 0; k < items.size(); ++k) {
            auto& p = items[k].second;
            const Tensor<T>& g = p.grad();
            Tensor<T>& val = p.value();
            for (int64_t i = 0; i < val.numel(); ++i) {
                const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
                double m = beta1_ * static_cast<double>(m_[k][i]) + (1.0 - beta1_) * gi;
                double v = beta2_ * static_cast<double>(v_[k][i]) + (1.0 - beta2_) * gi * gi;
                m_[k][i] = static_cast<T>(m);
                v_[k][i] = static_cast<T>(v);
                const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) +
                                      wd_ * static_cast<double>(val[i]);
                val[i] = static_cast<T>(static_cast<double>(val[i]) - lr * update);
            }
        }
    }

    void zero_grad() { params_.zero_grad(); }

    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t n) { step_count_ = n; }
    std::vector<Tensor<T>>& m() { return m_; }
    std::vector<Tensor<T>>& v() { return v_; }

private:
    ParamStore<T>& params_;
    double beta1_, beta2_, wd_, eps_;
    int64_t step_count_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

// One training loop over a paired corpus. The loop thread owns the model;
// evaluation runs between steps on the same thread.
template <typename T>
class Trainer {
public:
    Trainer(DftModel<T>& model, const DiffusionSchedule& sched, const TrainPlan& plan,
            const std::vector<ImagePair>& corpus, bool coarse_initialized = false)
        : model_(model),
          sched_(sched),
          plan_(plan),
          corpus_(corpus),
          rng_(plan.seed),
          opt_(model.params(), plan.adam_beta1, plan.adam_beta2, plan.weight_decay) {
        plan_.validate();
        require(!corpus_.empty(), "trainer: empty corpus");
        if (plan_.stage == TrainStage::kFine) {
            require(coarse_initialized,
                    "fine training requires a model initialized from a coarse checkpoint");
            fine_plan_ = timestep_grid(plan_.sample_steps, sched_.T);
        }
        int max_patch = 0;
        for (const auto& [p, b] : plan_.patch_cycle.entries) max_patch = std::max(max_patch, p);
        for (const auto& pair : corpus_)
            require(pair.clean.dim(1) >= max_patch && pair.clean.dim(2) >= max_patch,
                    "trainer: image " + pair.id + " smaller than the largest cycle patch");
    }

    // Runs the iteration at the current index and returns its loss.
    double step() {
        const auto [patch, batch_size] = patch_cycle_at(iter_, plan_.patch_cycle);
        PatchBatch batch = sample_batch(patch, batch_size);
        const double lr = lr_at(iter_, plan_);
        const double loss = plan_.stage == TrainStage::kCoarse ? coarse_step(batch, lr)
                                                               : fine_step(batch, lr);
        if (!std::isfinite(loss)) {
            std::ostringstream os;
            os << "non-finite " << to_string(plan_.stage) << " loss " << loss << " at iteration "
               << iter_ << " (patch " << patch << ", batch " << batch_size << ")";
            fail(os.str());
        }
        ++iter_;
        return loss;
    }

    PatchBatch sample_batch(int patch, int batch_size) {
        PatchBatch b;
        b.patch = patch;
        b.x = TensorF({batch_size, 3, patch, patch});
        b.y = TensorF({batch_size, 3, patch, patch});
        const int64_t per = static_cast<int64_t>(3) * patch * patch;
        for (int i = 0; i < batch_size; ++i) {
            const auto& pair = corpus_[static_cast<size_t>(
                rng_.uniform_int(0, static_cast<int64_t>(corpus_.size()) - 1))];
            auto [cx, cy] = random_patch(pair, patch, rng_, plan_.augment);
            std::copy_n(cx.data(), per, b.x.data() + i * per);
            std::copy_n(cy.data(), per, b.y.data() + i * per);
            b.ids.push_back(pair.id);
        }
        return b;
    }

    int64_t iteration() const { return iter_; }
    void set_iteration(int64_t it) { iter_ = it; }
    Rng& rng() { return rng_; }
    AdamW<T>& optimizer() { return opt_; }
    const TrainPlan& plan() const { return plan_; }

private:
    double coarse_step(const PatchBatch& batch, double lr) {
        const int64_t B = batch.x.dim(0);
        std::vector<int> ts(static_cast<size_t>(B));
        for (auto& t : ts) t = static_cast<int>(rng_.uniform_int(1, sched_.T));
        Tensor<T> x0 = batch.x.template cast<T>();
        Tensor<T> eps = rng_.normal_tensor<T>(x0.shape());
        NoisySample<T> noisy = q_sample(x0, std::span<const int>(ts), eps, sched_);

        Var<T> eps_hat = model_.forward(Var<T>(noisy.x_t), Var<T>(batch.y.template cast<T>()), ts);
        Var<T> loss = coarse_loss(Var<T>(std::move(eps)), eps_hat);
        opt_.zero_grad();
        loss.backward();
        opt_.step(lr);
        return static_cast<double>(loss.value()[0]);
    }

    double fine_step(const PatchBatch& batch, double lr) {
        const uint64_t draw_seed = rng_.raw();  // fresh x_{t_S} every iteration
        Tensor<T> y = batch.y.template cast<T>();
        Var<T> x_t0 = sample_restore(model_predictor(model_), y, fine_plan_, sched_, draw_seed,
                                     /*track_gradients=*/true);
        Var<T> loss = fine_loss(x_t0, Var<T>(batch.x.template cast<T>()), plan_.lambda_ssim);
        opt_.zero_grad();
        loss.backward();
        clip_grad_norm(model_.params(), plan_.grad_clip);
        opt_.step(lr);
        return static_cast<double>(loss.value()[0]);
    }

    DftModel<T>& model_;
    const DiffusionSchedule& sched_;
    TrainPlan plan_;
    const std::vector<ImagePair>& corpus_;
    Rng rng_;
    AdamW<T> opt_;
    SamplerPlan fine_plan_;
    int64_t iter_ = 0;
};

}  // namespace c2fdft

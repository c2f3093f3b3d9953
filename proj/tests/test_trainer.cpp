#include <gtest/gtest.h>

#include "c2fdft/trainer.hpp"

using namespace c2fdft;

namespace {

DftConfig micro_config() {
    DftConfig cfg;
    cfg.base_channels = 8;
    cfg.blocks = {1, 1, 1, 1};
    cfg.heads = {1, 2, 4, 8};
    cfg.channels = {8, 16, 32, 64};
    return cfg;
}

std::vector<ImagePair> toy_corpus(int n, int64_t size, uint64_t seed) {
    Rng rng(seed);
    std::vector<ImagePair> pairs;
    DegradeParams p;
    for (int i = 0; i < n; ++i) {
        ImagePair pair;
        pair.id = "t" + std::to_string(i);
        pair.clean = TensorF({3, size, size});
        rng.fill_uniform(pair.clean, 0.0, 1.0);
        pair.degraded = synth_degrade(pair.clean, Degradation::kNoise, p, Rng::mix(seed, i));
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

TrainPlan small_plan(TrainStage stage, int64_t iters, uint64_t seed) {
    TrainPlan plan;
    plan.stage = stage;
    plan.total_iters = iters;
    plan.lr_start = 1e-3;
    plan.lr_end = 1e-4;
    plan.patch_cycle = {{{8, 2}}, 1000};
    plan.seed = seed;
    plan.augment = false;
    return plan;
}

TEST(CoarseLoss, TrivialAndOracleCases) {
    Rng rng(1);
    TensorD e = rng.normal_tensor<double>({2, 3, 4, 4});
    EXPECT_DOUBLE_EQ(coarse_loss(VarD(e), VarD(e)).value()[0], 0.0);

    TensorD shifted = e;
    for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.5;
    EXPECT_NEAR(coarse_loss(VarD(e), VarD(shifted)).value()[0], 0.5, 1e-12);

    TensorD a = rng.normal_tensor<double>({2, 3, 4, 4});
    double oracle = 0;
    for (int64_t i = 0; i < a.numel(); ++i) oracle += std::abs(e[i] - a[i]);
    oracle /= static_cast<double>(a.numel());
    EXPECT_NEAR(coarse_loss(VarD(e), VarD(a)).value()[0], oracle, 1e-7);

    TensorD bad({2, 3, 4, 5});
    EXPECT_THROW(coarse_loss(VarD(e), VarD(bad)), Error);
}

TEST(FineLoss, IdentityBoundaryAndCombination) {
    Rng rng(2);
    TensorD x = rng.normal_tensor<double>({1, 3, 16, 16});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = 0.5 + 0.2 * x[i];
    EXPECT_NEAR(fine_loss(VarD(x), VarD(x), 0.84).value()[0], 0.0, 1e-9);

    TensorD y = rng.normal_tensor<double>({1, 3, 16, 16});
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = 0.5 + 0.2 * y[i];
    // lambda = 0 reduces to pure L1
    double l1 = 0;
    for (int64_t i = 0; i < x.numel(); ++i) l1 += std::abs(x[i] - y[i]);
    l1 /= static_cast<double>(x.numel());
    EXPECT_NEAR(fine_loss(VarD(x), VarD(y), 0.0).value()[0], l1, 1e-9);

    // weighted combination equals its parts
    const double s = ssim(x, y, 11);
    const double expect = 0.84 * (1.0 - s) + 0.16 * l1;
    EXPECT_NEAR(fine_loss(VarD(x), VarD(y), 0.84).value()[0], expect, 1e-9);
    // the weighting arithmetic itself: 0.84*0.5 + 0.16*0.1 = 0.436
    EXPECT_NEAR(0.84 * 0.5 + (1.0 - 0.84) * 0.1, 0.436, 1e-12);

    EXPECT_THROW(fine_loss(VarD(x), VarD(y), 1.5), Error);
}

TEST(LrSchedule, CosineEndpointsAndMidpoint) {
    TrainPlan plan;
    plan.total_iters = 270000;
    EXPECT_DOUBLE_EQ(lr_at(0, plan), 3e-4);
    EXPECT_NEAR(lr_at(plan.total_iters, plan), 1e-5, 1e-18);
    EXPECT_NEAR(lr_at(plan.total_iters / 2, plan), 1.55e-4, 1e-12);
    EXPECT_THROW(lr_at(-1, plan), Error);
    EXPECT_THROW(lr_at(plan.total_iters + 1, plan), Error);
}

TEST(PatchCycle, PaperDerainingScheduleAndWrap) {
    PatchCycleSchedule s{{{32, 360}, {64, 96}, {128, 24}}, 10000};
    EXPECT_EQ(patch_cycle_at(0, s), std::make_pair(32, 360));
    EXPECT_EQ(patch_cycle_at(9999, s), std::make_pair(32, 360));
    EXPECT_EQ(patch_cycle_at(10000, s), std::make_pair(64, 96));
    EXPECT_EQ(patch_cycle_at(25000, s), std::make_pair(128, 24));
    EXPECT_EQ(patch_cycle_at(30000, s), std::make_pair(32, 360));
    EXPECT_THROW(patch_cycle_at(-1, s), Error);
    PatchCycleSchedule bad{{{30, 16}}, 100};
    EXPECT_THROW(patch_cycle_at(0, bad), Error);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUntouched) {
    auto corpus = toy_corpus(2, 8, 5);
    auto sched = make_schedule(50, 1e-3, 2e-1);
    DftModel<float> model(micro_config(), 1);
    TrainPlan plan = small_plan(TrainStage::kCoarse, 100, 3);
    Trainer<float> trainer(model, sched, plan, corpus);

    std::vector<TensorF> before;
    for (auto& [n, p] : model.params().items()) before.push_back(p.value());
    auto batch = trainer.sample_batch(8, 2);
    // drive one manual update with lr = 0 through the optimizer
    std::vector<int> ts{10, 20};
    Rng noise(1);
    TensorF eps = noise.normal_tensor<float>({2, 3, 8, 8});
    auto noisy = q_sample(batch.x, std::span<const int>(ts), eps, sched);
    VarF loss = coarse_loss(VarF(eps), model.forward(VarF(noisy.x_t), VarF(batch.y), ts));
    trainer.optimizer().zero_grad();
    loss.backward();
    trainer.optimizer().step(0.0);
    size_t i = 0;
    for (auto& [n, p] : model.params().items())
        EXPECT_EQ(p.value().max_abs_diff(before[i++]), 0.0f) << n;
}

TEST(Trainer, SameSeedGivesBitwiseIdenticalLossSequences) {
    auto corpus = toy_corpus(3, 8, 6);
    auto sched = make_schedule(50, 1e-3, 2e-1);
    DftModel<float> m1(micro_config(), 7);
    DftModel<float> m2(micro_config(), 7);
    Trainer<float> t1(m1, sched, small_plan(TrainStage::kCoarse, 100, 9), corpus);
    Trainer<float> t2(m2, sched, small_plan(TrainStage::kCoarse, 100, 9), corpus);
    for (int i = 0; i < 50; ++i) {
        const double a = t1.step();
        const double b = t2.step();
        ASSERT_EQ(a, b) << "iteration " << i;
    }
}

TEST(Trainer, CoarseLossTrendsDownOnOverfitSet) {
    auto corpus = toy_corpus(2, 8, 11);
    auto sched = make_schedule(50, 1e-2, 2e-1);
    DftModel<float> model(micro_config(), 13);
    Trainer<float> trainer(model, sched, small_plan(TrainStage::kCoarse, 400, 15), corpus);
    double first = 0, last = 0;
    for (int i = 0; i < 400; ++i) {
        const double l = trainer.step();
        if (i < 50) first += l;
        if (i >= 350) last += l;
    }
    EXPECT_LT(last, first);
}

TEST(Trainer, FineStageRequiresCoarseInitialization) {
    auto corpus = toy_corpus(2, 8, 17);
    auto sched = make_schedule(50, 1e-3, 2e-1);
    DftModel<float> model(micro_config(), 19);
    TrainPlan plan = small_plan(TrainStage::kFine, 100, 21);
    EXPECT_THROW(Trainer<float>(model, sched, plan, corpus, /*coarse_initialized=*/false), Error);
    EXPECT_NO_THROW(Trainer<float>(model, sched, plan, corpus, /*coarse_initialized=*/true));
}

TEST(Trainer, FineStepRunsAndStaysFinite) {
    auto corpus = toy_corpus(2, 16, 23);
    auto sched = make_schedule(50, 1e-3, 2e-1);
    DftModel<float> model(micro_config(), 25);
    TrainPlan plan = small_plan(TrainStage::kFine, 100, 27);
    plan.patch_cycle = {{{16, 1}}, 1000};
    plan.sample_steps = 4;
    Trainer<float> trainer(model, sched, plan, corpus, true);
    for (int i = 0; i < 3; ++i) {
        const double l = trainer.step();
        EXPECT_TRUE(std::isfinite(l));
        EXPECT_GT(l, 0.0);
    }
}

TEST(Trainer, NonFiniteLossAborts) {
    auto corpus = toy_corpus(2, 8, 29);
    auto sched = make_schedule(50, 1e-3, 2e-1);
    DftModel<float> model(micro_config(), 31);
    // poison one parameter so the forward pass overflows
    model.params().find("input_conv.w")->value().fill(1e30f);
    model.params().find("output_conv.w")->value().fill(1e30f);
    Trainer<float> trainer(model, sched, small_plan(TrainStage::kCoarse, 100, 33), corpus);
    try {
        trainer.step();
        FAIL() << "expected non-finite loss abort";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos);
    }
}

TEST(Trainer, PerfectSamplerStubGivesZeroFineLossAndGradient) {
    // fixed point of the fine objective: x_t0 == x gives loss 0, zero grads
    Rng rng(35);
    TensorD x = rng.normal_tensor<double>({1, 3, 16, 16});
    VarD xv(x, true);
    VarD loss = fine_loss(xv, VarD(x), 0.84);
    EXPECT_NEAR(loss.value()[0], 0.0, 1e-12);
    loss.backward();
    for (int64_t i = 0; i < xv.grad().numel(); ++i) EXPECT_NEAR(xv.grad()[i], 0.0, 1e-9);
}

// d fine_loss / d(probed parameter) through the unrolled 4-step chain against
// central finite differences, double precision, 8x8 patch.
TEST(Trainer, FineGradientMatchesFiniteDifferences) {
    DftConfig cfg = micro_config();
    DftModel<double> model(cfg, 37);
    // leave the zero-initialized output conv: perturb it so gradients flow
    Rng rng(39);
    rng.fill_uniform(model.params().find("output_conv.w")->value(), -0.05, 0.05);

    TensorD y = rng.normal_tensor<double>({1, 3, 8, 8});
    TensorD x = rng.normal_tensor<double>({1, 3, 8, 8});
    for (int64_t i = 0; i < x.numel(); ++i) {
        x[i] = 0.5 + 0.2 * x[i];
        y[i] = 0.5 + 0.2 * y[i];
    }
    auto sched = make_schedule(100, 1e-3, 2e-1);
    auto plan = timestep_grid(4, 100);
    auto run = [&] {
        VarD x_t0 = sample_restore(model_predictor(model), y, plan, sched, 41, true);
        return fine_loss(x_t0, VarD(x), 0.84);
    };
    model.params().zero_grad();
    run().backward();

    // probe the element with the largest gradient in a mid-network parameter
    Var<double>* probe = model.params().find("mid.block0.dfn.w1.w");
    ASSERT_NE(probe, nullptr);
    int64_t best = 0;
    for (int64_t i = 0; i < probe->grad().numel(); ++i)
        if (std::abs(probe->grad()[i]) > std::abs(probe->grad()[best])) best = i;
    const double ad = probe->grad()[best];
    ASSERT_NE(ad, 0.0);

    const double h = 1e-6, base = probe->value()[best];
    probe->value()[best] = base + h;
    const double fp = run().value()[0];
    probe->value()[best] = base - h;
    const double fm = run().value()[0];
    probe->value()[best] = base;
    const double fd = (fp - fm) / (2 * h);
    EXPECT_LT(std::abs(ad - fd) / std::max(std::abs(fd), 1e-12), 1e-3);
}

TEST(GradClip, ScalesDownToMaxNorm) {
    ParamStore<double> ps;
    auto a = ps.create("a", TensorD({4}));
    auto b = ps.create("b", TensorD({2}));
    a.grad_buffer().fill(3.0);
    b.grad_buffer().fill(4.0);
    const double norm = global_grad_norm(ps);
    EXPECT_NEAR(norm, std::sqrt(4 * 9.0 + 2 * 16.0), 1e-12);
    clip_grad_norm(ps, 1.0);
    EXPECT_NEAR(global_grad_norm(ps), 1.0, 1e-9);
    // already small gradients stay untouched
    a.grad_buffer().fill(0.01);
    b.grad_buffer().fill(0.01);
    clip_grad_norm(ps, 1.0);
    EXPECT_DOUBLE_EQ(a.grad()[0], 0.01);
}

}  // namespace

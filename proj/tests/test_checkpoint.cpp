#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "c2fdft/checkpoint.hpp"
#include "c2fdft/config.hpp"

using namespace c2fdft;
namespace fs = std::filesystem;

namespace {

DftConfig micro_config() {
    DftConfig cfg;
    cfg.base_channels = 8;
    cfg.blocks = {1, 1, 1, 1};
    cfg.heads = {1, 2, 4, 8};
    cfg.channels = {8, 16, 32, 64};
    return cfg;
}

std::string tmp_file(const std::string& name) {
    return (fs::path(::testing::TempDir()) / name).string();
}

TEST(Checkpoint, RoundTripIsBitExact) {
    DftModel<float> model(micro_config(), 5);
    Rng rng(6);
    rng.fill_uniform(model.params().find("output_conv.w")->value(), -0.1, 0.1);

    AdamW<float> opt(model.params());
    // produce non-trivial optimizer state
    for (auto& [n, p] : model.params().items()) {
        p.grad_buffer().fill(0.01f);
    }
    opt.step(1e-3);

    Rng trainer_rng(7);
    trainer_rng.normal();  // advance past the initial state
    const std::string cfg_text = serialize_config(RunConfig{});
    Checkpoint ck = make_checkpoint(model, cfg_text, "coarse", 1234,
                                    trainer_rng.save_state(), &opt);
    const std::string path = tmp_file("roundtrip.ckpt");
    save_checkpoint(ck, path);
    Checkpoint back = load_checkpoint(path);

    EXPECT_EQ(back.format_version, kCheckpointVersion);
    EXPECT_EQ(back.config_text, cfg_text);
    EXPECT_EQ(back.stage, "coarse");
    EXPECT_EQ(back.iteration, 1234);
    EXPECT_EQ(back.rng_state, trainer_rng.save_state());
    EXPECT_TRUE(back.has_optimizer);
    EXPECT_EQ(back.opt_step, 1);

    DftModel<float> restored(micro_config(), 99);  // different init seed
    load_model_params(restored, back);
    auto& a = model.params().items();
    auto& b = restored.params().items();
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_EQ(a[i].second.value().max_abs_diff(b[i].second.value()), 0.0f) << a[i].first;
    }
    AdamW<float> opt2(restored.params());
    load_optimizer(opt2, restored, back);
    EXPECT_EQ(opt2.step_count(), opt.step_count());
    for (size_t i = 0; i < opt.m().size(); ++i) {
        EXPECT_EQ(opt.m()[i].max_abs_diff(opt2.m()[i]), 0.0f);
        EXPECT_EQ(opt.v()[i].max_abs_diff(opt2.v()[i]), 0.0f);
    }

    // the restored rng continues the stream exactly
    Rng resumed(0);
    resumed.load_state(back.rng_state);
    Rng expect(7);
    expect.normal();
    for (int i = 0; i < 16; ++i) EXPECT_EQ(resumed.normal(), expect.normal());
}

TEST(Checkpoint, TruncationIsDetected) {
    DftModel<float> model(micro_config(), 8);
    Checkpoint ck = make_checkpoint(model, "k = v", "coarse", 1, Rng(1).save_state());
    const std::string path = tmp_file("truncated.ckpt");
    save_checkpoint(ck, path);

    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
    out.close();
    try {
        load_checkpoint(path);
        FAIL() << "expected truncation error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("trunc"), std::string::npos);
    }
}

TEST(Checkpoint, CorruptionFailsChecksum) {
    DftModel<float> model(micro_config(), 9);
    Checkpoint ck = make_checkpoint(model, "", "fine", 2, Rng(2).save_state());
    const std::string path = tmp_file("corrupt.ckpt");
    save_checkpoint(ck, path);
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(200);
    char b = 0x5a;
    f.write(&b, 1);
    f.close();
    try {
        load_checkpoint(path);
        FAIL() << "expected checksum error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }
}

TEST(Checkpoint, UnknownVersionRejected) {
    DftModel<float> model(micro_config(), 10);
    Checkpoint ck = make_checkpoint(model, "", "coarse", 0, Rng(3).save_state());
    ck.format_version = 42;
    const std::string path = tmp_file("badver.ckpt");
    save_checkpoint(ck, path);
    try {
        load_checkpoint(path);
        FAIL() << "expected version error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

TEST(Checkpoint, MismatchedModelConfigRejected) {
    DftModel<float> model(micro_config(), 11);
    Checkpoint ck = make_checkpoint(model, "", "coarse", 0, Rng(4).save_state());
    const std::string path = tmp_file("mismatch.ckpt");
    save_checkpoint(ck, path);
    Checkpoint back = load_checkpoint(path);
    DftConfig bigger = micro_config();
    bigger.blocks = {2, 1, 1, 1};
    DftModel<float> other(bigger, 12);
    EXPECT_THROW(load_model_params(other, back), Error);
}

TEST(Config, DefaultsReproducePaperConstants) {
    RunConfig cfg;
    const std::string text = serialize_config(cfg);
    EXPECT_NE(text.find("schedule.T = 1000"), std::string::npos);
    EXPECT_NE(text.find("train.lambda_ssim = 0.84"), std::string::npos);
    EXPECT_NE(text.find("train.sample_steps = 4"), std::string::npos);
    EXPECT_NE(text.find("model.blocks = 4,6,6,8"), std::string::npos);
    EXPECT_NE(text.find("model.heads = 1,2,4,8"), std::string::npos);
    EXPECT_NE(text.find("model.channels = 48,96,192,384"), std::string::npos);
    EXPECT_NE(text.find("train.patch_cycle = 32:360,64:96,128:24"), std::string::npos);
    EXPECT_NE(text.find("train.cycle_period = 10000"), std::string::npos);
    EXPECT_NE(text.find("train.adam_beta1 = 0.9"), std::string::npos);
    EXPECT_NE(text.find("train.adam_beta2 = 0.999"), std::string::npos);
    EXPECT_NE(text.find("train.total_iters = 270000"), std::string::npos);
    // the remaining paper constants survive a parse round trip exactly
    RunConfig back = parse_config_text(text);
    EXPECT_EQ(back.beta_1, 1e-4);
    EXPECT_EQ(back.beta_T, 2e-2);
    EXPECT_EQ(back.train.lr_start, 3e-4);
    EXPECT_EQ(back.train.lr_end, 1e-5);
}

TEST(Config, ParseSerializeRoundTrip) {
    RunConfig cfg;
    RunConfig again = parse_config_text(serialize_config(cfg));
    EXPECT_EQ(serialize_config(cfg), serialize_config(again));
}

TEST(Config, FineStageSwitchesDefaults) {
    RunConfig cfg = parse_config_text("train.stage = fine\n");
    EXPECT_EQ(cfg.train.stage, TrainStage::kFine);
    EXPECT_DOUBLE_EQ(cfg.train.lr_start, 1e-5);
    EXPECT_DOUBLE_EQ(cfg.train.lr_end, 1e-7);
    EXPECT_EQ(cfg.train.total_iters, 90000);
    EXPECT_EQ(cfg.train.patch_cycle.period, 5000);
    EXPECT_EQ(cfg.train.patch_cycle.entries,
              (std::vector<std::pair<int, int>>{{32, 96}, {64, 24}, {128, 6}}));
    // explicit keys still win over the stage defaults
    RunConfig cfg2 = parse_config_text("train.stage = fine\ntrain.lr_start = 5e-5\n");
    EXPECT_DOUBLE_EQ(cfg2.train.lr_start, 5e-5);
}

TEST(Config, PresetsExposeAlternateCycles) {
    RunConfig cfg = parse_config_text("preset = deblur\n");
    EXPECT_EQ(cfg.train.patch_cycle.entries,
              (std::vector<std::pair<int, int>>{{64, 96}, {128, 24}, {256, 6}}));
    RunConfig fine = parse_config_text("train.stage = fine\npreset = denoise\n");
    EXPECT_EQ(fine.train.patch_cycle.entries,
              (std::vector<std::pair<int, int>>{{32, 24}, {64, 6}, {128, 1}}));
    EXPECT_THROW(parse_config_text("preset = nosuch\n"), Error);
}

TEST(Config, UnknownKeysAndBadValuesAllListed) {
    try {
        parse_config_text(
            "model.nonsense = 3\n"
            "schedule.T = -5\n"
            "train.lambda_ssim = 2.5\n"
            "seed = abc\n");
        FAIL() << "expected config errors";
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("model.nonsense"), std::string::npos);
        EXPECT_NE(msg.find("T must be positive"), std::string::npos);
        EXPECT_NE(msg.find("lambda_ssim"), std::string::npos);
        EXPECT_NE(msg.find("seed"), std::string::npos);
    }
}

TEST(Config, CommentsAndWhitespaceTolerated) {
    RunConfig cfg = parse_config_text(
        "# full comment line\n"
        "\n"
        "  schedule.T   =  500   # trailing comment\n");
    EXPECT_EQ(cfg.schedule_T, 500);
}

}  // namespace

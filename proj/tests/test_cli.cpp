#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "c2fdft/image_io.hpp"
#include "c2fdft/tensor.hpp"
#include "test_util.hpp"

using namespace c2fdft;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

RunResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    fs::path dir = fs::path(::testing::TempDir()) / "c2f_cli_io";
    fs::create_directories(dir);
    fs::path out = dir / ("out" + std::to_string(counter) + ".txt");
    fs::path err = dir / ("err" + std::to_string(counter) + ".txt");
    ++counter;
    std::string cmd = env + (env.empty() ? "" : " ") + std::string(C2FDFT_BIN) + " " + args +
                      " > " + out.string() + " 2> " + err.string();
    const int rc = std::system(cmd.c_str());
    return {WEXITSTATUS(rc), slurp(out), slurp(err)};
}

bool files_equal(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa.good() || !fb.good()) return false;
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return ba == bb;
}

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::path(::testing::TempDir()) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

fs::path write_clean_images(const std::string& name, int n, int64_t h, int64_t w) {
    fs::path src = fresh_dir(name);
    for (int i = 0; i < n; ++i)
        write_png((src / ("img" + std::to_string(i) + ".png")).string(),
                  testutil::make_clean_image(Rng::mix(50, static_cast<uint64_t>(i)), h, w));
    return src;
}

std::string train_config(const fs::path& corpus, int iters, uint64_t seed,
                         const std::string& stage = "coarse") {
    std::ostringstream os;
    os << "model.base_channels = 8\n"
       << "model.blocks = 1,1,1,1\n"
       << "model.heads = 1,2,4,8\n"
       << "model.channels = 8,16,32,64\n"
       << "schedule.T = 50\n"
       << "schedule.beta_1 = 0.02\n"
       << "schedule.beta_T = 0.1\n"
       << "train.stage = " << stage << "\n"
       << "train.total_iters = " << iters << "\n"
       << "train.lr_start = 0.001\n"
       << "train.lr_end = 0.0001\n"
       << "train.patch_cycle = 8:2\n"
       << "train.cycle_period = 1000\n"
       << "train.augment = false\n"
       << "train.log_interval = 1\n"
       << "train.checkpoint_interval = 10\n"
       << "data.clean_dir = " << (corpus / "clean").string() << "\n"
       << "data.degraded_dir = " << (corpus / "degraded").string() << "\n"
       << "seed = " << seed << "\n";
    return os.str();
}

// loss column of each metrics.log line
std::vector<std::string> logged_losses(const fs::path& log) {
    std::vector<std::string> out;
    std::ifstream f(log);
    std::string line;
    while (std::getline(f, line)) {
        const auto pos = line.find("loss=");
        if (pos == std::string::npos) continue;
        const auto end = line.find(' ', pos);
        out.push_back(line.substr(pos + 5, end - pos - 5));
    }
    return out;
}

TEST(CliMakeData, DeterministicAndManifested) {
    fs::path src = write_clean_images("cli_src", 3, 24, 24);
    fs::path out1 = fresh_dir("cli_corpus1");
    fs::path out2 = fresh_dir("cli_corpus2");
    auto r1 = run_cli("make-data --kind noise --src " + src.string() + " --out " + out1.string() +
                      " --params sigma=0.1 --seed 5");
    ASSERT_EQ(r1.code, 0) << r1.err;
    auto r2 = run_cli("make-data --kind noise --src " + src.string() + " --out " + out2.string() +
                      " --params sigma=0.1 --seed 5");
    ASSERT_EQ(r2.code, 0) << r2.err;
    for (int i = 0; i < 3; ++i) {
        const std::string name = "img" + std::to_string(i) + ".png";
        EXPECT_TRUE(files_equal(out1 / "degraded" / name, out2 / "degraded" / name)) << name;
    }
    const std::string manifest = slurp(out1 / "manifest.txt");
    EXPECT_NE(manifest.find("kind=noise"), std::string::npos);
    EXPECT_NE(manifest.find("sigma=0.1"), std::string::npos);
    EXPECT_NE(manifest.find("seed=5"), std::string::npos);

    // different seed changes the degraded bytes
    fs::path out3 = fresh_dir("cli_corpus3");
    run_cli("make-data --kind noise --src " + src.string() + " --out " + out3.string() +
            " --params sigma=0.1 --seed 6");
    EXPECT_FALSE(files_equal(out1 / "degraded" / "img0.png", out3 / "degraded" / "img0.png"));
}

TEST(CliMakeData, IdentityBlurKernelCopiesImages) {
    fs::path src = write_clean_images("cli_src_blur", 2, 16, 16);
    fs::path out = fresh_dir("cli_corpus_blur");
    auto r = run_cli("make-data --kind blur --src " + src.string() + " --out " + out.string() +
                     " --params blur_ksize=1 --seed 1");
    ASSERT_EQ(r.code, 0) << r.err;
    for (int i = 0; i < 2; ++i) {
        const std::string name = "img" + std::to_string(i) + ".png";
        EXPECT_TRUE(files_equal(out / "clean" / name, out / "degraded" / name));
    }
}

TEST(CliMakeData, EmptySourceFails) {
    fs::path src = fresh_dir("cli_src_empty");
    fs::path out = fresh_dir("cli_corpus_empty");
    auto r = run_cli("make-data --kind noise --src " + src.string() + " --out " + out.string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("c2fdft:"), std::string::npos);
}

class CliTrainFlow : public ::testing::Test {
protected:
    void SetUp() override {
        src_ = write_clean_images("cli_train_src", 4, 16, 16);
        corpus_ = fresh_dir("cli_train_corpus");
        auto r = run_cli("make-data --kind noise --src " + src_.string() + " --out " +
                         corpus_.string() + " --params sigma=0.1 --seed 3");
        ASSERT_EQ(r.code, 0) << r.err;
    }
    fs::path src_, corpus_;
};

TEST_F(CliTrainFlow, TrainRestoreEvalPipeline) {
    fs::path run_dir = fresh_dir("cli_run");
    fs::path cfg = run_dir / "config.txt";
    std::ofstream(cfg) << train_config(corpus_, 30, 7);
    auto r = run_cli("train --stage coarse --config " + cfg.string() + " --out " +
                     run_dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(run_dir / "final_coarse.ckpt"));
    EXPECT_TRUE(fs::exists(run_dir / "ckpt_coarse_10.ckpt"));
    auto losses = logged_losses(run_dir / "metrics.log");
    EXPECT_EQ(losses.size(), 30u);
    const std::string log_text = slurp(run_dir / "metrics.log");
    EXPECT_NE(log_text.find("stage=coarse"), std::string::npos);
    EXPECT_NE(log_text.find("patch=8"), std::string::npos);
    EXPECT_NE(log_text.find("batch=2"), std::string::npos);
    EXPECT_NE(log_text.find("lr="), std::string::npos);

    // restore a directory that includes a non-multiple-of-8 image
    fs::path in_dir = fresh_dir("cli_restore_in");
    write_png((in_dir / "odd.png").string(), testutil::make_clean_image(11, 37, 41));
    write_png((in_dir / "even.png").string(), testutil::make_clean_image(12, 16, 16));
    fs::path out_a = fresh_dir("cli_restore_a");
    fs::path out_b = fresh_dir("cli_restore_b");
    fs::path dbg = fresh_dir("cli_restore_dbg");
    auto ra = run_cli("restore --ckpt " + (run_dir / "final_coarse.ckpt").string() + " --input " +
                      in_dir.string() + " --output " + out_a.string() +
                      " --steps 3 --seed 9 --debug-steps " + dbg.string());
    ASSERT_EQ(ra.code, 0) << ra.err;
    TensorF odd = read_png((out_a / "odd.png").string());
    EXPECT_EQ(odd.dim(1), 37);  // padded to 40x48 internally, cropped back
    EXPECT_EQ(odd.dim(2), 41);
    // three per-step intermediates per image; grid for (S=3, T=50) is
    // [50, 26, 1] so the landed timesteps are 26, 1, 0
    EXPECT_TRUE(fs::exists(dbg / "odd_step2_t26.png"));
    EXPECT_TRUE(fs::exists(dbg / "odd_step1_t1.png"));
    EXPECT_TRUE(fs::exists(dbg / "odd_step0_t0.png"));

    auto rb = run_cli("restore --ckpt " + (run_dir / "final_coarse.ckpt").string() + " --input " +
                      in_dir.string() + " --output " + out_b.string() + " --steps 3 --seed 9");
    ASSERT_EQ(rb.code, 0) << rb.err;
    EXPECT_TRUE(files_equal(out_a / "odd.png", out_b / "odd.png"));
    EXPECT_TRUE(files_equal(out_a / "even.png", out_b / "even.png"));
    fs::path out_c = fresh_dir("cli_restore_c");
    run_cli("restore --ckpt " + (run_dir / "final_coarse.ckpt").string() + " --input " +
            in_dir.string() + " --output " + out_c.string() + " --steps 3 --seed 10");
    EXPECT_FALSE(files_equal(out_a / "even.png", out_c / "even.png"));

    // eval: pred = gt gives mean SSIM 1 and an inf warning on stderr
    auto re = run_cli("eval --pred " + (corpus_ / "clean").string() + " --gt " +
                      (corpus_ / "clean").string());
    ASSERT_EQ(re.code, 0) << re.err;
    EXPECT_NE(re.out.find("MEAN,0.000000,1.000000"), std::string::npos) << re.out;
    EXPECT_NE(re.err.find("warning"), std::string::npos);
    auto rq = run_cli("eval --pred " + (corpus_ / "degraded").string() + " --gt " +
                      (corpus_ / "clean").string() + " --y-channel");
    ASSERT_EQ(rq.code, 0) << rq.err;
    EXPECT_NE(rq.out.find("MEAN,"), std::string::npos);
}

TEST_F(CliTrainFlow, ResumeContinuesExactly) {
    // uninterrupted 30-iteration reference
    fs::path full = fresh_dir("cli_run_full");
    std::ofstream(full / "config.txt") << train_config(corpus_, 30, 21);
    auto r = run_cli("train --stage coarse --config " + (full / "config.txt").string() +
                     " --out " + full.string());
    ASSERT_EQ(r.code, 0) << r.err;

    // interrupted at 20, then resumed to 30
    fs::path part = fresh_dir("cli_run_part");
    std::ofstream(part / "config20.txt") << train_config(corpus_, 20, 21);
    std::ofstream(part / "config30.txt") << train_config(corpus_, 30, 21);
    auto r1 = run_cli("train --stage coarse --config " + (part / "config20.txt").string() +
                      " --out " + part.string());
    ASSERT_EQ(r1.code, 0) << r1.err;
    fs::remove(part / "metrics.log");
    auto r2 = run_cli("train --stage coarse --config " + (part / "config30.txt").string() +
                      " --out " + part.string() + " --resume " +
                      (part / "final_coarse.ckpt").string());
    ASSERT_EQ(r2.code, 0) << r2.err;

    auto ref = logged_losses(full / "metrics.log");
    auto resumed = logged_losses(part / "metrics.log");
    ASSERT_EQ(ref.size(), 30u);
    ASSERT_EQ(resumed.size(), 10u);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(resumed[static_cast<size_t>(i)], ref[static_cast<size_t>(20 + i)]) << i;
}

TEST_F(CliTrainFlow, FineWithoutInitFailsLoudly) {
    fs::path run_dir = fresh_dir("cli_run_fine");
    std::ofstream(run_dir / "config.txt") << train_config(corpus_, 10, 3, "fine");
    auto r = run_cli("train --stage fine --config " + (run_dir / "config.txt").string() +
                     " --out " + run_dir.string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("c2fdft:"), std::string::npos);
    EXPECT_NE(r.err.find("coarse checkpoint"), std::string::npos);
}

TEST_F(CliTrainFlow, StageFlagMustMatchConfig) {
    fs::path run_dir = fresh_dir("cli_run_mismatch");
    std::ofstream(run_dir / "config.txt") << train_config(corpus_, 10, 3, "coarse");
    auto r = run_cli("train --stage fine --config " + (run_dir / "config.txt").string() +
                     " --out " + run_dir.string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("conflicts"), std::string::npos);
}

TEST_F(CliTrainFlow, BadConfigListsEveryField) {
    fs::path run_dir = fresh_dir("cli_run_badcfg");
    std::ofstream(run_dir / "config.txt") << "schedule.T = -1\nmodel.nonsense = 2\n"
                                          << "train.lambda_ssim = 7\n";
    auto r = run_cli("train --stage coarse --config " + (run_dir / "config.txt").string() +
                     " --out " + run_dir.string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("model.nonsense"), std::string::npos);
    EXPECT_NE(r.err.find("lambda_ssim"), std::string::npos);
    EXPECT_NE(r.err.find("T must be positive"), std::string::npos);
}

TEST(CliEval, UnpairedFilesExitNonzero) {
    fs::path pred = fresh_dir("cli_eval_pred");
    fs::path gt = fresh_dir("cli_eval_gt");
    write_png((pred / "a.png").string(), TensorF::full({3, 16, 16}, 0.5f));
    auto r = run_cli("eval --pred " + pred.string() + " --gt " + gt.string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("c2fdft: unpaired"), std::string::npos);
}

TEST(CliAblate, RejectsFewerThanTwoSteps) {
    auto r = run_cli("ablate-steps --ckpt nowhere.ckpt --corpus nowhere --steps 1,4");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find(">= 2"), std::string::npos);
}

TEST(CliDevice, UnsupportedDeviceRejected) {
    auto r = run_cli("eval --pred x --gt y", "C2FDFT_DEVICE=cuda");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("unsupported device"), std::string::npos);
    auto ok = run_cli("--help", "C2FDFT_DEVICE=cpu");
    EXPECT_EQ(ok.code, 0);
}

}  // namespace

// c2fdft command-line lifecycle: corpus synthesis, coarse/fine training,
// restoration, evaluation and the sampling-steps ablation.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "c2fdft/checkpoint.hpp"
#include "c2fdft/config.hpp"
#include "c2fdft/data.hpp"
#include "c2fdft/metrics.hpp"
#include "c2fdft/sampler.hpp"
#include "c2fdft/trainer.hpp"

namespace fs = std::filesystem;
using namespace c2fdft;

namespace {

void check_device() {
    const char* dev = std::getenv("C2FDFT_DEVICE");
    if (dev && *dev && std::string(dev) != "cpu")
        fail(std::string("unsupported device '") + dev + "' (this build targets cpu)");
}

// "sigma=0.1,density=0.05" style overrides for make-data
DegradeParams parse_degrade_params(const std::string& spec, DegradeParams p) {
    if (spec.empty()) return p;
    std::istringstream is(spec);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        const size_t eq = tok.find('=');
        require(eq != std::string::npos, "bad --params entry (expected key=value): " + tok);
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        if (key == "sigma") p.noise_sigma = std::stod(val);
        else if (key == "blur_kind") p.blur_kind = val;
        else if (key == "blur_sigma") p.blur_sigma = std::stod(val);
        else if (key == "blur_ksize") p.blur_ksize = std::stoi(val);
        else if (key == "motion_len") p.motion_len = std::stoi(val);
        else if (key == "motion_angle") p.motion_angle_deg = std::stod(val);
        else if (key == "density") p.rain_density = std::stod(val);
        else if (key == "len_min") p.rain_len_min = std::stoi(val);
        else if (key == "len_max") p.rain_len_max = std::stoi(val);
        else if (key == "angle") p.rain_angle_deg = std::stod(val);
        else if (key == "intensity_min") p.rain_intensity_min = std::stod(val);
        else if (key == "intensity_max") p.rain_intensity_max = std::stod(val);
        else fail("unknown --params key: " + key);
    }
    return p;
}

std::vector<std::pair<std::string, fs::path>> list_pngs(const std::string& dir) {
    require(fs::is_directory(dir), "not a directory: " + dir);
    std::vector<std::pair<std::string, fs::path>> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            out.emplace_back(e.path().filename().string(), e.path());
    std::sort(out.begin(), out.end());
    return out;
}

int64_t round_up8(int64_t v) { return (v + 7) / 8 * 8; }

// reflect-pad right/bottom to the next multiple of 8
TensorF pad_to_multiple8(const TensorF& img) {
    const int64_t H = img.dim(1), W = img.dim(2);
    const int64_t Hp = round_up8(H), Wp = round_up8(W);
    if (Hp == H && Wp == W) return img;
    auto reflect = [](int64_t i, int64_t n) { return i < n ? i : 2 * n - 2 - i; };
    TensorF out({3, Hp, Wp});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < Hp; ++y)
            for (int64_t x = 0; x < Wp; ++x)
                out[(c * Hp + y) * Wp + x] = img[(c * H + reflect(y, H)) * W + reflect(x, W)];
    return out;
}

TensorF crop_to(const TensorF& img, int64_t H, int64_t W) {
    if (img.dim(1) == H && img.dim(2) == W) return img;
    TensorF out({3, H, W});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                out[(c * H + y) * W + x] = img[(c * img.dim(1) + y) * img.dim(2) + x];
    return out;
}

TensorF quantize8(const TensorF& img) {
    TensorF out(img.shape());
    for (int64_t i = 0; i < img.numel(); ++i) {
        float v = img[i];
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        out[i] = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
    }
    return out;
}

struct LoadedModel {
    RunConfig cfg;
    std::unique_ptr<DftModel<float>> model;
    DiffusionSchedule sched;
};

LoadedModel model_from_checkpoint(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    LoadedModel lm;
    lm.cfg = parse_config_text(ck.config_text);
    lm.model = std::make_unique<DftModel<float>>(lm.cfg.model, 0);
    load_model_params(*lm.model, ck);
    lm.sched = lm.cfg.make_diffusion_schedule();
    return lm;
}

// restore one image (any size) with per-image determinism
TensorF restore_image(const DftModel<float>& model, const DiffusionSchedule& sched,
                      const TensorF& degraded, int steps, uint64_t seed,
                      const std::function<void(int, int, const TensorF&)>& sink = {}) {
    const int64_t H = degraded.dim(1), W = degraded.dim(2);
    TensorF padded = pad_to_multiple8(degraded);
    TensorF batch({1, 3, padded.dim(1), padded.dim(2)}, padded.vec());
    auto plan = timestep_grid(steps, sched.T);
    VarF out = sample_restore(model_predictor(model), batch, plan, sched, seed,
                              /*track_gradients=*/false, sink);
    TensorF img({3, padded.dim(1), padded.dim(2)}, out.value().vec());
    return crop_to(img, H, W);
}

int cmd_make_data(const std::string& kind, const std::string& src, const std::string& out,
                  const std::string& params, uint64_t seed) {
    const Degradation d = degradation_from_string(kind);
    const DegradeParams p = parse_degrade_params(params, DegradeParams{});
    auto files = list_pngs(src);
    require(!files.empty(), "no PNG images in --src directory " + src);
    std::vector<std::pair<std::string, TensorF>> images;
    for (const auto& [name, path] : files)
        images.emplace_back(fs::path(name).stem().string(), read_png(path.string()));
    write_corpus(out, images, d, p, seed);
    std::cout << "wrote " << images.size() << " pairs to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& stage_str, const std::string& config_path,
              const std::string& out_dir, const std::string& resume_path,
              const std::string& init_path, int64_t seed_override) {
    const TrainStage stage = stage_from_string(stage_str);
    RunConfig cfg = parse_config_file(config_path);
    if (seed_override >= 0) {
        cfg.seed = static_cast<uint64_t>(seed_override);
        cfg.train.seed = cfg.seed;
    }
    require(cfg.train.stage == stage,
            "config train.stage (" + to_string(cfg.train.stage) + ") conflicts with --stage " +
                stage_str);
    if (stage == TrainStage::kFine && resume_path.empty())
        require(!init_path.empty(),
                "fine training requires --init pointing at a coarse checkpoint "
                "(the fine stage starts from well-trained coarse parameters)");

    require(!cfg.data_clean_dir.empty() && !cfg.data_degraded_dir.empty(),
            "config must set data.clean_dir and data.degraded_dir for training");
    auto corpus = ingest_pairs(cfg.data_clean_dir, cfg.data_degraded_dir);
    require(!corpus.empty(), "training corpus is empty");

    DiffusionSchedule sched = cfg.make_diffusion_schedule();
    DftModel<float> model(cfg.model, Rng::mix(cfg.seed, 1));
    bool coarse_initialized = false;
    if (!init_path.empty()) {
        Checkpoint init = load_checkpoint(init_path);
        require(init.stage == "coarse",
                "--init checkpoint has stage '" + init.stage + "', expected a coarse checkpoint");
        load_model_params(model, init);
        coarse_initialized = true;
    }
    Trainer<float> trainer(model, sched, cfg.train, corpus,
                           coarse_initialized || stage == TrainStage::kCoarse);
    if (!resume_path.empty()) {
        Checkpoint res = load_checkpoint(resume_path);
        require(res.stage == to_string(stage), "--resume checkpoint stage mismatch");
        load_model_params(model, res);
        load_optimizer(trainer.optimizer(), model, res);
        trainer.set_iteration(res.iteration);
        trainer.rng().load_state(res.rng_state);
    }

    fs::create_directories(out_dir);
    std::ofstream log(fs::path(out_dir) / "metrics.log", std::ios::app);
    require(log.good(), "cannot write metrics log under " + out_dir);
    const std::string cfg_text = serialize_config(cfg);

    auto save = [&](const std::string& name) {
        Checkpoint ck = make_checkpoint(model, cfg_text, to_string(stage), trainer.iteration(),
                                        trainer.rng().save_state(), &trainer.optimizer());
        save_checkpoint(ck, (fs::path(out_dir) / name).string());
    };

    double window_loss = 0;
    int64_t window_n = 0;
    while (trainer.iteration() < cfg.train.total_iters) {
        const int64_t it = trainer.iteration();
        const auto [patch, batch] = patch_cycle_at(it, cfg.train.patch_cycle);
        const double lr = lr_at(it, cfg.train);
        window_loss += trainer.step();
        ++window_n;
        if ((it + 1) % cfg.log_interval == 0 || it + 1 == cfg.train.total_iters) {
            std::ostringstream line;
            line << "iter=" << (it + 1) << " stage=" << to_string(stage) << " loss="
                 << std::setprecision(8) << window_loss / static_cast<double>(window_n)
                 << " lr=" << std::setprecision(6) << lr << " patch=" << patch
                 << " batch=" << batch;
            log << line.str() << "\n";
            log.flush();
            std::cout << line.str() << "\n";
            window_loss = 0;
            window_n = 0;
        }
        if ((it + 1) % cfg.checkpoint_interval == 0 && it + 1 < cfg.train.total_iters)
            save("ckpt_" + to_string(stage) + "_" + std::to_string(it + 1) + ".ckpt");
    }
    save("final_" + to_string(stage) + ".ckpt");
    std::cout << "final checkpoint: " << (fs::path(out_dir) / ("final_" + to_string(stage) + ".ckpt")).string()
              << "\n";
    return 0;
}

int cmd_restore(const std::string& ckpt, const std::string& input_dir,
                const std::string& output_dir, int steps, uint64_t seed,
                const std::string& debug_dir) {
    LoadedModel lm = model_from_checkpoint(ckpt);
    auto files = list_pngs(input_dir);
    require(!files.empty(), "no PNG images in --input directory " + input_dir);
    fs::create_directories(output_dir);
    if (!debug_dir.empty()) fs::create_directories(debug_dir);
    size_t idx = 0;
    for (const auto& [name, path] : files) {
        TensorF degraded = read_png(path.string());
        std::function<void(int, int, const TensorF&)> sink;
        if (!debug_dir.empty()) {
            const std::string stem = fs::path(name).stem().string();
            sink = [&, stem](int step, int t, const TensorF& img) {
                TensorF plane({3, img.dim(2), img.dim(3)}, img.vec());
                write_png((fs::path(debug_dir) / (stem + "_step" + std::to_string(step) + "_t" +
                                                  std::to_string(t) + ".png")).string(),
                          plane);
            };
        }
        TensorF restored = restore_image(*lm.model, lm.sched, degraded, steps,
                                         Rng::mix(seed, idx), sink);
        write_png((fs::path(output_dir) / name).string(), restored);
        ++idx;
    }
    std::cout << "restored " << files.size() << " images to " << output_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt, bool y_channel,
             const std::string& out_path) {
    EvalReport rep = evaluate_pairs(pred, gt, y_channel);
    if (rep.psnr_inf_count > 0)
        std::cerr << "c2fdft: warning: " << rep.psnr_inf_count
                  << " identical pair(s) reported as PSNR inf and excluded from the mean\n";
    if (out_path.empty()) {
        write_eval_csv(rep, std::cout);
    } else {
        std::ofstream f(out_path);
        require(f.good(), "cannot write report: " + out_path);
        write_eval_csv(rep, f);
    }
    return 0;
}

int cmd_ablate_steps(const std::string& ckpt, const std::string& corpus_root,
                     const std::string& steps_csv, bool y_channel, uint64_t seed) {
    LoadedModel lm = model_from_checkpoint(ckpt);
    std::vector<int> steps;
    {
        std::istringstream is(steps_csv);
        std::string tok;
        while (std::getline(is, tok, ',')) steps.push_back(std::stoi(tok));
    }
    require(!steps.empty(), "--steps list is empty");
    for (int s : steps) require(s >= 2, "sampling steps must be >= 2, got " + std::to_string(s));

    auto corpus = ingest_pairs((fs::path(corpus_root) / "clean").string(),
                               (fs::path(corpus_root) / "degraded").string());
    require(!corpus.empty(), "ablation corpus is empty");

    std::cout << "S,psnr_db,ssim,seconds\n";
    for (int s : steps) {
        double psnr_sum = 0, ssim_sum = 0, seconds = 0;
        for (size_t i = 0; i < corpus.size(); ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            TensorF restored = restore_image(*lm.model, lm.sched, corpus[i].degraded, s,
                                             Rng::mix(seed, i));
            seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            // metrics go through 8-bit quantization so rows match a
            // restore-to-png + eval pipeline exactly
            TensorF pred = quantize8(restored);
            TensorF clean = corpus[i].clean;
            if (y_channel) {
                pred = rgb_to_y(pred);
                clean = rgb_to_y(clean);
            }
            psnr_sum += psnr(pred, clean);
            ssim_sum += ssim(pred, clean);
        }
        const double n = static_cast<double>(corpus.size());
        std::cout << s << "," << std::fixed << std::setprecision(6) << psnr_sum / n << ","
                  << ssim_sum / n << "," << seconds << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"coarse-to-fine diffusion Transformer for image restoration"};
    app.require_subcommand(1);

    std::string kind, src, out, params;
    uint64_t seed = 0;
    auto* mk = app.add_subcommand("make-data", "synthesize a degraded paired corpus");
    mk->add_option("--kind", kind, "degradation kind: rain|blur|noise")->required();
    mk->add_option("--src", src, "directory of clean PNG images")->required();
    mk->add_option("--out", out, "output corpus root")->required();
    mk->add_option("--params", params, "comma-separated key=value degradation overrides");
    mk->add_option("--seed", seed, "corpus seed");

    std::string stage, config_path, train_out = "run", resume_path, init_path;
    int64_t train_seed = -1;
    auto* tr = app.add_subcommand("train", "run coarse or fine training");
    tr->add_option("--stage", stage, "coarse|fine")->required();
    tr->add_option("--config", config_path, "config file")->required();
    tr->add_option("--out", train_out, "output directory for checkpoints and logs");
    tr->add_option("--resume", resume_path, "checkpoint to resume from");
    tr->add_option("--init", init_path, "coarse checkpoint initializing a fine run");
    tr->add_option("--seed", train_seed, "override the config seed");

    std::string ckpt, input_dir, output_dir, debug_dir;
    int steps = 4;
    uint64_t restore_seed = 0;
    auto* rs = app.add_subcommand("restore", "restore a directory of degraded images");
    rs->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    rs->add_option("--input", input_dir, "directory of degraded PNG images")->required();
    rs->add_option("--output", output_dir, "directory for restored images")->required();
    rs->add_option("--steps", steps, "implicit sampling steps (default 4)");
    rs->add_option("--seed", restore_seed, "sampling seed");
    rs->add_option("--debug-steps", debug_dir, "stream per-step intermediates here");

    std::string pred_dir, gt_dir, report_path;
    bool y_channel = false;
    auto* ev = app.add_subcommand("eval", "PSNR/SSIM report over paired directories");
    ev->add_option("--pred", pred_dir, "predictions directory")->required();
    ev->add_option("--gt", gt_dir, "ground-truth directory")->required();
    ev->add_flag("--y-channel", y_channel, "evaluate on the YCbCr luma channel");
    ev->add_option("--out", report_path, "CSV output path (default stdout)");

    std::string ab_ckpt, ab_corpus, ab_steps = "2,3,4,5,10";
    bool ab_y = false;
    uint64_t ab_seed = 0;
    auto* ab = app.add_subcommand("ablate-steps", "PSNR/SSIM/wall-time per sampling step count");
    ab->add_option("--ckpt", ab_ckpt, "trained checkpoint")->required();
    ab->add_option("--corpus", ab_corpus, "corpus root with clean/ and degraded/")->required();
    ab->add_option("--steps", ab_steps, "comma-separated step counts");
    ab->add_flag("--y-channel", ab_y, "evaluate on the YCbCr luma channel");
    ab->add_option("--seed", ab_seed, "sampling seed");

    CLI11_PARSE(app, argc, argv);

    try {
        check_device();
        if (mk->parsed()) return cmd_make_data(kind, src, out, params, seed);
        if (tr->parsed()) return cmd_train(stage, config_path, train_out, resume_path, init_path,
                                           train_seed);
        if (rs->parsed())
            return cmd_restore(ckpt, input_dir, output_dir, steps, restore_seed, debug_dir);
        if (ev->parsed()) return cmd_eval(pred_dir, gt_dir, y_channel, report_path);
        if (ab->parsed()) return cmd_ablate_steps(ab_ckpt, ab_corpus, ab_steps, ab_y, ab_seed);
    } catch (const std::exception& e) {
        std::istringstream lines(e.what());
        std::string line;
        while (std::getline(lines, line)) std::cerr << "c2fdft: " << line << "\n";
        return 1;
    }
    return 0;
}

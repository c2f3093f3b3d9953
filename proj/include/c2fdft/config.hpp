#pragma once

#include <charconv>
#include <map>
#include <optional>
#include <sstream>

#include "c2fdft/data.hpp"
#include "c2fdft/dft.hpp"
#include "c2fdft/trainer.hpp"

namespace c2fdft {

// Whole-run configuration. Every default is the paper setting where one
// exists; everything is overridable through the flat `key = value` config
// text (dotted section prefixes, '#' comments, unknown keys rejected).
struct RunConfig {
    DftConfig model;

    int schedule_T = 1000;
    double beta_1 = 1e-4;
    double beta_T = 2e-2;

    TrainPlan train;
    int64_t log_interval = 50;
    int64_t checkpoint_interval = 5000;

    std::string data_clean_dir;
    std::string data_degraded_dir;
    std::string data_kind = "noise";
    DegradeParams degrade;

    bool eval_y_channel = false;
    uint64_t seed = 0;

    DiffusionSchedule make_diffusion_schedule() const {
        return make_schedule(schedule_T, beta_1, beta_T);
    }
};

namespace detail {

struct KeyValue {
    std::string key, value;
    int line = 0;
};

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline std::vector<KeyValue> tokenize_config(const std::string& text,
                                             std::vector<std::string>& errors) {
    std::vector<KeyValue> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            errors.push_back("line " + std::to_string(lineno) + ": expected key = value");
            continue;
        }
        out.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno});
    }
    return out;
}

template <typename F>
void parse_with(const std::string& key, const std::string& value,
                std::vector<std::string>& errors, F&& f) {
    try {
        f(value);
    } catch (const std::exception& e) {
        errors.push_back(key + " = " + value + ": " + e.what());
    }
}

inline int64_t to_int(const std::string& s) {
    size_t pos = 0;
    const int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("not an integer");
    return v;
}

inline double to_double(const std::string& s) {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("not a number");
    return v;
}

inline bool to_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("not a boolean (true|false)");
}

inline std::array<int, 4> to_int4(const std::string& s) {
    std::array<int, 4> out{};
    std::istringstream is(s);
    std::string tok;
    int i = 0;
    while (std::getline(is, tok, ',')) {
        if (i >= 4) throw std::invalid_argument("expected exactly 4 comma-separated integers");
        out[static_cast<size_t>(i++)] = static_cast<int>(to_int(trim(tok)));
    }
    if (i != 4) throw std::invalid_argument("expected exactly 4 comma-separated integers");
    return out;
}

// "32:360,64:96,128:24"
inline std::vector<std::pair<int, int>> to_cycle(const std::string& s) {
    std::vector<std::pair<int, int>> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        const size_t c = tok.find(':');
        if (c == std::string::npos) throw std::invalid_argument("expected patch:batch entries");
        out.emplace_back(static_cast<int>(to_int(trim(tok.substr(0, c)))),
                         static_cast<int>(to_int(trim(tok.substr(c + 1)))));
    }
    if (out.empty()) throw std::invalid_argument("empty patch cycle");
    return out;
}

inline std::string cycle_to_string(const std::vector<std::pair<int, int>>& cycle) {
    std::ostringstream os;
    for (size_t i = 0; i < cycle.size(); ++i)
        os << (i ? "," : "") << cycle[i].first << ":" << cycle[i].second;
    return os.str();
}

// shortest representation that parses back to the same double
inline std::string fmt(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string fmt4(const std::array<int, 4>& a) {
    std::ostringstream os;
    os << a[0] << "," << a[1] << "," << a[2] << "," << a[3];
    return os.str();
}

}  // namespace detail

// Paper patch cycles per task; the stage picks the matching lr range,
// iteration budget and cycle period.
inline void apply_preset(RunConfig& cfg, const std::string& name) {
    auto set_stage_defaults = [&](TrainStage stage) {
        cfg.train.stage = stage;
        if (stage == TrainStage::kCoarse) {
            cfg.train.total_iters = 270000;
            cfg.train.lr_start = 3e-4;
            cfg.train.lr_end = 1e-5;
            cfg.train.patch_cycle.period = 10000;
        } else {
            cfg.train.total_iters = 90000;
            cfg.train.lr_start = 1e-5;
            cfg.train.lr_end = 1e-7;
            cfg.train.patch_cycle.period = 5000;
        }
    };
    if (name == "derain") {
        cfg.train.patch_cycle.entries = cfg.train.stage == TrainStage::kCoarse
                                            ? std::vector<std::pair<int, int>>{{32, 360}, {64, 96}, {128, 24}}
                                            : std::vector<std::pair<int, int>>{{32, 96}, {64, 24}, {128, 6}};
    } else if (name == "deblur" || name == "denoise") {
        cfg.train.patch_cycle.entries = cfg.train.stage == TrainStage::kCoarse
                                            ? std::vector<std::pair<int, int>>{{64, 96}, {128, 24}, {256, 6}}
                                            : std::vector<std::pair<int, int>>{{32, 24}, {64, 6}, {128, 1}};
    } else if (name == "coarse") {
        set_stage_defaults(TrainStage::kCoarse);
        cfg.train.patch_cycle.entries = {{32, 360}, {64, 96}, {128, 24}};
    } else if (name == "fine") {
        set_stage_defaults(TrainStage::kFine);
        cfg.train.patch_cycle.entries = {{32, 96}, {64, 24}, {128, 6}};
    } else if (name == "tiny") {
        // desk-scale model for smoke runs and overfit experiments
        cfg.model.base_channels = 16;
        cfg.model.blocks = {1, 1, 1, 1};
        cfg.model.heads = {1, 2, 4, 8};
        cfg.model.channels = {16, 32, 64, 128};
    } else {
        fail("unknown preset: " + name + " (expected derain|deblur|denoise|coarse|fine|tiny)");
    }
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::vector<std::string> errors;
    auto kvs = detail::tokenize_config(text, errors);

    // the stage key switches the lr/budget/period defaults before any
    // explicit key lands, so partially specified fine configs stay sane
    for (const auto& kv : kvs)
        if (kv.key == "train.stage")
            detail::parse_with(kv.key, kv.value, errors, [&](const std::string& v) {
                apply_preset(cfg, to_string(stage_from_string(v)));
            });
    for (const auto& kv : kvs)
        if (kv.key == "preset")
            detail::parse_with(kv.key, kv.value, errors,
                               [&](const std::string& v) { apply_preset(cfg, v); });

    using detail::parse_with;
    for (const auto& [key, value, line] : kvs) {
        if (key == "preset" || key == "train.stage") continue;
        if (key == "model.base_channels")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.model.base_channels = static_cast<int>(detail::to_int(v));
                for (int i = 0; i < 4; ++i)
                    cfg.model.channels[static_cast<size_t>(i)] = cfg.model.base_channels << i;
            });
        else if (key == "model.blocks")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.model.blocks = detail::to_int4(v); });
        else if (key == "model.heads")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.model.heads = detail::to_int4(v); });
        else if (key == "model.channels")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.model.channels = detail::to_int4(v); });
        else if (key == "model.dfn_expansion")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.model.dfn_expansion = static_cast<int>(detail::to_int(v));
            });
        else if (key == "model.time_embedding")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.model.time_embedding = detail::to_bool(v); });
        else if (key == "schedule.T")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.schedule_T = static_cast<int>(detail::to_int(v));
            });
        else if (key == "schedule.beta_1")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.beta_1 = detail::to_double(v); });
        else if (key == "schedule.beta_T")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.beta_T = detail::to_double(v); });
        else if (key == "train.total_iters")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.total_iters = detail::to_int(v); });
        else if (key == "train.lr_start")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.lr_start = detail::to_double(v); });
        else if (key == "train.lr_end")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.lr_end = detail::to_double(v); });
        else if (key == "train.adam_beta1")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.adam_beta1 = detail::to_double(v); });
        else if (key == "train.adam_beta2")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.adam_beta2 = detail::to_double(v); });
        else if (key == "train.weight_decay")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.weight_decay = detail::to_double(v); });
        else if (key == "train.patch_cycle")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.train.patch_cycle.entries = detail::to_cycle(v);
            });
        else if (key == "train.cycle_period")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.train.patch_cycle.period = detail::to_int(v);
            });
        else if (key == "train.lambda_ssim")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.lambda_ssim = detail::to_double(v); });
        else if (key == "train.sample_steps")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.train.sample_steps = static_cast<int>(detail::to_int(v));
            });
        else if (key == "train.grad_clip")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.grad_clip = detail::to_double(v); });
        else if (key == "train.augment")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.train.augment = detail::to_bool(v); });
        else if (key == "train.log_interval")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.log_interval = detail::to_int(v); });
        else if (key == "train.checkpoint_interval")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.checkpoint_interval = detail::to_int(v); });
        else if (key == "data.clean_dir")
            cfg.data_clean_dir = value;
        else if (key == "data.degraded_dir")
            cfg.data_degraded_dir = value;
        else if (key == "data.kind")
            parse_with(key, value, errors,
                       [&](const std::string& v) { degradation_from_string(v); cfg.data_kind = v; });
        else if (key == "data.noise_sigma")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.degrade.noise_sigma = detail::to_double(v); });
        else if (key == "data.blur_kind")
            cfg.degrade.blur_kind = value;
        else if (key == "data.blur_sigma")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.degrade.blur_sigma = detail::to_double(v); });
        else if (key == "data.blur_ksize")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.blur_ksize = static_cast<int>(detail::to_int(v));
            });
        else if (key == "data.motion_len")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.motion_len = static_cast<int>(detail::to_int(v));
            });
        else if (key == "data.motion_angle")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.motion_angle_deg = detail::to_double(v);
            });
        else if (key == "data.rain_density")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.degrade.rain_density = detail::to_double(v); });
        else if (key == "data.rain_len_min")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.rain_len_min = static_cast<int>(detail::to_int(v));
            });
        else if (key == "data.rain_len_max")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.rain_len_max = static_cast<int>(detail::to_int(v));
            });
        else if (key == "data.rain_angle")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.rain_angle_deg = detail::to_double(v);
            });
        else if (key == "data.rain_intensity_min")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.rain_intensity_min = detail::to_double(v);
            });
        else if (key == "data.rain_intensity_max")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.degrade.rain_intensity_max = detail::to_double(v);
            });
        else if (key == "eval.y_channel")
            parse_with(key, value, errors,
                       [&](const std::string& v) { cfg.eval_y_channel = detail::to_bool(v); });
        else if (key == "seed")
            parse_with(key, value, errors, [&](const std::string& v) {
                cfg.seed = static_cast<uint64_t>(detail::to_int(v));
            });
        else
            errors.push_back("line " + std::to_string(line) + ": unknown key " + key);
    }
    cfg.train.seed = cfg.seed;

    // validation pass: collect every bad field rather than stopping early
    try { cfg.model.validate(); } catch (const Error& e) { errors.push_back(e.what()); }
    try { make_schedule(cfg.schedule_T, cfg.beta_1, cfg.beta_T); } catch (const Error& e) {
        errors.push_back(e.what());
    }
    try { cfg.train.validate(); } catch (const Error& e) { errors.push_back(e.what()); }
    if (cfg.log_interval <= 0) errors.push_back("train.log_interval must be positive");
    if (cfg.checkpoint_interval <= 0) errors.push_back("train.checkpoint_interval must be positive");
    if (cfg.schedule_T < cfg.train.sample_steps)
        errors.push_back("schedule.T must be >= train.sample_steps");

    if (!errors.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errors) msg += "\n  - " + e;
        fail(msg);
    }
    return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

// Canonical round-trippable rendering; defaults reproduce the paper values.
inline std::string serialize_config(const RunConfig& cfg) {
    using detail::fmt;
    std::ostringstream os;
    os << "model.base_channels = " << cfg.model.base_channels << "\n";
    os << "model.blocks = " << detail::fmt4(cfg.model.blocks) << "\n";
    os << "model.heads = " << detail::fmt4(cfg.model.heads) << "\n";
    os << "model.channels = " << detail::fmt4(cfg.model.channels) << "\n";
    os << "model.dfn_expansion = " << cfg.model.dfn_expansion << "\n";
    os << "model.time_embedding = " << (cfg.model.time_embedding ? "true" : "false") << "\n";
    os << "schedule.T = " << cfg.schedule_T << "\n";
    os << "schedule.beta_1 = " << fmt(cfg.beta_1) << "\n";
    os << "schedule.beta_T = " << fmt(cfg.beta_T) << "\n";
    os << "train.stage = " << to_string(cfg.train.stage) << "\n";
    os << "train.total_iters = " << cfg.train.total_iters << "\n";
    os << "train.lr_start = " << fmt(cfg.train.lr_start) << "\n";
    os << "train.lr_end = " << fmt(cfg.train.lr_end) << "\n";
    os << "train.adam_beta1 = " << fmt(cfg.train.adam_beta1) << "\n";
    os << "train.adam_beta2 = " << fmt(cfg.train.adam_beta2) << "\n";
    os << "train.weight_decay = " << fmt(cfg.train.weight_decay) << "\n";
    os << "train.patch_cycle = " << detail::cycle_to_string(cfg.train.patch_cycle.entries) << "\n";
    os << "train.cycle_period = " << cfg.train.patch_cycle.period << "\n";
    os << "train.lambda_ssim = " << fmt(cfg.train.lambda_ssim) << "\n";
    os << "train.sample_steps = " << cfg.train.sample_steps << "\n";
    os << "train.grad_clip = " << fmt(cfg.train.grad_clip) << "\n";
    os << "train.augment = " << (cfg.train.augment ? "true" : "false") << "\n";
    os << "train.log_interval = " << cfg.log_interval << "\n";
    os << "train.checkpoint_interval = " << cfg.checkpoint_interval << "\n";
    if (!cfg.data_clean_dir.empty()) os << "data.clean_dir = " << cfg.data_clean_dir << "\n";
    if (!cfg.data_degraded_dir.empty())
        os << "data.degraded_dir = " << cfg.data_degraded_dir << "\n";
    os << "data.kind = " << cfg.data_kind << "\n";
    os << "data.noise_sigma = " << fmt(cfg.degrade.noise_sigma) << "\n";
    os << "data.blur_kind = " << cfg.degrade.blur_kind << "\n";
    os << "data.blur_sigma = " << fmt(cfg.degrade.blur_sigma) << "\n";
    os << "data.blur_ksize = " << cfg.degrade.blur_ksize << "\n";
    os << "data.motion_len = " << cfg.degrade.motion_len << "\n";
    os << "data.motion_angle = " << fmt(cfg.degrade.motion_angle_deg) << "\n";
    os << "data.rain_density = " << fmt(cfg.degrade.rain_density) << "\n";
    os << "data.rain_len_min = " << cfg.degrade.rain_len_min << "\n";
    os << "data.rain_len_max = " << cfg.degrade.rain_len_max << "\n";
    os << "data.rain_angle = " << fmt(cfg.degrade.rain_angle_deg) << "\n";
    os << "data.rain_intensity_min = " << fmt(cfg.degrade.rain_intensity_min) << "\n";
    os << "data.rain_intensity_max = " << fmt(cfg.degrade.rain_intensity_max) << "\n";
    os << "eval.y_channel = " << (cfg.eval_y_channel ? "true" : "false") << "\n";
    os << "seed = " << cfg.seed << "\n";
    return os.str();
}

}  // namespace c2fdft

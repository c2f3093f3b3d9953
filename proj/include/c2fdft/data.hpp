#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "c2fdft/image_io.hpp"
#include "c2fdft/rng.hpp"

namespace c2fdft {

struct ImagePair {
    TensorF clean;     // (3,H,W) in [0,1]
    TensorF degraded;  // same shape
    std::string id;
};

struct PatchBatch {
    TensorF x;  // clean (B,3,p,p)
    TensorF y;  // degraded (B,3,p,p)
    std::vector<std::string> ids;
    int patch = 0;
};

// Pairs same-named PNGs from two directories in lexicographic order.
// Unpaired files and per-pair size mismatches are hard errors.
inline std::vector<ImagePair> ingest_pairs(const std::string& clean_dir,
                                           const std::string& degraded_dir) {
    namespace fs = std::filesystem;
    require(fs::is_directory(clean_dir), "not a directory: " + clean_dir);
    require(fs::is_directory(degraded_dir), "not a directory: " + degraded_dir);
    std::map<std::string, fs::path> clean, degraded;
    for (const auto& e : fs::directory_iterator(clean_dir))
        if (e.is_regular_file()) clean[e.path().filename().string()] = e.path();
    for (const auto& e : fs::directory_iterator(degraded_dir))
        if (e.is_regular_file()) degraded[e.path().filename().string()] = e.path();
    for (const auto& [name, p] : clean)
        require(degraded.count(name) > 0, "unpaired file (no degraded counterpart): " + name);
    for (const auto& [name, p] : degraded)
        require(clean.count(name) > 0, "unpaired file (no clean counterpart): " + name);

    std::vector<ImagePair> pairs;
    for (const auto& [name, p] : clean) {
        ImagePair pair;
        pair.id = fs::path(name).stem().string();
        pair.clean = read_png(p.string());
        pair.degraded = read_png(degraded[name].string());
        require(pair.clean.same_shape(pair.degraded), "size mismatch within pair: " + name);
        pairs.push_back(std::move(pair));
    }
    if (pairs.empty())
        std::cerr << "c2fdft: warning: no image pairs found in " << clean_dir << "\n";
    return pairs;
}

enum class Degradation { kRain, kBlur, kNoise };

inline Degradation degradation_from_string(const std::string& s) {
    if (s == "rain") return Degradation::kRain;
    if (s == "blur") return Degradation::kBlur;
    if (s == "noise") return Degradation::kNoise;
    fail("unknown degradation kind: " + s + " (expected rain|blur|noise)");
}

inline std::string to_string(Degradation d) {
    switch (d) {
        case Degradation::kRain: return "rain";
        case Degradation::kBlur: return "blur";
        default: return "noise";
    }
}

// Harness defaults; the rain settings visually resemble light synthetic rain
// and are not claims about any benchmark dataset.
struct DegradeParams {
    double noise_sigma = 0.1;

    std::string blur_kind = "gaussian";  // gaussian | motion
    double blur_sigma = 1.6;
    int blur_ksize = 0;  // 0 derives 2*ceil(3 sigma)+1; 1 is the identity kernel
    int motion_len = 9;
    double motion_angle_deg = 0.0;

    double rain_density = 0.02;
    int rain_len_min = 9;
    int rain_len_max = 15;
    double rain_angle_deg = 20.0;  // streak angle drawn from +-this, off vertical
    double rain_intensity_min = 0.3;
    double rain_intensity_max = 0.8;
};

namespace detail {

inline float clip01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

// reflect-padded single-channel convolution with an arbitrary dense kernel
inline void conv_reflect(const float* src, float* dst, int64_t H, int64_t W,
                         const std::vector<float>& kernel, int kh, int kw) {
    const int ch = kh / 2, cw = kw / 2;
    auto reflect = [](int64_t i, int64_t n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
        return i;
    };
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            float acc = 0;
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j) {
                    const int64_t sy = reflect(y + i - ch, H);
                    const int64_t sx = reflect(x + j - cw, W);
                    acc += kernel[static_cast<size_t>(i * kw + j)] * src[sy * W + sx];
                }
            dst[y * W + x] = acc;
        }
}

inline std::vector<float> gaussian_kernel2d(double sigma, int k) {
    std::vector<float> kern(static_cast<size_t>(k) * k, 0.0f);
    if (k == 1 || sigma <= 0.0) {
        kern[static_cast<size_t>((k / 2) * k + k / 2)] = 1.0f;
        return kern;
    }
    const double c = (k - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            const double v = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) /
                                      (2 * sigma * sigma));
            kern[static_cast<size_t>(i * k + j)] = static_cast<float>(v);
            sum += v;
        }
    for (auto& v : kern) v = static_cast<float>(v / sum);
    return kern;
}

// rasterized line kernel of the given length and angle (degrees off vertical)
inline std::vector<float> line_kernel(int len, double angle_deg, int* out_k) {
    const int k = len | 1;  // odd extent so the line is centered
    std::vector<float> kern(static_cast<size_t>(k) * k, 0.0f);
    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    const double dy = std::cos(rad), dx = std::sin(rad);
    const double c = (k - 1) / 2.0;
    int count = 0;
    for (int s = 0; s < len; ++s) {
        const double t = s - (len - 1) / 2.0;
        const int y = static_cast<int>(std::lround(c + t * dy));
        const int x = static_cast<int>(std::lround(c + t * dx));
        if (y >= 0 && y < k && x >= 0 && x < k) {
            float& cell = kern[static_cast<size_t>(y * k + x)];
            if (cell == 0.0f) ++count;
            cell = 1.0f;
        }
    }
    for (auto& v : kern) v /= static_cast<float>(count);
    *out_k = k;
    return kern;
}

}  // namespace detail

// Synthetic degradation, deterministic in the seed.
// rain:  sparse seeded impulses convolved with an oriented line kernel,
//        scaled and added to every channel, clipped
// blur:  gaussian or linear motion kernel, reflect padding
// noise: additive white Gaussian noise of std sigma, clipped
inline TensorF synth_degrade(const TensorF& x, Degradation kind, const DegradeParams& p,
                             uint64_t seed) {
    require(x.rank() == 3 && x.dim(0) == 3, "synth_degrade: (3,H,W) image required");
    const int64_t H = x.dim(1), W = x.dim(2);
    Rng rng(seed);
    TensorF y = x;
    switch (kind) {
        case Degradation::kNoise: {
            require(p.noise_sigma >= 0, "noise sigma must be non-negative");
            if (p.noise_sigma == 0) return y;
            for (int64_t i = 0; i < y.numel(); ++i)
                y[i] = detail::clip01(y[i] + static_cast<float>(p.noise_sigma * rng.normal()));
            return y;
        }
        case Degradation::kBlur: {
            std::vector<float> kern;
            int k = 0;
            if (p.blur_kind == "gaussian") {
                require(p.blur_sigma >= 0, "blur sigma must be non-negative");
                k = p.blur_ksize > 0 ? p.blur_ksize
                                     : 2 * static_cast<int>(std::ceil(3 * p.blur_sigma)) + 1;
                require(k % 2 == 1, "blur kernel size must be odd");
                kern = detail::gaussian_kernel2d(p.blur_sigma, k);
            } else if (p.blur_kind == "motion") {
                require(p.motion_len >= 1, "motion length must be >= 1");
                kern = detail::line_kernel(p.motion_len, p.motion_angle_deg, &k);
            } else {
                fail("unknown blur kind: " + p.blur_kind);
            }
            if (k == 1) return y;  // identity kernel
            std::vector<float> out(static_cast<size_t>(H * W));
            for (int64_t c = 0; c < 3; ++c) {
                detail::conv_reflect(x.data() + c * H * W, out.data(), H, W, kern, k, k);
                for (int64_t i = 0; i < H * W; ++i)
                    y[c * H * W + i] = detail::clip01(out[static_cast<size_t>(i)]);
            }
            return y;
        }
        case Degradation::kRain: {
            require(p.rain_density >= 0 && p.rain_density <= 1, "rain density must be in [0,1]");
            require(p.rain_len_min >= 1 && p.rain_len_max >= p.rain_len_min,
                    "rain length range invalid");
            require(p.rain_intensity_max >= p.rain_intensity_min && p.rain_intensity_min >= 0,
                    "rain intensity range invalid");
            const int len = static_cast<int>(rng.uniform_int(p.rain_len_min, p.rain_len_max));
            const double angle = rng.uniform(-p.rain_angle_deg, p.rain_angle_deg);
            const double intensity = rng.uniform(p.rain_intensity_min, p.rain_intensity_max);
            std::vector<float> impulses(static_cast<size_t>(H * W), 0.0f);
            for (auto& v : impulses)
                if (rng.uniform() < p.rain_density) v = static_cast<float>(rng.uniform());
            int k = 0;
            const auto kern = detail::line_kernel(len, angle, &k);
            std::vector<float> streaks(static_cast<size_t>(H * W));
            detail::conv_reflect(impulses.data(), streaks.data(), H, W, kern, k, k);
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t i = 0; i < H * W; ++i)
                    y[c * H * W + i] = detail::clip01(
                        y[c * H * W + i] +
                        static_cast<float>(intensity) * streaks[static_cast<size_t>(i)] *
                            static_cast<float>(len));
            return y;
        }
    }
    fail("unreachable degradation kind");
}

namespace detail {

inline void hflip3(TensorF& t) {
    const int64_t H = t.dim(1), W = t.dim(2);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W / 2; ++x)
                std::swap(t[(c * H + y) * W + x], t[(c * H + y) * W + (W - 1 - x)]);
}

// counter-clockwise quarter turn of a square image
inline void rot90(TensorF& t) {
    const int64_t n = t.dim(1);
    TensorF out(t.shape());
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x)
                out[(c * n + (n - 1 - x)) * n + y] = t[(c * n + y) * n + x];
    t = std::move(out);
}

}  // namespace detail

// Identical crop window (and identical augmentation, when enabled) applied to
// both sides of the pair.
inline std::pair<TensorF, TensorF> random_patch(const ImagePair& pair, int p, Rng& rng,
                                                bool augment = false) {
    const int64_t H = pair.clean.dim(1), W = pair.clean.dim(2);
    require(H >= p && W >= p, "image " + pair.id + " smaller than patch size");
    const int64_t y0 = rng.uniform_int(0, H - p);
    const int64_t x0 = rng.uniform_int(0, W - p);
    TensorF cx({3, p, p}), cy({3, p, p});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < p; ++y)
            for (int64_t x = 0; x < p; ++x) {
                cx[(c * p + y) * p + x] = pair.clean[(c * H + y0 + y) * W + x0 + x];
                cy[(c * p + y) * p + x] = pair.degraded[(c * H + y0 + y) * W + x0 + x];
            }
    if (augment) {
        if (rng.uniform() < 0.5) {
            detail::hflip3(cx);
            detail::hflip3(cy);
        }
        const int64_t quarter_turns = rng.uniform_int(0, 3);
        for (int64_t k = 0; k < quarter_turns; ++k) {
            detail::rot90(cx);
            detail::rot90(cy);
        }
    }
    return {std::move(cx), std::move(cy)};
}

// On-disk corpus: <root>/clean/<id>.png, <root>/degraded/<id>.png and a
// manifest recording the degradation settings and per-image seeds.
inline void write_corpus(const std::string& root,
                         const std::vector<std::pair<std::string, TensorF>>& images,
                         Degradation kind, const DegradeParams& p, uint64_t seed) {
    namespace fs = std::filesystem;
    require(!images.empty(), "write_corpus: no clean images");
    fs::create_directories(fs::path(root) / "clean");
    fs::create_directories(fs::path(root) / "degraded");
    std::ofstream manifest(fs::path(root) / "manifest.txt");
    require(manifest.good(), "cannot write manifest under " + root);
    manifest << "kind=" << to_string(kind) << " seed=" << seed;
    switch (kind) {
        case Degradation::kNoise: manifest << " sigma=" << p.noise_sigma; break;
        case Degradation::kBlur:
            manifest << " blur_kind=" << p.blur_kind << " blur_sigma=" << p.blur_sigma
                     << " blur_ksize=" << p.blur_ksize << " motion_len=" << p.motion_len
                     << " motion_angle=" << p.motion_angle_deg;
            break;
        case Degradation::kRain:
            manifest << " density=" << p.rain_density << " len=" << p.rain_len_min << ".."
                     << p.rain_len_max << " angle=" << p.rain_angle_deg << " intensity="
                     << p.rain_intensity_min << ".." << p.rain_intensity_max;
            break;
    }
    manifest << "\n";
    for (size_t i = 0; i < images.size(); ++i) {
        const auto& [id, clean] = images[i];
        const uint64_t img_seed = Rng::mix(seed, i);
        TensorF degraded = synth_degrade(clean, kind, p, img_seed);
        write_png((fs::path(root) / "clean" / (id + ".png")).string(), clean);
        write_png((fs::path(root) / "degraded" / (id + ".png")).string(), degraded);
        manifest << id << " seed=" << img_seed << "\n";
    }
}

}  // namespace c2fdft

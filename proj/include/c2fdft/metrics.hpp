#pragma once

#include <filesystem>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>

#include "c2fdft/image_io.hpp"
#include "c2fdft/nn.hpp"
#include "c2fdft/ops.hpp"

namespace c2fdft {

// BT.601 studio-swing luma: Y = (65.481 R + 128.553 G + 24.966 B + 16)/255.
// Out-of-range input is clipped, not rejected.
template <typename T>
Tensor<T> rgb_to_y(const Tensor<T>& img) {
    require(img.rank() == 3 && img.dim(0) == 3, "rgb_to_y: (3,H,W) image required");
    const int64_t plane = img.dim(1) * img.dim(2);
    Tensor<T> y({1, img.dim(1), img.dim(2)});
    for (int64_t i = 0; i < plane; ++i) {
        auto clip = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };
        const double r = clip(img[i]);
        const double g = clip(img[plane + i]);
        const double b = clip(img[2 * plane + i]);
        y[i] = static_cast<T>((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0);
    }
    return y;
}

// 10 log10(max^2 / MSE) in dB; +inf sentinel when the images are identical
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double max_val = 1.0) {
    require(a.same_shape(b), "psnr: shape mismatch");
    require(a.numel() > 0, "psnr: empty image");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_val * max_val / mse);
}

namespace detail {
template <typename T>
std::vector<T> gaussian_window(int size, double sigma) {
    std::vector<T> k(static_cast<size_t>(size));
    const double m = (size - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < size; ++i) {
        const double d = i - m;
        const double v = std::exp(-d * d / (2.0 * sigma * sigma));
        k[static_cast<size_t>(i)] = static_cast<T>(v);
        sum += v;
    }
    for (auto& v : k) v = static_cast<T>(static_cast<double>(v) / sum);
    return k;
}

template <typename T>
Var<T> gaussian_blur_valid(const Var<T>& x, int window, double sigma) {
    const int64_t C = x.shape()[1];
    const auto k1 = gaussian_window<T>(window, sigma);
    Tensor<T> kv({C, 1, window, 1});
    Tensor<T> kh({C, 1, 1, window});
    for (int64_t c = 0; c < C; ++c)
        for (int j = 0; j < window; ++j) {
            kv[c * window + j] = k1[static_cast<size_t>(j)];
            kh[c * window + j] = k1[static_cast<size_t>(j)];
        }
    Var<T> kvv(kv, false), khv(kh, false);
    return dwconv2d(dwconv2d(x, kvv, Var<T>(), 0), khv, Var<T>(), 0);
}
}  // namespace detail

// Differentiable mean SSIM over valid Gaussian windows (sigma 1.5,
// K1=0.01, K2=0.03, dynamic range 1). Inputs (B,C,H,W); channels and batch
// are averaged together.
template <typename T>
Var<T> ssim_var(const Var<T>& a, const Var<T>& b, int window = 11) {
    require(a.value().same_shape(b.value()), "ssim: shape mismatch");
    require(a.shape().size() == 4, "ssim: rank-4 input required");
    require(window >= 3 && window % 2 == 1, "ssim: window must be odd and >= 3");
    require(a.shape()[2] >= window && a.shape()[3] >= window,
            "ssim: image smaller than the window");
    const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    auto blur = [&](const Var<T>& v) { return detail::gaussian_blur_valid(v, window, sigma); };

    Var<T> mu_a = blur(a);
    Var<T> mu_b = blur(b);
    Var<T> mu_aa = mul(mu_a, mu_a);
    Var<T> mu_bb = mul(mu_b, mu_b);
    Var<T> mu_ab = mul(mu_a, mu_b);
    Var<T> sig_aa = sub(blur(mul(a, a)), mu_aa);
    Var<T> sig_bb = sub(blur(mul(b, b)), mu_bb);
    Var<T> sig_ab = sub(blur(mul(a, b)), mu_ab);

    Var<T> num = mul(affine(mu_ab, 2.0, c1), affine(sig_ab, 2.0, c2));
    Var<T> den = mul(affine(add(mu_aa, mu_bb), 1.0, c1), affine(add(sig_aa, sig_bb), 1.0, c2));
    return mean_all(divide(num, den));
}

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, int window = 11) {
    NoGradGuard guard;
    Var<T> av(a.rank() == 3 ? Tensor<T>({1, a.dim(0), a.dim(1), a.dim(2)}, a.vec()) : a, false);
    Var<T> bv(b.rank() == 3 ? Tensor<T>({1, b.dim(0), b.dim(1), b.dim(2)}, b.vec()) : b, false);
    return static_cast<double>(ssim_var(av, bv, window).value()[0]);
}

// largest usable odd window not exceeding `preferred` for an HxW image
inline int ssim_window_for(int64_t h, int64_t w, int preferred = 11) {
    int64_t m = std::min({h, w, static_cast<int64_t>(preferred)});
    if (m % 2 == 0) --m;
    require(m >= 3, "image too small for any SSIM window");
    return static_cast<int>(m);
}

struct EvalRow {
    std::string name;
    double psnr_db = 0;  // +inf when identical
    double ssim = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_psnr = 0;  // over finite rows only
    double mean_ssim = 0;
    int psnr_inf_count = 0;
};

// Pairs same-named images from two directories and scores each pair.
inline EvalReport evaluate_pairs(const std::string& pred_dir, const std::string& gt_dir,
                                 bool y_channel) {
    namespace fs = std::filesystem;
    require(fs::is_directory(pred_dir), "not a directory: " + pred_dir);
    require(fs::is_directory(gt_dir), "not a directory: " + gt_dir);
    std::map<std::string, fs::path> pred, gt;
    for (const auto& e : fs::directory_iterator(pred_dir))
        if (e.is_regular_file()) pred[e.path().filename().string()] = e.path();
    for (const auto& e : fs::directory_iterator(gt_dir))
        if (e.is_regular_file()) gt[e.path().filename().string()] = e.path();
    for (const auto& [name, p] : pred)
        require(gt.count(name) > 0, "unpaired file (missing ground truth): " + name);
    for (const auto& [name, p] : gt)
        require(pred.count(name) > 0, "unpaired file (missing prediction): " + name);

    EvalReport rep;
    double psnr_sum = 0, ssim_sum = 0;
    int finite = 0;
    for (const auto& [name, p] : pred) {
        TensorF a = read_png(p.string());
        TensorF b = read_png(gt[name].string());
        require(a.same_shape(b), "size mismatch for pair: " + name);
        if (y_channel) {
            a = rgb_to_y(a);
            b = rgb_to_y(b);
        }
        EvalRow row;
        row.name = name;
        row.psnr_db = psnr(a, b);
        row.ssim = ssim(a, b);
        if (std::isinf(row.psnr_db)) {
            ++rep.psnr_inf_count;
        } else {
            psnr_sum += row.psnr_db;
            ++finite;
        }
        ssim_sum += row.ssim;
        rep.rows.push_back(std::move(row));
    }
    rep.mean_psnr = finite > 0 ? psnr_sum / finite : 0.0;
    rep.mean_ssim = rep.rows.empty() ? 0.0 : ssim_sum / static_cast<double>(rep.rows.size());
    return rep;
}

inline void write_eval_csv(const EvalReport& rep, std::ostream& os) {
    os << "filename,psnr_db,ssim\n";
    os << std::fixed << std::setprecision(6);
    for (const auto& r : rep.rows) {
        os << r.name << ",";
        if (std::isinf(r.psnr_db))
            os << "inf";
        else
            os << r.psnr_db;
        os << "," << r.ssim << "\n";
    }
    os << "MEAN," << rep.mean_psnr << "," << rep.mean_ssim << "\n";
}

}  // namespace c2fdft

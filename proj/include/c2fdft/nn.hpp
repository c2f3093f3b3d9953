#pragma once

#include <Eigen/Core>

#include <string>

#include "c2fdft/ops.hpp"

namespace c2fdft {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

// (C_in*kh*kw) x (Ho*Wo) patch matrix for one sample, zero padding, stride 1
template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t pad, T* cols) {
    const int64_t Ho = H + 2 * pad - kh + 1;
    const int64_t Wo = W + 2 * pad - kw + 1;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                T* row = cols + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    const int64_t h = ho + ki - pad;
                    if (h < 0 || h >= H) {
                        std::fill_n(row + ho * Wo, Wo, T(0));
                        continue;
                    }
                    const T* src = x + (c * H + h) * W;
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        const int64_t w = wo + kj - pad;
                        row[ho * Wo + wo] = (w >= 0 && w < W) ? src[w] : T(0);
                    }
                }
            }
}

// scatter-add transpose of im2col
template <typename T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t pad, T* x) {
    const int64_t Ho = H + 2 * pad - kh + 1;
    const int64_t Wo = W + 2 * pad - kw + 1;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    const int64_t h = ho + ki - pad;
                    if (h < 0 || h >= H) continue;
                    T* dst = x + (c * H + h) * W;
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        const int64_t w = wo + kj - pad;
                        if (w >= 0 && w < W) dst[w] += row[ho * Wo + wo];
                    }
                }
            }
}

}  // namespace detail

// 2d convolution, stride 1. w: (Cout, Cin, k, k), b: (Cout) or undefined.
// The 1x1/pad-0 case (pointwise conv) skips im2col entirely.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 4 && ws.size() == 4, "conv2d: rank-4 input and weight required");
    require(ws[1] == xs[1], "conv2d: input channels mismatch");
    const int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int64_t Cout = ws[0], kh = ws[2], kw = ws[3];
    const int64_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
    const bool pointwise = (kh == 1 && kw == 1 && pad == 0);
    const bool has_bias = b.defined();
    if (has_bias) require(b.shape() == Shape({Cout}), "conv2d: bias shape mismatch");

    Tensor<T> out({B, Cout, Ho, Wo});
    CMapMat<T> Wm(w.value().data(), Cout, Cin * kh * kw);
    Tensor<T> cols;
    if (!pointwise) cols = Tensor<T>({Cin * kh * kw, Ho * Wo});
    for (int64_t bi = 0; bi < B; ++bi) {
        MapMat<T> Om(out.data() + bi * Cout * Ho * Wo, Cout, Ho * Wo);
        if (pointwise) {
            CMapMat<T> Xm(x.value().data() + bi * Cin * H * W, Cin, H * W);
            Om.noalias() = Wm * Xm;
        } else {
            detail::im2col(x.value().data() + bi * Cin * H * W, Cin, H, W, kh, kw, pad, cols.data());
            CMapMat<T> Cm(cols.data(), Cin * kh * kw, Ho * Wo);
            Om.noalias() = Wm * Cm;
        }
        if (has_bias)
            for (int64_t o = 0; o < Cout; ++o) Om.row(o).array() += b.value()[o];
    }

    std::vector<Var<T>> inputs = has_bias ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    return Var<T>::make(std::move(out), std::move(inputs),
                        [x, w, b, B, Cin, H, W, Cout, kh, kw, pad, Ho, Wo, pointwise,
                         has_bias](Node<T>& self) {
        CMapMat<T> Wm2(w.value().data(), Cout, Cin * kh * kw);
        Tensor<T> cols, dcols;
        if (!pointwise) {
            cols = Tensor<T>({Cin * kh * kw, Ho * Wo});
            dcols = Tensor<T>({Cin * kh * kw, Ho * Wo});
        }
        for (int64_t bi = 0; bi < B; ++bi) {
            CMapMat<T> Gm(self.grad.data() + bi * Cout * Ho * Wo, Cout, Ho * Wo);
            if (has_bias && b.requires_grad()) {
                auto& gb = b.node()->grad_buffer();
                for (int64_t o = 0; o < Cout; ++o) gb[o] += Gm.row(o).sum();
            }
            if (pointwise) {
                CMapMat<T> Xm(x.value().data() + bi * Cin * H * W, Cin, H * W);
                if (w.requires_grad()) {
                    MapMat<T> Gw(w.node()->grad_buffer().data(), Cout, Cin);
                    Gw.noalias() += Gm * Xm.transpose();
                }
                if (x.requires_grad()) {
                    MapMat<T> Gx(x.node()->grad_buffer().data() + bi * Cin * H * W, Cin, H * W);
                    Gx.noalias() += Wm2.transpose() * Gm;
                }
            } else {
                // im2col is recomputed here rather than saved from forward:
                // the graph is alive across an entire unrolled sampling chain,
                // and keeping patch matrices would dominate memory
                if (w.requires_grad()) {
                    detail::im2col(x.value().data() + bi * Cin * H * W, Cin, H, W, kh, kw, pad,
                                   cols.data());
                    CMapMat<T> Cm(cols.data(), Cin * kh * kw, Ho * Wo);
                    MapMat<T> Gw(w.node()->grad_buffer().data(), Cout, Cin * kh * kw);
                    Gw.noalias() += Gm * Cm.transpose();
                }
                if (x.requires_grad()) {
                    MapMat<T> Dc(dcols.data(), Cin * kh * kw, Ho * Wo);
                    Dc.noalias() = Wm2.transpose() * Gm;
                    detail::col2im(dcols.data(), Cin, H, W, kh, kw, pad,
                                   x.node()->grad_buffer().data() + bi * Cin * H * W);
                }
            }
        }
    });
}

// depthwise conv, stride 1. w: (C, 1, k, k), b: (C) or undefined.
template <typename T>
Var<T> dwconv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 4 && ws.size() == 4 && ws[1] == 1, "dwconv2d: bad shapes");
    require(ws[0] == xs[1], "dwconv2d: channel count mismatch");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int64_t kh = ws[2], kw = ws[3];
    const int64_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
    require(Ho >= 1 && Wo >= 1, "dwconv2d: kernel larger than padded input");
    const bool has_bias = b.defined();

    Tensor<T> out({B, C, Ho, Wo});
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t c = 0; c < C; ++c) {
            const T* xp = x.value().data() + (bi * C + c) * H * W;
            const T* wp = w.value().data() + c * kh * kw;
            T* op = out.data() + (bi * C + c) * Ho * Wo;
            const T bias = has_bias ? b.value()[c] : T(0);
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo) {
                    T acc = bias;
                    for (int64_t ki = 0; ki < kh; ++ki) {
                        const int64_t h = ho + ki - pad;
                        if (h < 0 || h >= H) continue;
                        for (int64_t kj = 0; kj < kw; ++kj) {
                            const int64_t ww = wo + kj - pad;
                            if (ww < 0 || ww >= W) continue;
                            acc += wp[ki * kw + kj] * xp[h * W + ww];
                        }
                    }
                    op[ho * Wo + wo] = acc;
                }
        }

    std::vector<Var<T>> inputs = has_bias ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    return Var<T>::make(std::move(out), std::move(inputs),
                        [x, w, b, B, C, H, W, kh, kw, pad, Ho, Wo, has_bias](Node<T>& self) {
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t c = 0; c < C; ++c) {
                const T* g = self.grad.data() + (bi * C + c) * Ho * Wo;
                const T* xp = x.value().data() + (bi * C + c) * H * W;
                const T* wp = w.value().data() + c * kh * kw;
                if (has_bias && b.requires_grad()) {
                    double acc = 0;
                    for (int64_t i = 0; i < Ho * Wo; ++i) acc += static_cast<double>(g[i]);
                    b.node()->grad_buffer()[c] += static_cast<T>(acc);
                }
                T* gw = w.requires_grad() ? w.node()->grad_buffer().data() + c * kh * kw : nullptr;
                T* gx = x.requires_grad()
                            ? x.node()->grad_buffer().data() + (bi * C + c) * H * W
                            : nullptr;
                if (!gw && !gx) continue;
                for (int64_t ho = 0; ho < Ho; ++ho)
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        const T gv = g[ho * Wo + wo];
                        if (gv == T(0)) continue;
                        for (int64_t ki = 0; ki < kh; ++ki) {
                            const int64_t h = ho + ki - pad;
                            if (h < 0 || h >= H) continue;
                            for (int64_t kj = 0; kj < kw; ++kj) {
                                const int64_t ww = wo + kj - pad;
                                if (ww < 0 || ww >= W) continue;
                                if (gw) gw[ki * kw + kj] += gv * xp[h * W + ww];
                                if (gx) gx[h * W + ww] += gv * wp[ki * kw + kj];
                            }
                        }
                    }
            }
    });
}

// x (B,D) * w(O,D)^T + b(O) -> (B,O)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1], "linear: shape mismatch");
    const int64_t B = xs[0], D = xs[1], O = ws[0];
    require(b.shape() == Shape({O}), "linear: bias shape mismatch");
    Tensor<T> out({B, O});
    CMapMat<T> Xm(x.value().data(), B, D);
    CMapMat<T> Wm(w.value().data(), O, D);
    MapMat<T> Om(out.data(), B, O);
    Om.noalias() = Xm * Wm.transpose();
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t o = 0; o < O; ++o) out[bi * O + o] += b.value()[o];
    return Var<T>::make(std::move(out), {x, w, b}, [x, w, b, B, D, O](Node<T>& self) {
        CMapMat<T> Gm(self.grad.data(), B, O);
        if (x.requires_grad()) {
            MapMat<T> Gx(x.node()->grad_buffer().data(), B, D);
            CMapMat<T> Wm2(w.value().data(), O, D);
            Gx.noalias() += Gm * Wm2;
        }
        if (w.requires_grad()) {
            MapMat<T> Gw(w.node()->grad_buffer().data(), O, D);
            CMapMat<T> Xm2(x.value().data(), B, D);
            Gw.noalias() += Gm.transpose() * Xm2;
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->grad_buffer();
            for (int64_t o = 0; o < O; ++o) gb[o] += Gm.col(o).sum();
        }
    });
}

// layer normalization over the channel axis at each spatial site, affine per channel
template <typename T>
Var<T> layernorm_chan(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    const auto& s = x.shape();
    require(s.size() == 4, "layernorm_chan: rank-4 input required");
    const int64_t B = s[0], C = s[1], plane = s[2] * s[3];
    require(gamma.shape() == Shape({C}) && beta.shape() == Shape({C}),
            "layernorm_chan: affine shape mismatch");
    Tensor<T> out(s);
    Tensor<T> mean({B, plane}), rstd({B, plane});
    const auto& xv = x.value();
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t p = 0; p < plane; ++p) {
            const T* xp = xv.data() + bi * C * plane + p;
            double mu = 0;
            for (int64_t c = 0; c < C; ++c) mu += static_cast<double>(xp[c * plane]);
            mu /= static_cast<double>(C);
            double var = 0;
            for (int64_t c = 0; c < C; ++c) {
                const double d = static_cast<double>(xp[c * plane]) - mu;
                var += d * d;
            }
            var /= static_cast<double>(C);
            const double rs = 1.0 / std::sqrt(var + eps);
            mean[bi * plane + p] = static_cast<T>(mu);
            rstd[bi * plane + p] = static_cast<T>(rs);
            T* op = out.data() + bi * C * plane + p;
            for (int64_t c = 0; c < C; ++c)
                op[c * plane] = gamma.value()[c] * static_cast<T>((static_cast<double>(xp[c * plane]) - mu) * rs) +
                                beta.value()[c];
        }
    return Var<T>::make(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, mean, rstd, B, C, plane](Node<T>& self) {
        const auto& xv2 = x.value();
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t p = 0; p < plane; ++p) {
                const T* xp = xv2.data() + bi * C * plane + p;
                const T* gp = self.grad.data() + bi * C * plane + p;
                const double mu = static_cast<double>(mean[bi * plane + p]);
                const double rs = static_cast<double>(rstd[bi * plane + p]);
                double sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int64_t c = 0; c < C; ++c) {
                    const double xhat = (static_cast<double>(xp[c * plane]) - mu) * rs;
                    const double dxhat = static_cast<double>(gp[c * plane]) *
                                         static_cast<double>(gamma.value()[c]);
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gamma.requires_grad())
                        gamma.node()->grad_buffer()[c] += static_cast<T>(
                            static_cast<double>(gp[c * plane]) * xhat);
                    if (beta.requires_grad()) beta.node()->grad_buffer()[c] += gp[c * plane];
                }
                if (!x.requires_grad()) continue;
                T* gx = x.node()->grad_buffer().data() + bi * C * plane + p;
                const double invC = 1.0 / static_cast<double>(C);
                for (int64_t c = 0; c < C; ++c) {
                    const double xhat = (static_cast<double>(xp[c * plane]) - mu) * rs;
                    const double dxhat = static_cast<double>(gp[c * plane]) *
                                         static_cast<double>(gamma.value()[c]);
                    gx[c * plane] += static_cast<T>(
                        rs * (dxhat - invC * sum_dxhat - xhat * invC * sum_dxhat_xhat));
                }
            }
    });
}

// exact (erf-based) GELU
template <typename T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double v = static_cast<double>(xv[i]);
        out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440)));
    }
    return Var<T>::make(std::move(out), {x}, [x](Node<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad_buffer();
        const auto& xv2 = x.value();
        for (int64_t i = 0; i < gx.numel(); ++i) {
            const double v = static_cast<double>(xv2[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
            const double pdf = 0.39894228040143267794 * std::exp(-0.5 * v * v);
            gx[i] += self.grad[i] * static_cast<T>(cdf + v * pdf);
        }
    });
}

namespace detail {

// out[b, c*r*r + i*r + j, h, w] = in[b, c, h*r+i, w*r+j]
template <typename T>
void unshuffle_copy(const T* in, T* out, int64_t B, int64_t C, int64_t H, int64_t W, int64_t r) {
    const int64_t Ho = H / r, Wo = W / r;
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < r; ++j) {
                    const int64_t co = (c * r + i) * r + j;
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        const T* src = in + ((bi * C + c) * H + ho * r + i) * W + j;
                        T* dst = out + ((bi * C * r * r + co) * Ho + ho) * Wo;
                        for (int64_t wo = 0; wo < Wo; ++wo) dst[wo] = src[wo * r];
                    }
                }
}

template <typename T>
void unshuffle_add_back(const T* gout, T* gin, int64_t B, int64_t C, int64_t H, int64_t W,
                        int64_t r) {
    const int64_t Ho = H / r, Wo = W / r;
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < r; ++j) {
                    const int64_t co = (c * r + i) * r + j;
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        T* dst = gin + ((bi * C + c) * H + ho * r + i) * W + j;
                        const T* src = gout + ((bi * C * r * r + co) * Ho + ho) * Wo;
                        for (int64_t wo = 0; wo < Wo; ++wo) dst[wo * r] += src[wo];
                    }
                }
}

}  // namespace detail

// (B,C,H,W) -> (B,C*r^2,H/r,W/r)
template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, int64_t r) {
    const auto& s = x.shape();
    require(s.size() == 4 && s[2] % r == 0 && s[3] % r == 0, "pixel_unshuffle: size not divisible");
    const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    Tensor<T> out({B, C * r * r, H / r, W / r});
    detail::unshuffle_copy(x.value().data(), out.data(), B, C, H, W, r);
    return Var<T>::make(std::move(out), {x}, [x, B, C, H, W, r](Node<T>& self) {
        if (!x.requires_grad()) return;
        detail::unshuffle_add_back(self.grad.data(), x.node()->grad_buffer().data(), B, C, H, W, r);
    });
}

// (B,C,H,W) -> (B,C/r^2,H*r,W*r), inverse of pixel_unshuffle
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int64_t r) {
    const auto& s = x.shape();
    require(s.size() == 4 && s[1] % (r * r) == 0, "pixel_shuffle: channels not divisible");
    const int64_t B = s[0], Co = s[1] / (r * r), Ho = s[2] * r, Wo = s[3] * r;
    Tensor<T> out({B, Co, Ho, Wo});
    // the shuffled image plays the role of "in" in the unshuffle indexing
    const int64_t Hs = s[2], Ws = s[3];
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t c = 0; c < Co; ++c)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < r; ++j) {
                    const int64_t ci = (c * r + i) * r + j;
                    for (int64_t hs = 0; hs < Hs; ++hs) {
                        const T* src = x.value().data() + ((bi * s[1] + ci) * Hs + hs) * Ws;
                        T* dst = out.data() + ((bi * Co + c) * Ho + hs * r + i) * Wo + j;
                        for (int64_t ws = 0; ws < Ws; ++ws) dst[ws * r] = src[ws];
                    }
                }
    const int64_t Cin = s[1];
    return Var<T>::make(std::move(out), {x}, [x, B, Co, Cin, Hs, Ws, Ho, Wo, r](Node<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad_buffer();
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t c = 0; c < Co; ++c)
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < r; ++j) {
                        const int64_t ci = (c * r + i) * r + j;
                        for (int64_t hs = 0; hs < Hs; ++hs) {
                            T* dst = gx.data() + ((bi * Cin + ci) * Hs + hs) * Ws;
                            const T* src = self.grad.data() +
                                           ((bi * Co + c) * Ho + hs * r + i) * Wo + j;
                            for (int64_t ws = 0; ws < Ws; ++ws) dst[ws] += src[ws * r];
                        }
                    }
    });
}

// Records post-softmax row sums of attention matrices when installed.
struct AttnProbe {
    struct Entry {
        std::string label;
        int head = 0;
        double row_sum_min = 0;
        double row_sum_max = 0;
    };
    std::vector<Entry> entries;
    std::string current_label;
};

// Transposed (channel) attention over a pre-split QKV stack.
// qkv: (B, 3C, H, W) laid out as Q | K | V; alpha: per-head temperature (heads,).
// Per head: A = row_softmax((K Q^T) / alpha), out = A^T V with Q,K,V as
// (c x HW) channel-major matrices.
template <typename T>
Var<T> channel_attention(const Var<T>& qkv, const Var<T>& alpha, int64_t heads,
                         AttnProbe* probe = nullptr) {
    const auto& s = qkv.shape();
    require(s.size() == 4 && s[1] % 3 == 0, "channel_attention: qkv must be (B,3C,H,W)");
    const int64_t B = s[0], C = s[1] / 3, n = s[2] * s[3];
    require(C % heads == 0, "channel_attention: channels not divisible by heads");
    require(alpha.shape() == Shape({heads}), "channel_attention: alpha shape mismatch");
    const int64_t c = C / heads;

    Tensor<T> out({B, C, s[2], s[3]});
    Tensor<T> attn({B, heads, c, c});   // post-softmax, saved for backward
    Tensor<T> logits({B, heads, c, c}); // scaled pre-softmax, saved for d(alpha)
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t h = 0; h < heads; ++h) {
            const T* base = qkv.value().data() + bi * 3 * C * n;
            CMapMat<T> Q(base + h * c * n, c, n);
            CMapMat<T> K(base + (C + h * c) * n, c, n);
            CMapMat<T> V(base + (2 * C + h * c) * n, c, n);
            MapMat<T> M(logits.data() + (bi * heads + h) * c * c, c, c);
            M.noalias() = K * Q.transpose();
            M /= alpha.value()[h];
            MapMat<T> A(attn.data() + (bi * heads + h) * c * c, c, c);
            for (int64_t i = 0; i < c; ++i) {
                const T m = M.row(i).maxCoeff();
                double denom = 0;
                for (int64_t j = 0; j < c; ++j) {
                    const double e = std::exp(static_cast<double>(M(i, j) - m));
                    A(i, j) = static_cast<T>(e);
                    denom += e;
                }
                for (int64_t j = 0; j < c; ++j) A(i, j) = static_cast<T>(A(i, j) / denom);
            }
            if (probe) {
                double mn = 2, mx = 0;
                for (int64_t i = 0; i < c; ++i) {
                    double rs = 0;
                    for (int64_t j = 0; j < c; ++j) rs += static_cast<double>(A(i, j));
                    mn = std::min(mn, rs);
                    mx = std::max(mx, rs);
                }
                probe->entries.push_back({probe->current_label, static_cast<int>(h), mn, mx});
            }
            MapMat<T> O(out.data() + (bi * C + h * c) * n, c, n);
            O.noalias() = A.transpose() * V;
        }

    return Var<T>::make(std::move(out), {qkv, alpha},
                        [qkv, alpha, attn, logits, B, C, n, heads, c](Node<T>& self) {
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t h = 0; h < heads; ++h) {
                const T a = alpha.value()[h];
                const T* base = qkv.value().data() + bi * 3 * C * n;
                CMapMat<T> Q(base + h * c * n, c, n);
                CMapMat<T> K(base + (C + h * c) * n, c, n);
                CMapMat<T> V(base + (2 * C + h * c) * n, c, n);
                CMapMat<T> A(attn.data() + (bi * heads + h) * c * c, c, c);
                CMapMat<T> M(logits.data() + (bi * heads + h) * c * c, c, c);
                CMapMat<T> G(self.grad.data() + (bi * C + h * c) * n, c, n);

                RowMat<T> dA(c, c);
                dA.noalias() = V * G.transpose();
                RowMat<T> dM(c, c);
                for (int64_t i = 0; i < c; ++i) {
                    double dot = 0;
                    for (int64_t j = 0; j < c; ++j)
                        dot += static_cast<double>(dA(i, j)) * static_cast<double>(A(i, j));
                    for (int64_t j = 0; j < c; ++j)
                        dM(i, j) = A(i, j) * (dA(i, j) - static_cast<T>(dot));
                }
                if (alpha.requires_grad()) {
                    double da = 0;
                    for (int64_t i = 0; i < c * c; ++i)
                        da += static_cast<double>(dM.data()[i]) * static_cast<double>(M.data()[i]);
                    alpha.node()->grad_buffer()[h] -= static_cast<T>(da / static_cast<double>(a));
                }
                if (qkv.requires_grad()) {
                    T* gbase = qkv.node()->grad_buffer().data() + bi * 3 * C * n;
                    MapMat<T> gQ(gbase + h * c * n, c, n);
                    MapMat<T> gK(gbase + (C + h * c) * n, c, n);
                    MapMat<T> gV(gbase + (2 * C + h * c) * n, c, n);
                    gV.noalias() += A * G;
                    gK.noalias() += (dM * Q) / a;
                    gQ.noalias() += (dM.transpose() * K) / a;
                }
            }
    });
}

}  // namespace c2fdft

#pragma once

#include <cmath>

#include "c2fdft/autodiff.hpp"

namespace c2fdft {

// Elementwise and reduction ops. Backward closures capture the input Vars
// (shared nodes), read self.grad and accumulate into the parents.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require(a.value().same_shape(b.value()), "add: shape mismatch");
    Tensor<T> out = a.value();
    out += b.value();
    return Var<T>::make(std::move(out), {a, b}, [a, b](Node<T>& self) {
        accumulate_grad(*a.node(), self.grad);
        accumulate_grad(*b.node(), self.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require(a.value().same_shape(b.value()), "sub: shape mismatch");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return Var<T>::make(std::move(out), {a, b}, [a, b](Node<T>& self) {
        accumulate_grad(*a.node(), self.grad);
        if (b.requires_grad()) {
            auto& gb = b.node()->grad_buffer();
            for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require(a.value().same_shape(b.value()), "mul: shape mismatch");
    Tensor<T> out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return Var<T>::make(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a.requires_grad()) {
            auto& ga = a.node()->grad_buffer();
            const auto& bv2 = b.value();
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * bv2[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->grad_buffer();
            const auto& av2 = a.value();
            for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += self.grad[i] * av2[i];
        }
    });
}

template <typename T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
    require(a.value().same_shape(b.value()), "divide: shape mismatch");
    Tensor<T> out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] / bv[i];
    return Var<T>::make(std::move(out), {a, b}, [a, b](Node<T>& self) {
        const auto& av2 = a.value();
        const auto& bv2 = b.value();
        if (a.requires_grad()) {
            auto& ga = a.node()->grad_buffer();
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] / bv2[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->grad_buffer();
            for (int64_t i = 0; i < gb.numel(); ++i)
                gb[i] -= self.grad[i] * av2[i] / (bv2[i] * bv2[i]);
        }
    });
}

// k*x + c, scalars applied elementwise
template <typename T>
Var<T> affine(const Var<T>& x, double k, double c) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    const T tk = static_cast<T>(k), tc = static_cast<T>(c);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = tk * xv[i] + tc;
    return Var<T>::make(std::move(out), {x}, [x, tk](Node<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad_buffer();
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += tk * self.grad[i];
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, double k) {
    return affine(x, k, 0.0);
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    const int64_t n = x.numel();
    require(n > 0, "mean_all: empty tensor");
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(x.value().sum() / static_cast<double>(n)));
    return Var<T>::make(std::move(out), {x}, [x, n](Node<T>& self) {
        if (!x.requires_grad()) return;
        const T g = self.grad[0] / static_cast<T>(n);
        auto& gx = x.node()->grad_buffer();
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(x.value().sum()));
    return Var<T>::make(std::move(out), {x}, [x](Node<T>& self) {
        if (!x.requires_grad()) return;
        const T g = self.grad[0];
        auto& gx = x.node()->grad_buffer();
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
}

// mean |a - b|; the 0-point subgradient is 0
template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
    require(a.value().same_shape(b.value()), "l1_loss: shape mismatch");
    const int64_t n = a.numel();
    double acc = 0;
    const auto& av = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i]));
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    return Var<T>::make(std::move(out), {a, b}, [a, b, n](Node<T>& self) {
        const T g = self.grad[0] / static_cast<T>(n);
        const auto& av2 = a.value();
        const auto& bv2 = b.value();
        for (int64_t i = 0; i < n; ++i) {
            const T d = av2[i] - bv2[i];
            const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
            if (a.requires_grad()) a.node()->grad_buffer()[i] += s;
            if (b.requires_grad()) b.node()->grad_buffer()[i] -= s;
        }
    });
}

// fill a tensor of the given shape with a (differentiable) scalar
template <typename T>
Var<T> broadcast_scalar(const Var<T>& s, Shape shape) {
    require(s.numel() == 1, "broadcast_scalar: scalar input required");
    Tensor<T> out = Tensor<T>::full(std::move(shape), s.value()[0]);
    return Var<T>::make(std::move(out), {s}, [s](Node<T>& self) {
        if (!s.requires_grad()) return;
        s.node()->grad_buffer()[0] += static_cast<T>(self.grad.sum());
    });
}

// concatenate along the channel axis of (B,C,H,W)
template <typename T>
Var<T> concat_ch(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    require(sa.size() == 4 && sb.size() == 4, "concat_ch: rank-4 inputs required");
    require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
            "concat_ch: batch/spatial mismatch");
    const int64_t B = sa[0], Ca = sa[1], Cb = sb[1], plane = sa[2] * sa[3];
    Tensor<T> out({B, Ca + Cb, sa[2], sa[3]});
    for (int64_t bi = 0; bi < B; ++bi) {
        std::copy_n(a.value().data() + bi * Ca * plane, Ca * plane,
                    out.data() + bi * (Ca + Cb) * plane);
        std::copy_n(b.value().data() + bi * Cb * plane, Cb * plane,
                    out.data() + (bi * (Ca + Cb) + Ca) * plane);
    }
    return Var<T>::make(std::move(out), {a, b}, [a, b, B, Ca, Cb, plane](Node<T>& self) {
        for (int64_t bi = 0; bi < B; ++bi) {
            const T* g = self.grad.data() + bi * (Ca + Cb) * plane;
            if (a.requires_grad()) {
                T* ga = a.node()->grad_buffer().data() + bi * Ca * plane;
                for (int64_t i = 0; i < Ca * plane; ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                T* gb = b.node()->grad_buffer().data() + bi * Cb * plane;
                for (int64_t i = 0; i < Cb * plane; ++i) gb[i] += g[Ca * plane + i];
            }
        }
    });
}

// channels [c0, c1) of (B,C,H,W)
template <typename T>
Var<T> slice_ch(const Var<T>& x, int64_t c0, int64_t c1) {
    const auto& s = x.shape();
    require(s.size() == 4 && c0 >= 0 && c0 < c1 && c1 <= s[1], "slice_ch: bad channel range");
    const int64_t B = s[0], C = s[1], plane = s[2] * s[3], Cs = c1 - c0;
    Tensor<T> out({B, Cs, s[2], s[3]});
    for (int64_t bi = 0; bi < B; ++bi)
        std::copy_n(x.value().data() + (bi * C + c0) * plane, Cs * plane,
                    out.data() + bi * Cs * plane);
    return Var<T>::make(std::move(out), {x}, [x, B, C, c0, Cs, plane](Node<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad_buffer();
        for (int64_t bi = 0; bi < B; ++bi) {
            T* dst = gx.data() + (bi * C + c0) * plane;
            const T* g = self.grad.data() + bi * Cs * plane;
            for (int64_t i = 0; i < Cs * plane; ++i) dst[i] += g[i];
        }
    });
}

// x (B,C,H,W) + v (B,C) broadcast over space
template <typename T>
Var<T> bcast_add_ch(const Var<T>& x, const Var<T>& v) {
    const auto& s = x.shape();
    require(s.size() == 4, "bcast_add_ch: rank-4 input required");
    require(v.shape() == Shape({s[0], s[1]}), "bcast_add_ch: vector shape mismatch");
    const int64_t B = s[0], C = s[1], plane = s[2] * s[3];
    Tensor<T> out = x.value();
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t c = 0; c < C; ++c) {
            const T a = v.value()[bi * C + c];
            T* p = out.data() + (bi * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) p[i] += a;
        }
    return Var<T>::make(std::move(out), {x, v}, [x, v, B, C, plane](Node<T>& self) {
        accumulate_grad(*x.node(), self.grad);
        if (!v.requires_grad()) return;
        auto& gv = v.node()->grad_buffer();
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t c = 0; c < C; ++c) {
                const T* g = self.grad.data() + (bi * C + c) * plane;
                double acc = 0;
                for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(g[i]);
                gv[bi * C + c] += static_cast<T>(acc);
            }
    });
}

}  // namespace c2fdft

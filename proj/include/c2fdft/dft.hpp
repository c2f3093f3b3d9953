#pragma once

#include <array>
#include <span>
#include <string>

#include "c2fdft/nn.hpp"
#include "c2fdft/ops.hpp"
#include "c2fdft/rng.hpp"

namespace c2fdft {

// Architecture hyperparameters of the noise-prediction Transformer.
struct DftConfig {
    int base_channels = 48;
    std::array<int, 4> blocks{4, 6, 6, 8};
    std::array<int, 4> heads{1, 2, 4, 8};
    std::array<int, 4> channels{48, 96, 192, 384};
    int dfn_expansion = 4;
    int in_channels = 6;  // x_t concatenated with y
    int out_channels = 3;
    bool time_embedding = true;

    int time_base_dim() const { return 4 * base_channels; }

    void validate() const {
        require(base_channels > 0 && base_channels % 2 == 0,
                "model: base_channels must be positive and even");
        for (int i = 0; i < 4; ++i) {
            require(blocks[static_cast<size_t>(i)] > 0, "model: block counts must be positive");
            require(heads[static_cast<size_t>(i)] > 0, "model: head counts must be positive");
            require(channels[static_cast<size_t>(i)] == base_channels << i,
                    "model: channels must double per level starting at base_channels");
            require(channels[static_cast<size_t>(i)] % heads[static_cast<size_t>(i)] == 0,
                    "model: channels not divisible by heads");
        }
        require(2 * channels[0] % heads[0] == 0, "model: decoder level-1 width not divisible");
        require(dfn_expansion >= 1, "model: dfn_expansion must be >= 1");
        require(in_channels == 6 && out_channels == 3, "model: fixed 6-in/3-out interface");
    }
};

// Sinusoidal position encoding of timesteps: (B, dim), sines then cosines.
template <typename T>
Tensor<T> sinusoidal_embedding(std::span<const int> t, int dim) {
    require(dim >= 4 && dim % 2 == 0, "time embedding dim must be even and >= 4");
    const int half = dim / 2;
    Tensor<T> out({static_cast<int64_t>(t.size()), dim});
    for (size_t b = 0; b < t.size(); ++b) {
        require(t[b] >= 0, "time embedding: t must be non-negative");
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / static_cast<double>(half - 1));
            const double arg = static_cast<double>(t[b]) * freq;
            out[static_cast<int64_t>(b) * dim + i] = static_cast<T>(std::sin(arg));
            out[static_cast<int64_t>(b) * dim + half + i] = static_cast<T>(std::cos(arg));
        }
    }
    return out;
}

// Ordered named parameter registry; names are unique and define both the
// optimizer slot order and the checkpoint layout.
template <typename T>
class ParamStore {
public:
    Var<T> create(const std::string& name, Tensor<T> init) {
        for (const auto& [n, v] : items_)
            require(n != name, "duplicate parameter name: " + name);
        items_.emplace_back(name, Var<T>(std::move(init), /*requires_grad=*/true));
        return items_.back().second;
    }

    std::vector<std::pair<std::string, Var<T>>>& items() { return items_; }
    const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }

    Var<T>* find(const std::string& name) {
        for (auto& [n, v] : items_)
            if (n == name) return &v;
        return nullptr;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [name, v] : items_) n += v.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, v] : items_) v.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Var<T>>> items_;
};

namespace detail {

template <typename T>
Tensor<T> fanin_uniform(Rng& rng, Shape shape, int64_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape));
    rng.fill_uniform(t, -bound, bound);
    return t;
}

}  // namespace detail

// Diffusion self-attention: LayerNorm, 1x1 then 3x3 depthwise projections,
// time embedding added before the Q/K/V split, transposed channel attention,
// output projection, residual.
template <typename T>
struct Dfsa {
    Var<T> ln_g, ln_b;
    Var<T> wp_w, wp_b;    // 1x1, C -> 3C
    Var<T> wd_w, wd_b;    // 3x3 depthwise on 3C
    Var<T> alpha;         // per-head temperature
    Var<T> out_w, out_b;  // 1x1, C -> C
    int heads = 1;

    static Dfsa init(ParamStore<T>& ps, const std::string& prefix, int width, int heads, Rng& rng) {
        Dfsa d;
        d.heads = heads;
        d.ln_g = ps.create(prefix + ".ln.g", Tensor<T>::full({width}, T(1)));
        d.ln_b = ps.create(prefix + ".ln.b", Tensor<T>({width}));
        d.wp_w = ps.create(prefix + ".wp.w",
                           detail::fanin_uniform<T>(rng, {3 * width, width, 1, 1}, width));
        d.wp_b = ps.create(prefix + ".wp.b", detail::fanin_uniform<T>(rng, {3 * width}, width));
        d.wd_w = ps.create(prefix + ".wd.w",
                           detail::fanin_uniform<T>(rng, {3 * width, 1, 3, 3}, 9));
        d.wd_b = ps.create(prefix + ".wd.b", detail::fanin_uniform<T>(rng, {3 * width}, 9));
        d.alpha = ps.create(prefix + ".alpha", Tensor<T>::full({heads}, T(1)));
        d.out_w = ps.create(prefix + ".out.w",
                            detail::fanin_uniform<T>(rng, {width, width, 1, 1}, width));
        d.out_b = ps.create(prefix + ".out.b", detail::fanin_uniform<T>(rng, {width}, width));
        return d;
    }

    // t_emb3: (B, 3C) or undefined when time conditioning is disabled
    Var<T> forward(const Var<T>& x, const Var<T>& t_emb3, AttnProbe* probe = nullptr,
                   const std::string& label = {}) const {
        Var<T> h = layernorm_chan(x, ln_g, ln_b);
        h = conv2d(h, wp_w, wp_b, 0);
        h = dwconv2d(h, wd_w, wd_b, 1);
        if (t_emb3.defined()) h = bcast_add_ch(h, t_emb3);
        if (probe) probe->current_label = label;
        h = channel_attention(h, alpha, heads, probe);
        h = conv2d(h, out_w, out_b, 0);
        return add(h, x);
    }
};

// Diffusion feed-forward network: W_p phi(W_p(LN(F) + T)) + F.
template <typename T>
struct Dfn {
    Var<T> ln_g, ln_b;
    Var<T> w1_w, w1_b;  // 1x1, C -> eC
    Var<T> w2_w, w2_b;  // 1x1, eC -> C

    static Dfn init(ParamStore<T>& ps, const std::string& prefix, int width, int expansion,
                    Rng& rng) {
        Dfn d;
        const int hidden = width * expansion;
        d.ln_g = ps.create(prefix + ".ln.g", Tensor<T>::full({width}, T(1)));
        d.ln_b = ps.create(prefix + ".ln.b", Tensor<T>({width}));
        d.w1_w = ps.create(prefix + ".w1.w",
                           detail::fanin_uniform<T>(rng, {hidden, width, 1, 1}, width));
        d.w1_b = ps.create(prefix + ".w1.b", detail::fanin_uniform<T>(rng, {hidden}, width));
        d.w2_w = ps.create(prefix + ".w2.w",
                           detail::fanin_uniform<T>(rng, {width, hidden, 1, 1}, hidden));
        d.w2_b = ps.create(prefix + ".w2.b", detail::fanin_uniform<T>(rng, {width}, hidden));
        return d;
    }

    // t_emb: (B, C) or undefined
    Var<T> forward(const Var<T>& x, const Var<T>& t_emb) const {
        Var<T> h = layernorm_chan(x, ln_g, ln_b);
        if (t_emb.defined()) h = bcast_add_ch(h, t_emb);
        h = conv2d(h, w1_w, w1_b, 0);
        h = gelu(h);
        h = conv2d(h, w2_w, w2_b, 0);
        return add(h, x);
    }
};

template <typename T>
struct Dftb {
    Dfsa<T> dfsa;
    Dfn<T> dfn;

    static Dftb init(ParamStore<T>& ps, const std::string& prefix, int width, int heads,
                     int expansion, Rng& rng) {
        Dftb b;
        b.dfsa = Dfsa<T>::init(ps, prefix + ".dfsa", width, heads, rng);
        b.dfn = Dfn<T>::init(ps, prefix + ".dfn", width, expansion, rng);
        return b;
    }

    Var<T> forward(const Var<T>& x, const Var<T>& t_emb3, const Var<T>& t_emb1,
                   AttnProbe* probe, const std::string& label) const {
        Var<T> h = dfsa.forward(x, t_emb3, probe, label);
        return dfn.forward(h, t_emb1);
    }
};

namespace detail {

template <typename T>
struct ConvPair {
    Var<T> w, b;
    static ConvPair init(ParamStore<T>& ps, const std::string& prefix, int out, int in, int k,
                         Rng& rng) {
        ConvPair c;
        const int64_t fan = static_cast<int64_t>(in) * k * k;
        c.w = ps.create(prefix + ".w", fanin_uniform<T>(rng, {out, in, k, k}, fan));
        c.b = ps.create(prefix + ".b", fanin_uniform<T>(rng, {out}, fan));
        return c;
    }
    static ConvPair zeros(ParamStore<T>& ps, const std::string& prefix, int out, int in, int k) {
        ConvPair c;
        c.w = ps.create(prefix + ".w", Tensor<T>({out, in, k, k}));
        c.b = ps.create(prefix + ".b", Tensor<T>({out}));
        return c;
    }
};

template <typename T>
struct TimeProj {
    Var<T> attn_w, attn_b;  // D -> 3C
    Var<T> dfn_w, dfn_b;    // D -> C
    static TimeProj init(ParamStore<T>& ps, const std::string& prefix, int dim, int width,
                         Rng& rng) {
        TimeProj p;
        p.attn_w = ps.create(prefix + ".time_attn.w", fanin_uniform<T>(rng, {3 * width, dim}, dim));
        p.attn_b = ps.create(prefix + ".time_attn.b", fanin_uniform<T>(rng, {3 * width}, dim));
        p.dfn_w = ps.create(prefix + ".time_dfn.w", fanin_uniform<T>(rng, {width, dim}, dim));
        p.dfn_b = ps.create(prefix + ".time_dfn.b", fanin_uniform<T>(rng, {width}, dim));
        return p;
    }
};

}  // namespace detail

// The noise-prediction network eps_theta(x_t, y, t): a 4-level U-shaped stack
// of diffusion Transformer blocks. Downsampling halves channels with a 1x1
// conv and space-to-depths; upsampling mirrors it. Decoder level 1 runs at 2C
// with no channel reduction after the skip concat. The final 3x3 conv is
// zero-initialized so the untrained model is the identity on x_t.
template <typename T>
class DftModel {
public:
    static constexpr int kStages = 7;  // enc1..enc4 (bottleneck), dec3, dec2, dec1

    explicit DftModel(const DftConfig& cfg, uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const int C = cfg_.base_channels;
        const auto& ch = cfg_.channels;
        stage_width_ = {ch[0], ch[1], ch[2], ch[3], ch[2], ch[1], 2 * ch[0]};
        stage_heads_ = {cfg_.heads[0], cfg_.heads[1], cfg_.heads[2], cfg_.heads[3],
                        cfg_.heads[2], cfg_.heads[1], cfg_.heads[0]};
        stage_blocks_ = {cfg_.blocks[0], cfg_.blocks[1], cfg_.blocks[2], cfg_.blocks[3],
                         cfg_.blocks[2], cfg_.blocks[1], cfg_.blocks[0]};
        static const char* names[kStages] = {"enc1", "enc2", "enc3", "mid",
                                             "dec3", "dec2", "dec1"};

        input_ = detail::ConvPair<T>::init(params_, "input_conv", C, cfg_.in_channels, 3, rng);
        for (int s = 0; s < kStages; ++s) {
            if (cfg_.time_embedding)
                time_[static_cast<size_t>(s)] = detail::TimeProj<T>::init(
                    params_, names[s], cfg_.time_base_dim(), stage_width_[static_cast<size_t>(s)], rng);
            auto& stack = stages_[static_cast<size_t>(s)];
            for (int i = 0; i < stage_blocks_[static_cast<size_t>(s)]; ++i)
                stack.push_back(Dftb<T>::init(params_,
                                              std::string(names[s]) + ".block" + std::to_string(i),
                                              stage_width_[static_cast<size_t>(s)],
                                              stage_heads_[static_cast<size_t>(s)],
                                              cfg_.dfn_expansion, rng));
        }
        for (int i = 0; i < 3; ++i) {
            down_[static_cast<size_t>(i)] = detail::ConvPair<T>::init(
                params_, "down" + std::to_string(i + 1), ch[static_cast<size_t>(i)] / 2,
                ch[static_cast<size_t>(i)], 1, rng);
            up_[static_cast<size_t>(i)] = detail::ConvPair<T>::init(
                params_, "up" + std::to_string(3 - i), 2 * ch[static_cast<size_t>(3 - i)],
                ch[static_cast<size_t>(3 - i)], 1, rng);
        }
        fuse3_ = detail::ConvPair<T>::init(params_, "fuse3", ch[2], 2 * ch[2], 1, rng);
        fuse2_ = detail::ConvPair<T>::init(params_, "fuse2", ch[1], 2 * ch[1], 1, rng);
        output_ = detail::ConvPair<T>::zeros(params_, "output_conv", cfg_.out_channels, 2 * C, 3);
    }

    const DftConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    int64_t parameter_count() const { return params_.parameter_count(); }

    // Projected time embedding for a stage (0..6). width selects between the
    // pre-split DFSA projection (3C) and the DFN one (C); rejects others.
    Var<T> time_embed(std::span<const int> t, int stage, int width) const {
        require(stage >= 0 && stage < kStages, "time_embed: bad stage");
        const int w = stage_width_[static_cast<size_t>(stage)];
        Tensor<T> base = sinusoidal_embedding<T>(t, cfg_.time_base_dim());
        if (!cfg_.time_embedding) return Var<T>(Tensor<T>({static_cast<int64_t>(t.size()), width}));
        const auto& proj = time_[static_cast<size_t>(stage)];
        if (width == 3 * w) return linear(Var<T>(base), proj.attn_w, proj.attn_b);
        if (width == w) return linear(Var<T>(base), proj.dfn_w, proj.dfn_b);
        fail("time_embed: width matches neither the DFSA (3C) nor DFN (C) projection");
    }

    Var<T> forward(const Var<T>& x_t, const Var<T>& y, std::span<const int> t,
                   AttnProbe* probe = nullptr) const {
        const auto& s = x_t.shape();
        require(s.size() == 4 && s[1] == 3, "forward: x_t must be (B,3,H,W)");
        require(x_t.value().same_shape(y.value()), "forward: x_t and y shapes differ");
        require(s[2] % 8 == 0 && s[3] % 8 == 0, "forward: H and W must be divisible by 8");
        require(static_cast<int64_t>(t.size()) == s[0], "forward: one timestep per sample");

        Var<T> f = conv2d(concat_ch(x_t, y), input_.w, input_.b, 1);
        Var<T> e1 = run_stage(f, 0, t, probe);
        Var<T> e2 = run_stage(downsample(e1, 0), 1, t, probe);
        Var<T> e3 = run_stage(downsample(e2, 1), 2, t, probe);
        Var<T> mid = run_stage(downsample(e3, 2), 3, t, probe);
        Var<T> d3 = run_stage(conv2d(concat_ch(upsample(mid, 0), e3), fuse3_.w, fuse3_.b, 0), 4, t,
                              probe);
        Var<T> d2 = run_stage(conv2d(concat_ch(upsample(d3, 1), e2), fuse2_.w, fuse2_.b, 0), 5, t,
                              probe);
        Var<T> d1 = run_stage(concat_ch(upsample(d2, 2), e1), 6, t, probe);
        return add(conv2d(d1, output_.w, output_.b, 1), x_t);
    }

    Var<T> forward(const Tensor<T>& x_t, const Tensor<T>& y, std::span<const int> t,
                   AttnProbe* probe = nullptr) const {
        return forward(Var<T>(x_t), Var<T>(y), t, probe);
    }

private:
    Var<T> run_stage(const Var<T>& x, int stage, std::span<const int> t, AttnProbe* probe) const {
        Var<T> emb3, emb1;
        if (cfg_.time_embedding) {
            const int w = stage_width_[static_cast<size_t>(stage)];
            Var<T> base(sinusoidal_embedding<T>(t, cfg_.time_base_dim()));
            const auto& proj = time_[static_cast<size_t>(stage)];
            emb3 = linear(base, proj.attn_w, proj.attn_b);
            emb1 = linear(base, proj.dfn_w, proj.dfn_b);
        }
        static const char* names[kStages] = {"enc1", "enc2", "enc3", "mid",
                                             "dec3", "dec2", "dec1"};
        Var<T> h = x;
        int i = 0;
        for (const auto& block : stages_[static_cast<size_t>(stage)])
            h = block.forward(h, emb3, emb1, probe,
                              std::string(names[stage]) + ".block" + std::to_string(i++));
        return h;
    }

    Var<T> downsample(const Var<T>& x, int i) const {
        return pixel_unshuffle(conv2d(x, down_[static_cast<size_t>(i)].w,
                                      down_[static_cast<size_t>(i)].b, 0), 2);
    }

    Var<T> upsample(const Var<T>& x, int i) const {
        return pixel_shuffle(conv2d(x, up_[static_cast<size_t>(i)].w,
                                    up_[static_cast<size_t>(i)].b, 0), 2);
    }

    DftConfig cfg_;
    ParamStore<T> params_;
    std::array<int, kStages> stage_width_{};
    std::array<int, kStages> stage_heads_{};
    std::array<int, kStages> stage_blocks_{};
    std::array<std::vector<Dftb<T>>, kStages> stages_;
    std::array<detail::TimeProj<T>, kStages> time_;
    detail::ConvPair<T> input_, fuse3_, fuse2_, output_;
    std::array<detail::ConvPair<T>, 3> down_, up_;
};

// Adapts a model to the sampler's predictor signature (shared t per step).
template <typename T>
auto model_predictor(const DftModel<T>& model) {
    return [&model](const Var<T>& x, const Var<T>& y, int t) {
        std::vector<int> ts(static_cast<size_t>(x.shape()[0]), t);
        return model.forward(x, y, ts);
    };
}

}  // namespace c2fdft

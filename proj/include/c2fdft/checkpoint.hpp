#pragma once

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "c2fdft/dft.hpp"
#include "c2fdft/trainer.hpp"

namespace c2fdft {

// Single-file checkpoint container:
//   magic "C2FDFT\0" | u32 version | u64 len + config text |
//   u64 count + (u32 name len, name, u8 dtype, u8 rank, u64 dims..., payload) |
//   u64 total length | u32 crc32 of everything prior
// All integers and payloads little-endian. Stage, iteration, rng and optimizer
// state travel as reserved "__"-prefixed entries in the same array sequence.
inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[7] = {'C', '2', 'F', 'D', 'F', 'T', '\0'};

enum class DType : uint8_t { kF32 = 0, kF64 = 1, kI64 = 2, kU8 = 3 };

inline size_t dtype_size(DType d) {
    switch (d) {
        case DType::kF32: return 4;
        case DType::kF64: return 8;
        case DType::kI64: return 8;
        case DType::kU8: return 1;
    }
    fail("bad dtype tag");
}

struct NamedArray {
    std::string name;
    DType dtype = DType::kF32;
    Shape dims;
    std::vector<uint8_t> bytes;

    static NamedArray f32(const std::string& name, const TensorF& t) {
        NamedArray a;
        a.name = name;
        a.dtype = DType::kF32;
        a.dims = t.shape();
        a.bytes.resize(static_cast<size_t>(t.numel()) * 4);
        std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
        return a;
    }

    static NamedArray i64(const std::string& name, int64_t v) {
        NamedArray a;
        a.name = name;
        a.dtype = DType::kI64;
        a.dims = {1};
        a.bytes.resize(8);
        std::memcpy(a.bytes.data(), &v, 8);
        return a;
    }

    static NamedArray text(const std::string& name, const std::string& s) {
        NamedArray a;
        a.name = name;
        a.dtype = DType::kU8;
        a.dims = {static_cast<int64_t>(s.size())};
        a.bytes.assign(s.begin(), s.end());
        return a;
    }

    TensorF to_f32() const {
        require(dtype == DType::kF32, name + ": dtype is not f32");
        TensorF t(dims);
        require(bytes.size() == static_cast<size_t>(t.numel()) * 4, name + ": payload size mismatch");
        std::memcpy(t.data(), bytes.data(), bytes.size());
        return t;
    }

    int64_t to_i64() const {
        require(dtype == DType::kI64 && bytes.size() == 8, name + ": not a scalar i64");
        int64_t v = 0;
        std::memcpy(&v, bytes.data(), 8);
        return v;
    }

    std::string to_text() const {
        require(dtype == DType::kU8, name + ": not a text entry");
        return std::string(bytes.begin(), bytes.end());
    }
};

struct Checkpoint {
    uint32_t format_version = kCheckpointVersion;
    std::string config_text;
    std::string stage = "coarse";
    int64_t iteration = 0;
    std::string rng_state;
    std::vector<NamedArray> params;     // "param."-stripped names
    bool has_optimizer = false;
    int64_t opt_step = 0;
    std::vector<NamedArray> opt_m, opt_v;
};

namespace detail {

struct ByteSink {
    std::vector<uint8_t> out;
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void u8(uint8_t v) { raw(&v, 1); }
};

struct ByteSource {
    const std::vector<uint8_t>& in;
    size_t pos = 0;
    void raw(void* p, size_t n) {
        require(pos + n <= in.size(), "checkpoint: unexpected end of file");
        std::memcpy(p, in.data() + pos, n);
        pos += n;
    }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
};

inline void write_array(ByteSink& s, const NamedArray& a) {
    s.u32(static_cast<uint32_t>(a.name.size()));
    s.raw(a.name.data(), a.name.size());
    s.u8(static_cast<uint8_t>(a.dtype));
    s.u8(static_cast<uint8_t>(a.dims.size()));
    uint64_t n = 1;
    for (int64_t d : a.dims) {
        s.u64(static_cast<uint64_t>(d));
        n *= static_cast<uint64_t>(d);
    }
    require(a.bytes.size() == n * dtype_size(a.dtype), a.name + ": payload size mismatch");
    s.raw(a.bytes.data(), a.bytes.size());
}

inline NamedArray read_array(ByteSource& s) {
    NamedArray a;
    const uint32_t name_len = s.u32();
    require(name_len <= 4096, "checkpoint: implausible name length");
    a.name.resize(name_len);
    s.raw(a.name.data(), name_len);
    a.dtype = static_cast<DType>(s.u8());
    require(static_cast<uint8_t>(a.dtype) <= 3, "checkpoint: bad dtype tag");
    const uint8_t rank = s.u8();
    uint64_t n = 1;
    for (int r = 0; r < rank; ++r) {
        const uint64_t d = s.u64();
        a.dims.push_back(static_cast<int64_t>(d));
        n *= d;
    }
    a.bytes.resize(n * dtype_size(a.dtype));
    s.raw(a.bytes.data(), a.bytes.size());
    return a;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    detail::ByteSink s;
    s.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
    s.u32(ck.format_version);
    s.u64(ck.config_text.size());
    s.raw(ck.config_text.data(), ck.config_text.size());

    std::vector<NamedArray> arrays;
    arrays.push_back(NamedArray::text("__meta.stage", ck.stage));
    arrays.push_back(NamedArray::i64("__meta.iteration", ck.iteration));
    arrays.push_back(NamedArray::text("__meta.rng", ck.rng_state));
    for (const auto& p : ck.params) {
        NamedArray a = p;
        a.name = "param." + p.name;
        arrays.push_back(std::move(a));
    }
    if (ck.has_optimizer) {
        arrays.push_back(NamedArray::i64("__opt.step", ck.opt_step));
        for (const auto& m : ck.opt_m) {
            NamedArray a = m;
            a.name = "__opt.m." + m.name;
            arrays.push_back(std::move(a));
        }
        for (const auto& v : ck.opt_v) {
            NamedArray a = v;
            a.name = "__opt.v." + v.name;
            arrays.push_back(std::move(a));
        }
    }
    s.u64(arrays.size());
    for (const auto& a : arrays) detail::write_array(s, a);

    s.u64(s.out.size());  // length of everything before this field
    uint32_t crc = static_cast<uint32_t>(crc32(0L, s.out.data(), static_cast<uInt>(s.out.size())));
    s.u32(crc);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "cannot write checkpoint: " + path);
    f.write(reinterpret_cast<const char*>(s.out.data()), static_cast<std::streamsize>(s.out.size()));
    require(f.good(), "short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint: " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    require(buf.size() >= sizeof(kCheckpointMagic) + 4 + 8 + 8 + 12,
            "checkpoint file truncated: " + path);
    // trailing length + checksum validate the body before any parsing
    uint64_t stored_len = 0;
    uint32_t stored_crc = 0;
    std::memcpy(&stored_len, buf.data() + buf.size() - 12, 8);
    std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
    require(stored_len == buf.size() - 12, "checkpoint length mismatch (truncated?): " + path);
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)));
    require(crc == stored_crc, "checkpoint checksum mismatch (corrupted): " + path);

    detail::ByteSource s{buf};
    char magic[sizeof(kCheckpointMagic)];
    s.raw(magic, sizeof(magic));
    require(std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0,
            "not a checkpoint file: " + path);
    Checkpoint ck;
    ck.format_version = s.u32();
    require(ck.format_version == kCheckpointVersion,
            "unsupported checkpoint format version " + std::to_string(ck.format_version));
    const uint64_t cfg_len = s.u64();
    ck.config_text.resize(cfg_len);
    s.raw(ck.config_text.data(), cfg_len);

    const uint64_t count = s.u64();
    bool saw_stage = false;
    for (uint64_t i = 0; i < count; ++i) {
        NamedArray a = detail::read_array(s);
        if (a.name == "__meta.stage") {
            ck.stage = a.to_text();
            saw_stage = true;
        } else if (a.name == "__meta.iteration") {
            ck.iteration = a.to_i64();
        } else if (a.name == "__meta.rng") {
            ck.rng_state = a.to_text();
        } else if (a.name == "__opt.step") {
            ck.opt_step = a.to_i64();
            ck.has_optimizer = true;
        } else if (a.name.rfind("__opt.m.", 0) == 0) {
            a.name = a.name.substr(8);
            ck.opt_m.push_back(std::move(a));
        } else if (a.name.rfind("__opt.v.", 0) == 0) {
            a.name = a.name.substr(8);
            ck.opt_v.push_back(std::move(a));
        } else if (a.name.rfind("param.", 0) == 0) {
            a.name = a.name.substr(6);
            ck.params.push_back(std::move(a));
        } else {
            fail("checkpoint: unknown entry " + a.name);
        }
    }
    require(saw_stage, "checkpoint: missing stage entry");
    return ck;
}

// Snapshot of model (and optionally optimizer/rng) state.
template <typename T>
Checkpoint make_checkpoint(const DftModel<T>& model, const std::string& config_text,
                           const std::string& stage, int64_t iteration,
                           const std::string& rng_state, AdamW<T>* opt = nullptr) {
    Checkpoint ck;
    ck.config_text = config_text;
    ck.stage = stage;
    ck.iteration = iteration;
    ck.rng_state = rng_state;
    for (const auto& [name, p] : model.params().items())
        ck.params.push_back(NamedArray::f32(name, p.value().template cast<float>()));
    if (opt) {
        ck.has_optimizer = true;
        ck.opt_step = opt->step_count();
        const auto& items = model.params().items();
        for (size_t i = 0; i < items.size(); ++i) {
            ck.opt_m.push_back(NamedArray::f32(items[i].first, opt->m()[i].template cast<float>()));
            ck.opt_v.push_back(NamedArray::f32(items[i].first, opt->v()[i].template cast<float>()));
        }
    }
    return ck;
}

// Restores parameters by name; the name sets must match exactly.
template <typename T>
void load_model_params(DftModel<T>& model, const Checkpoint& ck) {
    require(ck.params.size() == model.params().items().size(),
            "checkpoint: parameter count mismatch with model config");
    for (const auto& a : ck.params) {
        Var<T>* p = model.params().find(a.name);
        require(p != nullptr, "checkpoint: unknown parameter " + a.name);
        TensorF t = a.to_f32();
        require(t.shape() == p->shape(), "checkpoint: shape mismatch for " + a.name);
        p->value() = t.template cast<T>();
    }
}

template <typename T>
void load_optimizer(AdamW<T>& opt, const DftModel<T>& model, const Checkpoint& ck) {
    require(ck.has_optimizer, "checkpoint has no optimizer state");
    opt.set_step_count(ck.opt_step);
    const auto& items = model.params().items();
    auto restore = [&](const std::vector<NamedArray>& src, std::vector<Tensor<T>>& dst) {
        require(src.size() == items.size(), "checkpoint: optimizer slot count mismatch");
        for (const auto& a : src) {
            size_t idx = items.size();
            for (size_t i = 0; i < items.size(); ++i)
                if (items[i].first == a.name) { idx = i; break; }
            require(idx < items.size(), "checkpoint: optimizer slot for unknown parameter " + a.name);
            dst[idx] = a.to_f32().template cast<T>();
        }
    };
    restore(ck.opt_m, opt.m());
    restore(ck.opt_v, opt.v());
}

}  // namespace c2fdft

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "train.hpp"

namespace ismrnn {

// Checkpoint container, version 1.  Little-endian throughout:
//
//   "ISMRNNCK"  8-byte magic
//   u32         format version
//   config      fixed-width fields (see write_config)
//   u64         model seed
//   u32         parameter count
//   per param:  u16 name length, name bytes, u8 rank, u64 dims, f64 data
//   u8          optimizer-state flag
//   if set:     u64 step count, then first/second moments per parameter
//   u64         fnv1a-64 of every preceding byte
//
// Round trips are bitwise: doubles travel as their exact bit patterns.

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

struct ByteWriter {
    std::vector<unsigned char> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), c, c + n);
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        if (s.size() > 0xFFFF) throw FormatError("checkpoint: name too long");
        u16(static_cast<std::uint16_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const unsigned char* p;
    std::size_t left;
    std::string context = "header";

    void raw(void* out, std::size_t n) {
        if (n > left)
            throw FormatError("checkpoint truncated while reading " + context + " (need " +
                              std::to_string(n) + " bytes, have " + std::to_string(left) + ")");
        std::memcpy(out, p, n);
        p += n;
        left -= n;
    }
    std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
    std::uint16_t u16() { std::uint16_t v; raw(&v, 2); return v; }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::string str() {
        std::string s(u16(), '\0');
        raw(s.data(), s.size());
        return s;
    }
};

inline void write_config(ByteWriter& w, const ModelConfig& c) {
    w.u64(c.L);
    w.u64(c.H);
    w.u64(c.C);
    w.u64(c.seg_len);
    w.u64(c.d);
    w.u64(c.d_state);
    w.f64(c.dropout);
    w.u8(c.use_mamba ? 1 : 0);
    w.u8(c.use_implicit_residual ? 1 : 0);
    w.u8(c.use_conv ? 1 : 0);
    w.u64(c.conv_kernel);
    w.u8(c.per_segment_compress ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(c.norm));
    w.u8(static_cast<std::uint8_t>(c.mamba_mode));
}

inline ModelConfig read_config(ByteReader& r) {
    ModelConfig c;
    c.L = r.u64();
    c.H = r.u64();
    c.C = r.u64();
    c.seg_len = r.u64();
    c.d = r.u64();
    c.d_state = r.u64();
    c.dropout = r.f64();
    c.use_mamba = r.u8() != 0;
    c.use_implicit_residual = r.u8() != 0;
    c.use_conv = r.u8() != 0;
    c.conv_kernel = r.u64();
    c.per_segment_compress = r.u8() != 0;
    const std::uint8_t norm = r.u8();
    if (norm > 2) throw FormatError("checkpoint: bad norm kind " + std::to_string(norm));
    c.norm = static_cast<NormKind>(norm);
    const std::uint8_t mode = r.u8();
    if (mode > 1) throw FormatError("checkpoint: bad mamba mode " + std::to_string(mode));
    c.mamba_mode = static_cast<MambaMode>(mode);
    return c;
}

inline bool same_config(const ModelConfig& a, const ModelConfig& b) {
    return a.L == b.L && a.H == b.H && a.C == b.C && a.seg_len == b.seg_len && a.d == b.d &&
           a.d_state == b.d_state && a.use_mamba == b.use_mamba &&
           a.use_implicit_residual == b.use_implicit_residual && a.use_conv == b.use_conv &&
           a.conv_kernel == b.conv_kernel && a.per_segment_compress == b.per_segment_compress &&
           a.norm == b.norm && a.mamba_mode == b.mamba_mode;
}

} // namespace detail

inline constexpr char kCheckpointMagic[8] = {'I', 'S', 'M', 'R', 'N', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const IsmrnnModel& model, std::uint64_t model_seed,
                            const std::string& path, const TrainState* state = nullptr) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 8);
    w.u32(kCheckpointVersion);
    detail::write_config(w, model.config());
    w.u64(model_seed);
    w.u32(static_cast<std::uint32_t>(model.parameters().size()));
    for (const auto& [name, t] : model.parameters()) {
        w.str(name);
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t i = 0; i < t.rank(); ++i) w.u64(t.dim(i));
        for (double v : t.values()) w.f64(v);
    }
    w.u8(state ? 1 : 0);
    if (state) {
        w.u64(state->step);
        for (const auto& mv : state->m)
            for (double v : mv) w.f64(v);
        for (const auto& vv : state->v)
            for (double v : vv) w.f64(v);
    }
    w.u64(fnv1a64(w.bytes.data(), w.bytes.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open checkpoint '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

struct LoadedCheckpoint {
    ModelConfig config;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::vector<double>>> params;
    std::vector<Shape> shapes;
    bool has_state = false;
    TrainState state;
};

inline LoadedCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    const std::streamsize size = in.tellg();
    in.seekg(0);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw DataError("failed reading checkpoint '" + path + "'");

    if (bytes.size() < 8 + 4 + 8)
        throw FormatError("checkpoint '" + path + "' too short to hold a header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw FormatError("checkpoint '" + path + "' has wrong magic bytes");
    const std::uint64_t stored_sum =
        fnv1a64(bytes.data(), bytes.size() - 8);
    std::uint64_t file_sum;
    std::memcpy(&file_sum, bytes.data() + bytes.size() - 8, 8);
    if (stored_sum != file_sum)
        throw FormatError("checkpoint '" + path + "' failed its integrity check");

    detail::ByteReader r{bytes.data() + 8, bytes.size() - 16};
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint '" + path + "' has unsupported version " +
                          std::to_string(version));
    LoadedCheckpoint ck;
    r.context = "config";
    ck.config = detail::read_config(r);
    ck.seed = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        r.context = "parameter " + std::to_string(i);
        std::string name = r.str();
        r.context = "parameter '" + name + "'";
        Shape shape(r.u8());
        std::size_t n = 1;
        for (std::size_t& d : shape) {
            d = r.u64();
            n *= d;
        }
        std::vector<double> vals(n);
        r.raw(vals.data(), n * sizeof(double));
        ck.params.emplace_back(std::move(name), std::move(vals));
        ck.shapes.push_back(std::move(shape));
    }
    r.context = "optimizer state";
    ck.has_state = r.u8() != 0;
    if (ck.has_state) {
        ck.state.step = r.u64();
        for (const auto& [name, vals] : ck.params) {
            std::vector<double> m(vals.size());
            r.raw(m.data(), m.size() * sizeof(double));
            ck.state.m.push_back(std::move(m));
        }
        for (const auto& [name, vals] : ck.params) {
            std::vector<double> v(vals.size());
            r.raw(v.data(), v.size() * sizeof(double));
            ck.state.v.push_back(std::move(v));
        }
    }
    if (r.left != 0)
        throw FormatError("checkpoint '" + path + "' has " + std::to_string(r.left) +
                          " trailing bytes");
    return ck;
}

namespace detail {

inline void apply_checkpoint(const LoadedCheckpoint& ck, const std::string& path,
                             IsmrnnModel& model, TrainState* state_out) {
    if (!same_config(ck.config, model.config()))
        throw ShapeError("checkpoint '" + path + "' was written for a different model config");
    const auto& params = model.parameters();
    if (ck.params.size() != params.size())
        throw ShapeError("checkpoint '" + path + "' holds " + std::to_string(ck.params.size()) +
                         " parameters, model has " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = params[i];
        const auto& [ck_name, ck_vals] = ck.params[i];
        if (ck_name != name)
            throw FormatError("checkpoint '" + path + "' parameter " + std::to_string(i) +
                              " is '" + ck_name + "', expected '" + name + "'");
        if (ck.shapes[i] != t.shape())
            throw ShapeError("checkpoint '" + path + "' parameter '" + name + "' has shape " +
                             shape_str(ck.shapes[i]) + ", model expects " +
                             shape_str(t.shape()));
        Tensor h = t;
        std::copy(ck_vals.begin(), ck_vals.end(), h.values().begin());
    }
    if (state_out) {
        if (!ck.has_state)
            throw FormatError("checkpoint '" + path + "' carries no optimizer state");
        *state_out = ck.state;
    }
}

} // namespace detail

// Restores parameters into an existing model; the configs must agree.
inline void load_checkpoint_into(const std::string& path, IsmrnnModel& model,
                                 TrainState* state_out = nullptr) {
    detail::apply_checkpoint(read_checkpoint(path), path, model, state_out);
}

// Builds a fresh model from the stored config, then restores its weights.
inline IsmrnnModel load_checkpoint(const std::string& path) {
    LoadedCheckpoint ck = read_checkpoint(path);
    IsmrnnModel model(ck.config, ck.seed);
    detail::apply_checkpoint(ck, path, model, nullptr);
    return model;
}

} // namespace ismrnn

#pragma once

// Versioned binary checkpoints: magic "VSSM", format version, model kind and
// hyperparameters, optional optimizer state, named float32 tensors, and a
// trailing CRC-32 of everything before it.

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "vssm/binio.hpp"
#include "vssm/errors.hpp"
#include "vssm/model.hpp"
#include "vssm/params.hpp"
#include "vssm/sampling.hpp"

namespace vssm {

enum class ModelKind : std::uint8_t { vssm = 0, baseline = 1 };

inline constexpr char kCheckpointMagic[4] = {'V', 'S', 'S', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainingState {
    std::uint64_t epoch = 0;  // completed epochs
    std::uint64_t step = 0;   // optimizer steps taken
    double best_score = -INFINITY;
    std::uint64_t best_epoch = 0;
    double lr = 0;
    std::vector<Tensorf> adam_m, adam_v;

    friend bool operator==(const TrainingState&, const TrainingState&) = default;
};

struct Checkpoint {
    ModelKind kind = ModelKind::vssm;
    VssmHyper vssm;
    BaselineHyper baseline;
    ParamStore<float> params;
    std::optional<TrainingState> training;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace detail {

inline void write_tensor(binio::Writer& w, const std::string& name, const Tensorf& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    w.f32s(t.data().data(), t.numel());
}

inline std::pair<std::string, Tensorf> read_tensor(binio::Reader& r) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("tensor " + name + " has implausible rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape.push_back(r.count(0));
        if (shape.back() != 0 && numel > r.remaining() / 4 / shape.back()) r.fail("tensor " + name + " exceeds file size");
        numel *= shape.back();
    }
    Tensorf t(shape);
    r.f32s(t.data().data(), t.numel());
    return {std::move(name), std::move(t)};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    binio::Writer w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u8(static_cast<std::uint8_t>(c.kind));
    if (c.kind == ModelKind::vssm) {
        const auto& h = c.vssm;
        for (std::size_t v : {h.T, h.D, h.Z, h.N, h.width, h.state, h.hidden, h.layers}) w.u64(v);
        w.f64(h.sigma);
        w.f64(h.tau);
    } else {
        const auto& h = c.baseline;
        for (std::size_t v : {h.T, h.D, h.width, h.state, h.hidden, h.layers}) w.u64(v);
        w.f64(h.sigma);
    }
    w.u8(c.training ? 1 : 0);
    if (c.training) {
        const auto& s = *c.training;
        w.u64(s.epoch);
        w.u64(s.step);
        w.f64(s.best_score);
        w.u64(s.best_epoch);
        w.f64(s.lr);
        require(s.adam_m.size() == c.params.size() && s.adam_v.size() == c.params.size(),
                "encode_checkpoint: optimizer moments do not match the parameters");
    }
    w.u32(static_cast<std::uint32_t>(c.params.size()));
    for (std::size_t i = 0; i < c.params.size(); ++i) {
        detail::write_tensor(w, c.params.name(i), c.params[i]);
        if (c.training) {
            detail::write_tensor(w, "adam.m." + c.params.name(i), c.training->adam_m[i]);
            detail::write_tensor(w, "adam.v." + c.params.name(i), c.training->adam_v[i]);
        }
    }
    auto& buf = w.buffer();
    const std::uint32_t crc = crc32_of(buf.data(), buf.size());
    w.u32(crc);
    return std::move(buf);
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
    if (bytes.size() < 4 + 4 + 4) throw FormatError(what + ": too short");
    binio::Reader tail(bytes.data() + bytes.size() - 4, 4, what);
    if (tail.u32() != crc32_of(bytes.data(), bytes.size() - 4)) throw FormatError(what + ": checksum mismatch");
    binio::Reader r(bytes.data(), bytes.size() - 4, what);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) r.fail("bad magic");
    if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));
    Checkpoint c;
    const std::uint8_t kind = r.u8();
    if (kind > 1) r.fail("unknown model kind");
    c.kind = static_cast<ModelKind>(kind);
    if (c.kind == ModelKind::vssm) {
        auto& h = c.vssm;
        for (std::size_t* v : {&h.T, &h.D, &h.Z, &h.N, &h.width, &h.state, &h.hidden, &h.layers}) *v = r.u64();
        h.sigma = r.f64();
        h.tau = r.f64();
    } else {
        auto& h = c.baseline;
        for (std::size_t* v : {&h.T, &h.D, &h.width, &h.state, &h.hidden, &h.layers}) *v = r.u64();
        h.sigma = r.f64();
    }
    if (r.u8() != 0) {
        TrainingState s;
        s.epoch = r.u64();
        s.step = r.u64();
        s.best_score = r.f64();
        s.best_epoch = r.u64();
        s.lr = r.f64();
        c.training = std::move(s);
    }
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        auto [name, t] = detail::read_tensor(r);
        if (c.training) {
            auto m = detail::read_tensor(r), v = detail::read_tensor(r);
            if (m.first != "adam.m." + name || v.first != "adam.v." + name) r.fail("optimizer state out of order");
            c.training->adam_m.push_back(std::move(m.second));
            c.training->adam_v.push_back(std::move(v.second));
        }
        c.params.add(std::move(name), std::move(t));
    }
    if (r.remaining() != 0) r.fail("trailing bytes after tensors");
    return c;
}

/// Writes through a temporary file so an interrupted save never clobbers the previous checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    const auto bytes = encode_checkpoint(c);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("error writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes, path.string());
}

namespace detail {

// Parameters must have exactly the names and shapes a fresh model would.
inline void check_layout(const ParamStore<float>& expected, const ParamStore<float>& got) {
    if (expected.size() != got.size()) throw FormatError("checkpoint parameter count does not match the hyperparameters");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (!got.contains(expected.name(i))) throw FormatError("checkpoint lacks parameter " + expected.name(i));
        if (got.get(expected.name(i)).shape() != expected[i].shape())
            throw FormatError("checkpoint parameter " + expected.name(i) + " has shape " +
                              shape_str(got.get(expected.name(i)).shape()) + ", expected " + shape_str(expected[i].shape()));
    }
}

}  // namespace detail

inline Checkpoint checkpoint_of(const VssmModel<float>& m) { return {ModelKind::vssm, m.hyper, {}, m.params, {}}; }
inline Checkpoint checkpoint_of(const SsmBaseline<float>& b) {
    return {ModelKind::baseline, {}, b.hyper, b.params, {}};
}

inline VssmModel<float> vssm_from(const Checkpoint& c) {
    if (c.kind != ModelKind::vssm) throw FormatError("checkpoint holds a baseline model, not a VSSM");
    VssmModel<float> fresh;
    try {
        fresh = VssmModel<float>::init(c.vssm, 0);
    } catch (const UsageError& e) {
        throw FormatError(std::string("checkpoint hyperparameters are invalid: ") + e.what());
    }
    detail::check_layout(fresh.params, c.params);
    for (std::size_t i = 0; i < fresh.params.size(); ++i) fresh.params[i] = c.params.get(fresh.params.name(i));
    return fresh;
}

inline SsmBaseline<float> baseline_from(const Checkpoint& c) {
    if (c.kind != ModelKind::baseline) throw FormatError("checkpoint holds a VSSM, not a baseline model");
    SsmBaseline<float> fresh;
    try {
        fresh = SsmBaseline<float>::init(c.baseline, 0);
    } catch (const UsageError& e) {
        throw FormatError(std::string("checkpoint hyperparameters are invalid: ") + e.what());
    }
    detail::check_layout(fresh.params, c.params);
    for (std::size_t i = 0; i < fresh.params.size(); ++i) fresh.params[i] = c.params.get(fresh.params.name(i));
    return fresh;
}

}  // namespace vssm

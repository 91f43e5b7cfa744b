#pragma once

// Image datasets viewed as sequences of rows, validation splits, and random
// prompt cuts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vssm/errors.hpp"
#include "vssm/model.hpp"
#include "vssm/rng.hpp"
#include "vssm/sampling.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

struct SequenceDataset {
    std::size_t T = 0, D = 0;
    std::vector<float> values;     // items back to back, each [T, D]
    std::string provenance;        // "mnist", "cifar" or "synthetic"
    std::string normalization;     // how raw values were mapped

    std::size_t size() const { return T * D == 0 ? 0 : values.size() / (T * D); }
    std::span<const float> item(std::size_t i) const {
        require(i < size(), "SequenceDataset: item index out of range");
        return std::span<const float>(values).subspan(i * T * D, T * D);
    }
    Tensorf sequence(std::size_t i) const {
        auto s = item(i);
        return Tensorf(Shape{T, D}, std::vector<float>(s.begin(), s.end()));
    }
    /// Items stacked as [B, T, D].
    Tensorf batch(std::span<const std::size_t> indices) const {
        Tensorf out(Shape{indices.size(), T, D});
        for (std::size_t b = 0; b < indices.size(); ++b) std::ranges::copy(item(indices[b]), out.data().begin() + b * T * D);
        return out;
    }
    SequenceDataset subset(std::span<const std::size_t> indices) const {
        SequenceDataset out{T, D, {}, provenance, normalization};
        out.values.reserve(indices.size() * T * D);
        for (auto i : indices) {
            auto s = item(i);
            out.values.insert(out.values.end(), s.begin(), s.end());
        }
        return out;
    }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("error reading " + path.string());
    return bytes;
}

inline std::uint32_t big_endian_u32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

/// IDX image file -> one sequence of 28 rows per image, bytes scaled by 1/255.
/// `limit` caps the number of images read (0 reads all).
inline SequenceDataset load_mnist(const std::filesystem::path& path, std::size_t limit = 0) {
    const auto bytes = detail::read_file(path);
    if (bytes.size() < 16) throw FormatError(path.string() + ": too short for an IDX header");
    if (detail::big_endian_u32(bytes.data()) != kIdxImageMagic)
        throw FormatError(path.string() + ": bad IDX magic (expected 0x00000803)");
    const std::size_t count = detail::big_endian_u32(bytes.data() + 4);
    const std::size_t rows = detail::big_endian_u32(bytes.data() + 8);
    const std::size_t cols = detail::big_endian_u32(bytes.data() + 12);
    if (rows == 0 || cols == 0) throw FormatError(path.string() + ": empty image dimensions");
    if (bytes.size() != 16 + count * rows * cols)
        throw FormatError(path.string() + ": size does not match " + std::to_string(count) + " images of " +
                          std::to_string(rows) + "x" + std::to_string(cols));
    const std::size_t n = limit == 0 ? count : std::min(count, limit);
    SequenceDataset ds{rows, cols, std::vector<float>(n * rows * cols), "mnist", "byte/255"};
    for (std::size_t i = 0; i < ds.values.size(); ++i) ds.values[i] = float(bytes[16 + i]) / 255.0f;
    return ds;
}

inline constexpr std::size_t kCifarRecord = 3073;

/// CIFAR-10 binary batches -> 32 rows per image; row r holds (R, G, B) of each
/// of its 32 pixels interleaved, so D = 96.
inline SequenceDataset load_cifar(const std::vector<std::filesystem::path>& paths, std::size_t limit = 0) {
    require(!paths.empty(), "load_cifar: no batch files given");
    SequenceDataset ds{32, 96, {}, "cifar", "byte/255"};
    for (const auto& path : paths) {
        const auto bytes = detail::read_file(path);
        if (bytes.empty() || bytes.size() % kCifarRecord != 0)
            throw FormatError(path.string() + ": truncated CIFAR record (records are 3073 bytes)");
        for (std::size_t r = 0; r < bytes.size() / kCifarRecord; ++r) {
            if (limit != 0 && ds.size() == limit) return ds;
            const std::uint8_t* px = bytes.data() + r * kCifarRecord + 1;  // label byte skipped
            for (std::size_t row = 0; row < 32; ++row)
                for (std::size_t col = 0; col < 32; ++col)
                    for (std::size_t ch = 0; ch < 3; ++ch)
                        ds.values.push_back(float(px[ch * 1024 + row * 32 + col]) / 255.0f);
        }
    }
    return ds;
}

/// Inverse of the CIFAR row view: planar 3072-byte image.
inline std::vector<std::uint8_t> cifar_planes(std::span<const float> seq) {
    require(seq.size() == 32 * 96, "cifar_planes: expected a 32 x 96 sequence");
    std::vector<std::uint8_t> out(3072);
    for (std::size_t row = 0; row < 32; ++row)
        for (std::size_t col = 0; col < 32; ++col)
            for (std::size_t ch = 0; ch < 3; ++ch)
                out[ch * 1024 + row * 32 + col] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(seq[row * 96 + col * 3 + ch], 0.f, 1.f) * 255.f));
    return out;
}

/// Deterministic permutation of [0, n) keyed by (rng, role).
inline std::vector<std::size_t> keyed_permutation(std::size_t n, const CounterRng& rng, Role role) {
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
    for (std::size_t i = 0; i < n; ++i) keyed[i] = {rng.bits(role, i), i};
    std::ranges::sort(keyed);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = keyed[i].second;
    return perm;
}

/// Disjoint, exhaustive split with round(fraction * n) validation items.
inline std::pair<SequenceDataset, SequenceDataset> split_train_valid(const SequenceDataset& ds, double fraction,
                                                                     std::uint64_t seed) {
    if (!(fraction > 0 && fraction < 1)) throw UsageError("split_train_valid: fraction must lie in (0, 1)");
    const std::size_t n = ds.size();
    const auto n_valid = static_cast<std::size_t>(std::llround(fraction * double(n)));
    if (n_valid == 0 || n_valid == n) throw UsageError("split_train_valid: split leaves one side empty");
    auto perm = keyed_permutation(n, CounterRng(seed), Role::split);
    std::vector<std::size_t> valid(perm.begin(), perm.begin() + n_valid), train(perm.begin() + n_valid, perm.end());
    std::ranges::sort(valid);
    std::ranges::sort(train);
    return {ds.subset(train), ds.subset(valid)};
}

/// C uniform over {0, ..., T}; the prompt is x_1..C padded with empty tokens.
template <class S>
std::pair<std::size_t, PaddedPrompt<S>> random_cut(const Tensor<S>& x, const CounterRng& rng, std::uint64_t draw) {
    require(x.rank() == 2, "random_cut: x must be [T, D]");
    const std::size_t T = x.dim(0);
    const std::size_t C = static_cast<std::size_t>(rng.below(T + 1, Role::train_cut, draw));
    return {C, make_padded_prompt(x, C, T, x.dim(1))};
}

/// Sequences drawn unconditionally from a known model. Values are the model's
/// samples, not normalized to [0, 1].
inline SequenceDataset synthetic_dataset(const VssmModel<float>& model, std::size_t n, std::uint64_t seed) {
    SequenceDataset ds{model.hyper.T, model.hyper.D, {}, "synthetic", "none"};
    ds.values.reserve(n * ds.T * ds.D);
    const CounterRng root(seed, static_cast<std::uint64_t>(Role::synthetic));
    for (std::size_t i = 0; i < n; ++i) {
        Tensorf x = sample_full(model, Tensorf(), model.hyper.T, root.child(i));
        ds.values.insert(ds.values.end(), x.data().begin(), x.data().end());
    }
    return ds;
}

}  // namespace vssm

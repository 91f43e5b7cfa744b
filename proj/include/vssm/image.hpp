#pragma once

// Sample grids as binary PGM/PPM, plus a raw float container for sequences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vssm/binio.hpp"
#include "vssm/errors.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

struct Image {
    std::size_t width = 0, height = 0, channels = 1;  // 1 = gray, 3 = RGB
    std::vector<std::uint8_t> pixels;                 // row-major, interleaved channels

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return pixels[(y * width + x) * channels + c];
    }
};

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline void write_pnm(const std::filesystem::path& path, const Image& img) {
    require(img.channels == 1 || img.channels == 3, "write_pnm: channels must be 1 or 3");
    require(img.pixels.size() == img.width * img.height * img.channels, "write_pnm: pixel count mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw IoError("error writing " + path.string());
}

inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string magic;
    std::size_t maxval = 0;
    Image img;
    in >> magic >> img.width >> img.height >> maxval;
    if ((magic != "P5" && magic != "P6") || maxval != 255) throw FormatError(path.string() + ": not an 8-bit PGM/PPM");
    in.get();
    img.channels = magic == "P5" ? 1 : 3;
    img.pixels.resize(img.width * img.height * img.channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw FormatError(path.string() + ": truncated pixel data");
    return img;
}

struct GridLayout {
    std::size_t cols = 3;
    std::size_t pad = 2;
    bool rgb_rows = false;  // each row of D = 3 * width values holds interleaved RGB pixels
};

/// Tiles of [T, D] sequences, row t of a tile being sequence position t.
/// Positions before prompt_rows[i] are tinted blue so the prompt stands out.
inline Image sample_grid(const std::vector<Tensorf>& tiles, const std::vector<std::size_t>& prompt_rows,
                         GridLayout layout = {}) {
    require(!tiles.empty(), "sample_grid: no tiles");
    require(prompt_rows.size() == tiles.size(), "sample_grid: one prompt length per tile");
    const std::size_t T = tiles[0].dim(0), D = tiles[0].dim(1);
    if (layout.rgb_rows) require(D % 3 == 0, "sample_grid: RGB rows need D divisible by 3");
    const std::size_t tw = layout.rgb_rows ? D / 3 : D, th = T;
    const std::size_t cols = std::min(layout.cols, tiles.size());
    const std::size_t rows = (tiles.size() + cols - 1) / cols;
    Image img;
    img.channels = 3;
    img.width = cols * tw + (cols + 1) * layout.pad;
    img.height = rows * th + (rows + 1) * layout.pad;
    img.pixels.assign(img.width * img.height * 3, 64);  // gray frame
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        require(tiles[i].rank() == 2 && tiles[i].dim(0) == T && tiles[i].dim(1) == D, "sample_grid: tile shape mismatch");
        const std::size_t x0 = layout.pad + (i % cols) * (tw + layout.pad);
        const std::size_t y0 = layout.pad + (i / cols) * (th + layout.pad);
        for (std::size_t t = 0; t < th; ++t)
            for (std::size_t x = 0; x < tw; ++x) {
                double rgb[3];
                for (std::size_t c = 0; c < 3; ++c)
                    rgb[c] = layout.rgb_rows ? tiles[i][t * D + x * 3 + c] : tiles[i][t * D + x];
                const bool prompt = t < prompt_rows[i];
                img.at(x0 + x, y0 + t, 0) = to_byte(prompt ? 0.6 * rgb[0] : rgb[0]);
                img.at(x0 + x, y0 + t, 1) = to_byte(prompt ? 0.6 * rgb[1] : rgb[1]);
                img.at(x0 + x, y0 + t, 2) = to_byte(prompt ? 0.4 + 0.6 * rgb[2] : rgb[2]);
            }
    }
    return img;
}

inline constexpr char kSequenceMagic[4] = {'V', 'S', 'S', 'Q'};

/// count, T, D, then count * T * D little-endian float32 values.
inline void write_sequences(const std::filesystem::path& path, const std::vector<Tensorf>& seqs) {
    require(!seqs.empty(), "write_sequences: nothing to write");
    binio::Writer w;
    w.bytes(kSequenceMagic, 4);
    w.u64(seqs.size());
    w.u64(seqs[0].dim(0));
    w.u64(seqs[0].dim(1));
    for (const auto& s : seqs) {
        require(s.shape() == seqs[0].shape(), "write_sequences: sequences differ in shape");
        w.f32s(s.data().data(), s.numel());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw IoError("error writing " + path.string());
}

inline std::vector<Tensorf> read_sequences(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    binio::Reader r(bytes.data(), bytes.size(), path.string());
    char magic[4];
    r.bytes(magic, 4);
    if (!std::equal(magic, magic + 4, kSequenceMagic)) r.fail("bad magic");
    const std::size_t n = r.u64(), T = r.u64(), D = r.u64();
    if (T == 0 || D == 0 || n > r.remaining() / 4 / T / D) r.fail("header does not match the file size");
    std::vector<Tensorf> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensorf t(Shape{T, D});
        r.f32s(t.data().data(), t.numel());
        out.push_back(std::move(t));
    }
    if (r.remaining() != 0) r.fail("trailing bytes");
    return out;
}

}  // namespace vssm

#pragma once

// Little-endian binary encoding shared by checkpoints and generation sessions.

#include <bit>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <utility>
#include <string>
#include <vector>

#include "vssm/errors.hpp"

namespace vssm::binio {

class Writer {
   public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <class T>
    void put(T v) {
        static_assert(std::is_integral_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(std::uint64_t(v) >> (8 * i)));
    }
    void u8(std::uint8_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    template <class S>
    void f32s(const S* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f32(static_cast<float>(p[i]));
    }

    std::vector<std::uint8_t>& buffer() { return buf_; }

   private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
   public:
    Reader(const std::uint8_t* data, std::size_t size, std::string what) : p_(data), n_(size), what_(std::move(what)) {}

    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p_ + pos_, n);
        pos_ += n;
    }
    template <class T>
    T get() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(p_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    template <class S>
    void f32s(S* out, std::size_t n) {
        need(n * 4);
        for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<S>(f32());
    }
    /// Element count that must fit in the remaining bytes at `width` bytes each.
    std::size_t count(std::size_t width) {
        const std::uint64_t c = u64();
        if (width != 0 && c > remaining() / width) fail("element count exceeds remaining data");
        return static_cast<std::size_t>(c);
    }

    std::size_t remaining() const { return n_ - pos_; }
    std::size_t position() const { return pos_; }
    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg); }

   private:
    void need(std::size_t k) const {
        if (k > n_ - pos_) fail("truncated data");
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
    std::string what_;
};

}  // namespace vssm::binio

#pragma once

// Counter-based random streams. A draw is a pure function of
// (seed, stream, role, a, b, c), so results never depend on evaluation order,
// chunking, or the number of worker threads.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace vssm {

enum class Role : std::uint64_t {
    latent = 1,      // z_{t,component} category noise during generation
    output = 2,      // x_{t,d} observation noise during generation
    train_gumbel = 3,
    train_cut = 4,
    shuffle = 5,
    eval_latent = 6,
    init = 7,
    split = 8,
    synthetic = 9,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

struct StreamKey {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    friend bool operator==(const StreamKey&, const StreamKey&) = default;
};

class CounterRng {
   public:
    CounterRng() = default;
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : key_{seed, stream} {}
    explicit CounterRng(StreamKey key) : key_(key) {}

    const StreamKey& key() const { return key_; }

    /// Independent stream derived from this one.
    CounterRng child(std::uint64_t index) const {
        return CounterRng(key_.seed, splitmix64(key_.stream ^ splitmix64(index + 0x5851F42D4C957F2Dull)));
    }

    std::uint64_t bits(Role role, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        std::uint64_t h = splitmix64(key_.seed);
        h = splitmix64(h ^ key_.stream);
        h = splitmix64(h ^ static_cast<std::uint64_t>(role));
        h = splitmix64(h ^ a);
        h = splitmix64(h ^ b);
        return splitmix64(h ^ c);
    }

    /// Uniform on the open interval (0, 1).
    double uniform(Role role, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        return (static_cast<double>(bits(role, a, b, c) >> 11) + 0.5) * 0x1.0p-53;
    }

    double gumbel(Role role, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        return -std::log(-std::log(uniform(role, a, b, c)));
    }

    /// Standard normal by Box-Muller; consumes two uniforms keyed by c.
    double normal(Role role, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        const double u1 = uniform(role, a, b, 2 * c);
        const double u2 = uniform(role, a, b, 2 * c + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n, Role role, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        // 128-bit multiply-shift; bias is below 2^-64 * n.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(bits(role, a, b, c)) * n) >> 64);
    }

   private:
    StreamKey key_;
};

}  // namespace vssm

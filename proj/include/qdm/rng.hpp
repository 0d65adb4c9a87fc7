#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "qdm/tensor.hpp"

namespace qdm {

// Counter-based RNG (Philox 4x32-10). Every draw is a pure function of
// (seed, stream, a, b), so sampling is reproducible and independent of any
// evaluation or scheduling order. Diffusion noise keys on (step t, flat site
// index); data synthesis keys on (image index, element index); etc.
enum class Stream : uint64_t {
    forward_noise = 1,
    marginal_noise = 2,
    init_noise = 3,
    reverse_noise = 4,
    synth_layout = 5,
    synth_texture = 6,
    degrade_noise = 7,
    param_init = 8,
    time_draw = 9,
    surrogate = 10,
    generic = 11,
};

namespace detail {

inline void philox_round(std::array<uint32_t, 4>& ctr, std::array<uint32_t, 2>& key) {
    constexpr uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    const uint64_t p0 = static_cast<uint64_t>(M0) * ctr[0];
    const uint64_t p1 = static_cast<uint64_t>(M1) * ctr[2];
    const std::array<uint32_t, 4> next = {
        static_cast<uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
        static_cast<uint32_t>(p1),
        static_cast<uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
        static_cast<uint32_t>(p0),
    };
    ctr = next;
    key[0] += W0;
    key[1] += W1;
}

inline std::array<uint32_t, 4> philox_block(uint64_t key64, uint64_t hi, uint64_t lo) {
    std::array<uint32_t, 4> ctr = {
        static_cast<uint32_t>(lo), static_cast<uint32_t>(lo >> 32),
        static_cast<uint32_t>(hi), static_cast<uint32_t>(hi >> 32)};
    std::array<uint32_t, 2> key = {static_cast<uint32_t>(key64), static_cast<uint32_t>(key64 >> 32)};
    for (int r = 0; r < 10; ++r) philox_round(ctr, key);
    return ctr;
}

inline uint64_t mix_key(uint64_t seed, Stream s) {
    return seed ^ (static_cast<uint64_t>(s) * 0x9E3779B97F4A7C15ull);
}

} // namespace detail

// two independent 64-bit words per (seed, stream, a, b)
inline std::array<uint64_t, 2> rng_words(uint64_t seed, Stream s, uint64_t a, uint64_t b) {
    auto blk = detail::philox_block(detail::mix_key(seed, s), a, b);
    return {(static_cast<uint64_t>(blk[0]) << 32) | blk[1],
            (static_cast<uint64_t>(blk[2]) << 32) | blk[3]};
}

// uniform in (0, 1]
inline double rng_uniform(uint64_t seed, Stream s, uint64_t a, uint64_t b) {
    auto w = rng_words(seed, s, a, b);
    return (static_cast<double>(w[0] >> 11) + 1.0) * 0x1.0p-53;
}

// uniform integer in [lo, hi]
inline int64_t rng_uniform_int(uint64_t seed, Stream s, uint64_t a, uint64_t b, int64_t lo, int64_t hi) {
    auto w = rng_words(seed, s, a, b);
    const uint64_t span = static_cast<uint64_t>(hi - lo + 1);
    return lo + static_cast<int64_t>(w[0] % span);
}

// standard normal via Box-Muller; one value per counter
inline double rng_normal(uint64_t seed, Stream s, uint64_t a, uint64_t b) {
    auto w = rng_words(seed, s, a, b);
    const double u1 = (static_cast<double>(w[0] >> 11) + 1.0) * 0x1.0p-53; // (0,1]
    const double u2 = static_cast<double>(w[1] >> 11) * 0x1.0p-53;         // [0,1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename T>
void fill_normal(TensorT<T>& x, uint64_t seed, Stream s, uint64_t a) {
    for (int64_t i = 0; i < x.numel(); ++i)
        x[i] = static_cast<T>(rng_normal(seed, s, a, static_cast<uint64_t>(i)));
}

template <typename T>
void fill_uniform(TensorT<T>& x, uint64_t seed, Stream s, uint64_t a, double lo, double hi) {
    for (int64_t i = 0; i < x.numel(); ++i)
        x[i] = static_cast<T>(lo + (hi - lo) * rng_uniform(seed, s, a, static_cast<uint64_t>(i)));
}

} // namespace qdm

#pragma once

#include <cstring>

#include "qdm/rng.hpp"
#include "qdm/tensor.hpp"

namespace qdm::test {

template <typename T = float>
TensorT<T> random_image(int64_t B, int64_t C, int64_t H, int64_t W, uint64_t seed, uint64_t idx = 0,
                        double lo = -1.0, double hi = 1.0) {
    TensorT<T> img({B, C, H, W});
    fill_uniform(img, seed, Stream::generic, idx, lo, hi);
    return img;
}

template <typename T>
bool bit_equal(const TensorT<T>& a, const TensorT<T>& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<size_t>(a.numel())) == 0;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double max_rel_diff(const TensorT<T>& a, const TensorT<T>& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double x = a[i], y = b[i];
        m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-12}));
    }
    return m;
}

} // namespace qdm::test

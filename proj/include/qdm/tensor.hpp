#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "qdm/errors.hpp"

namespace qdm {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. Layout for images is (B, C, H, W); model token
// tensors are (batch, tokens, dim). Training/inference run on float, gradient
// checks and fusion accumulation on double.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
        for (int64_t d : shape_) {
            if (d < 1) throw DimensionError("tensor dims must be >= 1, got " + shape_str(shape_));
        }
        data_.assign(static_cast<size_t>(numel_of(shape_)), fill);
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape), T{}); }
    static TensorT full(Shape shape, T v) { return TensorT(std::move(shape), v); }

    static TensorT from_values(Shape shape, std::initializer_list<T> vals) {
        TensorT t(std::move(shape));
        if (static_cast<int64_t>(vals.size()) != t.numel())
            throw DimensionError("from_values: element count mismatch");
        std::copy(vals.begin(), vals.end(), t.data_.begin());
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // rank-4 (B,C,H,W) accessor
    T& at(int64_t b, int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at(int64_t b, int64_t c, int64_t h, int64_t w) const {
        return const_cast<TensorT*>(this)->at(b, c, h, w);
    }
    // rank-3 accessor
    T& at(int64_t a, int64_t b, int64_t c) {
        return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
    }
    const T& at(int64_t a, int64_t b, int64_t c) const {
        return const_cast<TensorT*>(this)->at(a, b, c);
    }
    // rank-2 accessor
    T& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    const T& at(int64_t r, int64_t c) const { return const_cast<TensorT*>(this)->at(r, c); }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    TensorT reshaped(Shape s) const {
        if (numel_of(s) != numel())
            throw DimensionError("reshape: numel mismatch " + shape_str(shape_) + " -> " + shape_str(s));
        TensorT out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return out;
    }

    bool all_finite() const {
        if constexpr (std::is_floating_point_v<T>) {
            for (const T& v : data_)
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;
using MaskBits = TensorT<uint8_t>; // entries in {0,1}

template <typename T>
void check_image4(const TensorT<T>& x, const char* what) {
    if (x.rank() != 4) throw DimensionError(std::string(what) + ": expected rank-4 (B,C,H,W), got " + shape_str(x.shape()));
}

template <typename T>
void require_finite(const TensorT<T>& x, const char* what) {
    if (!x.all_finite()) throw NumericError(std::string(what) + ": non-finite values");
}

// Per-block max over k x k windows; H and W must be divisible by k.
template <typename T>
TensorT<T> max_pool(const TensorT<T>& x, int64_t k) {
    check_image4(x, "max_pool");
    if (k < 1) throw DimensionError("max_pool: kernel must be >= 1");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % k != 0 || W % k != 0)
        throw DimensionError("max_pool: H,W " + shape_str({H, W}) + " not divisible by kernel " + std::to_string(k));
    TensorT<T> out({B, C, H / k, W / k});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < H / k; ++i)
                for (int64_t j = 0; j < W / k; ++j) {
                    T m = x.at(b, c, i * k, j * k);
                    for (int64_t di = 0; di < k; ++di)
                        for (int64_t dj = 0; dj < k; ++dj)
                            m = std::max(m, x.at(b, c, i * k + di, j * k + dj));
                    out.at(b, c, i, j) = m;
                }
    return out;
}

// Source index convention: floor((i + 0.5) * H / Hm), clamped to bounds.
inline int64_t nearest_src_index(int64_t i, int64_t src, int64_t dst) {
    double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst);
    int64_t s = static_cast<int64_t>(std::floor(pos));
    return std::clamp<int64_t>(s, 0, src - 1);
}

template <typename T>
TensorT<T> resize_nearest(const TensorT<T>& x, int64_t Hm, int64_t Wm) {
    check_image4(x, "resize_nearest");
    if (Hm < 1 || Wm < 1) throw DimensionError("resize_nearest: target dims must be >= 1");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> out({B, C, Hm, Wm});
    std::vector<int64_t> si(static_cast<size_t>(Hm)), sj(static_cast<size_t>(Wm));
    for (int64_t i = 0; i < Hm; ++i) si[static_cast<size_t>(i)] = nearest_src_index(i, H, Hm);
    for (int64_t j = 0; j < Wm; ++j) sj[static_cast<size_t>(j)] = nearest_src_index(j, W, Wm);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < Hm; ++i)
                for (int64_t j = 0; j < Wm; ++j)
                    out.at(b, c, i, j) = x.at(b, c, si[static_cast<size_t>(i)], sj[static_cast<size_t>(j)]);
    return out;
}

// Bilinear resize with half-pixel centers: src = (i + 0.5) * H/Hm - 0.5.
template <typename T>
TensorT<T> resize_bilinear(const TensorT<T>& x, int64_t Hm, int64_t Wm) {
    check_image4(x, "resize_bilinear");
    if (Hm < 1 || Wm < 1) throw DimensionError("resize_bilinear: target dims must be >= 1");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> out({B, C, Hm, Wm});
    for (int64_t i = 0; i < Hm; ++i) {
        double sy = (static_cast<double>(i) + 0.5) * static_cast<double>(H) / static_cast<double>(Hm) - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(sy));
        double wy = sy - static_cast<double>(y0);
        int64_t y0c = std::clamp<int64_t>(y0, 0, H - 1), y1c = std::clamp<int64_t>(y0 + 1, 0, H - 1);
        for (int64_t j = 0; j < Wm; ++j) {
            double sx = (static_cast<double>(j) + 0.5) * static_cast<double>(W) / static_cast<double>(Wm) - 0.5;
            int64_t x0 = static_cast<int64_t>(std::floor(sx));
            double wx = sx - static_cast<double>(x0);
            int64_t x0c = std::clamp<int64_t>(x0, 0, W - 1), x1c = std::clamp<int64_t>(x0 + 1, 0, W - 1);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    double v00 = x.at(b, c, y0c, x0c), v01 = x.at(b, c, y0c, x1c);
                    double v10 = x.at(b, c, y1c, x0c), v11 = x.at(b, c, y1c, x1c);
                    double v = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
                    out.at(b, c, i, j) = static_cast<T>(v);
                }
        }
    }
    return out;
}

template <typename T>
TensorT<T> clip(TensorT<T> x, T lo, T hi) {
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = std::clamp(x[i], lo, hi);
    return x;
}

inline bool is_pow2(int64_t v) { return v >= 1 && (v & (v - 1)) == 0; }

inline int64_t ceil_log2(int64_t v) {
    int64_t l = 0;
    int64_t p = 1;
    while (p < v) { p <<= 1; ++l; }
    return l;
}

} // namespace qdm

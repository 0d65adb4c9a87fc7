#include "qdm/metrics.hpp"

#include <cmath>
#include <vector>

namespace qdm {

template <typename T>
double psnr(const TensorT<T>& a, const TensorT<T>& b, double max_val) {
    if (!a.same_shape(b)) throw DimensionError("psnr: shape mismatch");
    if (max_val <= 0) throw ConfigError("psnr: max_val must be > 0");
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return 100.0;
    return 10.0 * std::log10(max_val * max_val / mse);
}

namespace {

std::vector<double> gaussian_kernel_1d(int window, double sigma) {
    std::vector<double> k(static_cast<size_t>(window));
    const double c = (window - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < window; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// separable Gaussian filter, valid positions only: (H, W) -> (H-w+1, W-w+1)
void filter_valid(const std::vector<double>& img, int64_t H, int64_t W,
                  const std::vector<double>& k, std::vector<double>& out) {
    const int64_t w = static_cast<int64_t>(k.size());
    const int64_t Ho = H - w + 1, Wo = W - w + 1;
    std::vector<double> tmp(static_cast<size_t>(H * Wo));
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < Wo; ++j) {
            double s = 0.0;
            for (int64_t d = 0; d < w; ++d) s += k[static_cast<size_t>(d)] * img[static_cast<size_t>(i * W + j + d)];
            tmp[static_cast<size_t>(i * Wo + j)] = s;
        }
    out.assign(static_cast<size_t>(Ho * Wo), 0.0);
    for (int64_t i = 0; i < Ho; ++i)
        for (int64_t j = 0; j < Wo; ++j) {
            double s = 0.0;
            for (int64_t d = 0; d < w; ++d) s += k[static_cast<size_t>(d)] * tmp[static_cast<size_t>((i + d) * Wo + j)];
            out[static_cast<size_t>(i * Wo + j)] = s;
        }
}

} // namespace

template <typename T>
double ssim(const TensorT<T>& a, const TensorT<T>& b, double max_val, int window) {
    if (!a.same_shape(b)) throw DimensionError("ssim: shape mismatch");
    check_image4(a, "ssim");
    if (max_val <= 0) throw ConfigError("ssim: max_val must be > 0");
    const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    if (H < window || W < window) throw DimensionError("ssim: image smaller than window");

    const double c1 = (0.01 * max_val) * (0.01 * max_val);
    const double c2 = (0.03 * max_val) * (0.03 * max_val);
    const auto kern = gaussian_kernel_1d(window, 1.5);
    const int64_t Ho = H - window + 1, Wo = W - window + 1;

    double total = 0.0;
    std::vector<double> pa(static_cast<size_t>(H * W)), pb(static_cast<size_t>(H * W));
    std::vector<double> paa(pa.size()), pbb(pa.size()), pab(pa.size());
    std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t ci = 0; ci < C; ++ci) {
            for (int64_t i = 0; i < H * W; ++i) {
                const double va = a[(bi * C + ci) * H * W + i];
                const double vb = b[(bi * C + ci) * H * W + i];
                pa[static_cast<size_t>(i)] = va;
                pb[static_cast<size_t>(i)] = vb;
                paa[static_cast<size_t>(i)] = va * va;
                pbb[static_cast<size_t>(i)] = vb * vb;
                pab[static_cast<size_t>(i)] = va * vb;
            }
            filter_valid(pa, H, W, kern, mu_a);
            filter_valid(pb, H, W, kern, mu_b);
            filter_valid(paa, H, W, kern, m_aa);
            filter_valid(pbb, H, W, kern, m_bb);
            filter_valid(pab, H, W, kern, m_ab);
            double acc = 0.0;
            for (int64_t i = 0; i < Ho * Wo; ++i) {
                const double ma = mu_a[static_cast<size_t>(i)], mb = mu_b[static_cast<size_t>(i)];
                const double va = m_aa[static_cast<size_t>(i)] - ma * ma;
                const double vb = m_bb[static_cast<size_t>(i)] - mb * mb;
                const double cov = m_ab[static_cast<size_t>(i)] - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += acc / static_cast<double>(Ho * Wo);
        }
    return total / static_cast<double>(B * C);
}

template <typename T>
TensorT<T> to_luma(const TensorT<T>& img) {
    check_image4(img, "to_luma");
    const int64_t B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
    if (C == 1) return img;
    if (C != 3) throw DimensionError("to_luma: expected 1 or 3 channels");
    TensorT<T> out({B, 1, H, W});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
                out.at(b, 0, i, j) = static_cast<T>(0.299 * img.at(b, 0, i, j) +
                                                    0.587 * img.at(b, 1, i, j) +
                                                    0.114 * img.at(b, 2, i, j));
    return out;
}

template double psnr<float>(const TensorT<float>&, const TensorT<float>&, double);
template double psnr<double>(const TensorT<double>&, const TensorT<double>&, double);
template double ssim<float>(const TensorT<float>&, const TensorT<float>&, double, int);
template double ssim<double>(const TensorT<double>&, const TensorT<double>&, double, int);
template TensorT<float> to_luma<float>(const TensorT<float>&);
template TensorT<double> to_luma<double>(const TensorT<double>&);

} // namespace qdm

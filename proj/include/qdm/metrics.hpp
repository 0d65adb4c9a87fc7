#pragma once

#include "qdm/tensor.hpp"

namespace qdm {

struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    int n_images = 0;
};

// 10*log10(max_val^2 / MSE); identical inputs are capped at 100 dB.
template <typename T>
double psnr(const TensorT<T>& a, const TensorT<T>& b, double max_val);

// Mean of the local SSIM map with Gaussian-weighted statistics (11x11 window,
// sigma 1.5, C1=(0.01*max)^2, C2=(0.03*max)^2), valid positions only,
// averaged over channels. Requires H, W >= window.
template <typename T>
double ssim(const TensorT<T>& a, const TensorT<T>& b, double max_val, int window = 11);

// BT.601 luma from an RGB image; grayscale passes through unchanged.
template <typename T>
TensorT<T> to_luma(const TensorT<T>& img);

} // namespace qdm

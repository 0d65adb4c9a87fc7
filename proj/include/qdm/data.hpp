#pragma once

#include <cstdint>

#include "qdm/tensor.hpp"

namespace qdm {

// Synthetic desk-scale dataset: piecewise-constant backgrounds with a few
// texture-filled shapes, degraded to LR by box downsampling plus noise.
struct SynthSpec {
    int64_t size = 32;       // HR side, power of two
    int n_shapes = 3;
    double texture_amp = 0.6;
    double noise_sigma = 0.05; // degradation noise std in [-1,1] units
    int scale = 4;             // SR factor

    void validate() const;
};

// HR sample: flat background regions plus n_shapes rectangles/discs filled
// with high-frequency texture of amplitude texture_amp, clipped to [-1,1].
// Deterministic in (spec, seed, index).
Tensor synth_hr(const SynthSpec& spec, uint64_t seed, uint64_t index = 0);

// box-filter downsample by spec.scale, then Gaussian noise, clip to [-1,1]
Tensor degrade(const Tensor& hr, const SynthSpec& spec, uint64_t seed, uint64_t index = 0);

// bilinear upsample of the LR image back to the HR grid; this is the Y_0
// consumed by the diffusion operators
Tensor upsample_lr(const Tensor& lr, int scale);

struct TrainPair {
    Tensor hr;    // X_0
    Tensor lr;
    Tensor y0_up; // Y_0 on the HR grid
};

TrainPair make_pair(const SynthSpec& spec, uint64_t seed, uint64_t index);

} // namespace qdm

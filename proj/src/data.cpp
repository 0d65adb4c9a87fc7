#include "qdm/data.hpp"

#include <cmath>

#include "qdm/rng.hpp"

namespace qdm {

void SynthSpec::validate() const {
    if (!is_pow2(size)) throw ConfigError("SynthSpec: size must be a power of two");
    if (scale != 2 && scale != 4 && scale != 8)
        throw ConfigError("SynthSpec: scale must be one of {2,4,8}");
    if (size % scale != 0) throw ConfigError("SynthSpec: size must be divisible by scale");
    if (n_shapes < 0 || texture_amp < 0 || noise_sigma < 0)
        throw ConfigError("SynthSpec: negative parameter");
}

Tensor synth_hr(const SynthSpec& spec, uint64_t seed, uint64_t index) {
    spec.validate();
    const int64_t N = spec.size;
    Tensor img({1, 1, N, N});

    // background: 2-4 horizontal/vertical bands of constant intensity
    auto u = [&](uint64_t slot) { return rng_uniform(seed, Stream::synth_layout, index, slot); };
    const int bands = 2 + static_cast<int>(rng_uniform_int(seed, Stream::synth_layout, index, 1000, 0, 2));
    const bool horizontal = u(1001) < 0.5;
    std::vector<int64_t> cuts;
    for (int bnd = 1; bnd < bands; ++bnd)
        cuts.push_back(static_cast<int64_t>(u(1002 + static_cast<uint64_t>(bnd)) * static_cast<double>(N - 1)) + 1);
    std::sort(cuts.begin(), cuts.end());
    std::vector<double> levels;
    for (int bnd = 0; bnd < bands; ++bnd)
        levels.push_back(-0.8 + 1.6 * u(1100 + static_cast<uint64_t>(bnd)));
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < N; ++j) {
            const int64_t pos = horizontal ? i : j;
            size_t band = 0;
            while (band < cuts.size() && pos >= cuts[band]) ++band;
            img.at(0, 0, i, j) = static_cast<float>(levels[band]);
        }

    // textured shapes: rectangles or discs carrying per-pixel noise
    for (int sh = 0; sh < spec.n_shapes; ++sh) {
        const uint64_t base = 2000 + 16 * static_cast<uint64_t>(sh);
        const bool disc = u(base) < 0.5;
        const int64_t half = std::max<int64_t>(2, static_cast<int64_t>((0.08 + 0.17 * u(base + 1)) * static_cast<double>(N)));
        const int64_t cy = static_cast<int64_t>(u(base + 2) * static_cast<double>(N));
        const int64_t cx = static_cast<int64_t>(u(base + 3) * static_cast<double>(N));
        const double fill = -0.6 + 1.2 * u(base + 4);
        for (int64_t i = std::max<int64_t>(0, cy - half); i < std::min(N, cy + half); ++i)
            for (int64_t j = std::max<int64_t>(0, cx - half); j < std::min(N, cx + half); ++j) {
                if (disc) {
                    const int64_t dy = i - cy, dx = j - cx;
                    if (dy * dy + dx * dx > half * half) continue;
                }
                const uint64_t site = static_cast<uint64_t>(i * N + j);
                const double tex = spec.texture_amp *
                    (rng_uniform(seed, Stream::synth_texture, index * 64 + static_cast<uint64_t>(sh), site) - 0.5) * 2.0;
                img.at(0, 0, i, j) = static_cast<float>(fill + tex);
            }
    }
    return clip(std::move(img), -1.0f, 1.0f);
}

Tensor degrade(const Tensor& hr, const SynthSpec& spec, uint64_t seed, uint64_t index) {
    check_image4(hr, "degrade");
    const int64_t B = hr.dim(0), C = hr.dim(1), H = hr.dim(2), W = hr.dim(3);
    const int64_t k = spec.scale;
    if (H % k != 0 || W % k != 0) throw DimensionError("degrade: HR side not divisible by scale");
    Tensor lr({B, C, H / k, W / k});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < H / k; ++i)
                for (int64_t j = 0; j < W / k; ++j) {
                    double s = 0.0;
                    for (int64_t di = 0; di < k; ++di)
                        for (int64_t dj = 0; dj < k; ++dj) s += hr.at(b, c, i * k + di, j * k + dj);
                    lr.at(b, c, i, j) = static_cast<float>(s / static_cast<double>(k * k));
                }
    if (spec.noise_sigma > 0) {
        for (int64_t i = 0; i < lr.numel(); ++i)
            lr[i] += static_cast<float>(spec.noise_sigma *
                                        rng_normal(seed, Stream::degrade_noise, index, static_cast<uint64_t>(i)));
    }
    return clip(std::move(lr), -1.0f, 1.0f);
}

Tensor upsample_lr(const Tensor& lr, int scale) {
    check_image4(lr, "upsample_lr");
    if (scale < 1) throw ConfigError("upsample_lr: scale must be >= 1");
    if (scale == 1) return lr;
    return resize_bilinear(lr, lr.dim(2) * scale, lr.dim(3) * scale);
}

TrainPair make_pair(const SynthSpec& spec, uint64_t seed, uint64_t index) {
    TrainPair p;
    p.hr = synth_hr(spec, seed, index);
    p.lr = degrade(p.hr, spec, seed, index);
    p.y0_up = upsample_lr(p.lr, spec.scale);
    return p;
}

} // namespace qdm

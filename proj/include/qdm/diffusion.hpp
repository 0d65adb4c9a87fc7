#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "qdm/autodiff.hpp"
#include "qdm/rng.hpp"
#include "qdm/tensor.hpp"

namespace qdm {

// Residual-shifting schedule. eta[0] = 0; eta[1..T] strictly increasing with
// eta[1] = eta1 and eta[T] = etaT; alpha[t] = eta[t] - eta[t-1]; kappa scales
// the injected noise. sqrt(eta_t) follows a geometric progression warped by
// the non-uniformity exponent p.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> eta;   // size T+1, eta[0] == 0
    std::vector<double> alpha; // size T+1, alpha[0] unused
    double kappa = 0.0;
    double p = 0.0;

    void check_step(int t) const;
};

DiffusionSchedule make_schedule(int T, double eta1, double etaT, double p, double kappa);

// Sampler-side state bundle: the current iterate, its step index, the
// upsampled conditioning image and the active-site map on the pixel grid.
template <typename T>
struct DiffusionStateT {
    TensorT<T> x;
    int t = 0;
    TensorT<T> y0_up;
    MaskBits mask; // (B, H, W)
};
using DiffusionState = DiffusionStateT<float>;

// One forward transition. Mean is (alpha_t*E0 + x_prev) on active sites and
// the deterministic residual path (eta_t*E0 + x0) elsewhere; noise with std
// kappa*sqrt(alpha_t) is injected at active sites only. E0 = y0 - x0.
template <typename T>
TensorT<T> forward_step(const TensorT<T>& x_prev, const TensorT<T>& x0, const TensorT<T>& y0,
                        const MaskBits& mask, int t, const DiffusionSchedule& sched, uint64_t seed);

// Sample of the closed-form marginal N(eta_t*E0 + x0, kappa^2*eta_t*M).
template <typename T>
TensorT<T> forward_marginal_sample(const TensorT<T>& x0, const TensorT<T>& y0, const MaskBits& mask,
                                   int t, const DiffusionSchedule& sched, uint64_t seed);

// X_T = y0 + kappa * eps on active sites, y0 exactly elsewhere.
template <typename T>
TensorT<T> init_sample(const TensorT<T>& y0, const MaskBits& mask,
                       const DiffusionSchedule& sched, uint64_t seed);

// One reverse transition towards the model estimate f_pred of X_0. At t = 1
// (eta_0 = 0) the step is fully deterministic and returns f_pred exactly.
template <typename T>
TensorT<T> reverse_step(const TensorT<T>& x_t, const TensorT<T>& f_pred, const TensorT<T>& y0,
                        const MaskBits& mask, int t, const DiffusionSchedule& sched, uint64_t seed);

// mean of squared differences over all entries, double accumulation
template <typename T>
double mse_loss(const TensorT<T>& f_pred, const TensorT<T>& x0);

// Frozen random feature map standing in for a perceptual network: three
// stages of non-overlapping 2x2 patch embedding + GELU with seeded fixed
// weights. Inputs need H, W divisible by 8.
struct SurrogateConfig {
    uint64_t seed = 7;
    int widths[3] = {16, 32, 64};
};

template <typename T>
VarT<T> surrogate_features(TapeT<T>& tape, VarT<T> image, const SurrogateConfig& cfg);

struct LossWeights {
    double lambda1 = 1.0; // downstream (window-restricted) term
    double lambda2 = 1.0; // upstream (full-image) term
    double lambda3 = 0.1; // perceptual surrogate term
};

// lambda1 * L_down + lambda2 * L_up + lambda3 * L_feat. L_down averages the
// squared error over sites inside selected windows only (0 when the support
// is empty); L_up averages over the full image; L_feat compares surrogate
// features of the combined prediction against the target (0 when no
// extractor is supplied).
template <typename T>
VarT<T> dual_objective(TapeT<T>& tape, VarT<T> pred_down, VarT<T> pred_up, const TensorT<T>& x0,
                       const MaskBits& window_support, const LossWeights& w,
                       const SurrogateConfig* surrogate = nullptr);

// value-only convenience overload
template <typename T>
double dual_objective_value(const TensorT<T>& pred_down, const TensorT<T>& pred_up, const TensorT<T>& x0,
                            const MaskBits& window_support, const LossWeights& w,
                            const SurrogateConfig* surrogate = nullptr);

} // namespace qdm

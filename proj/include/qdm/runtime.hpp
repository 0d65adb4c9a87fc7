#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qdm/data.hpp"
#include "qdm/diffusion.hpp"
#include "qdm/model.hpp"
#include "qdm/quadtree.hpp"

namespace qdm {

struct TrainConfig {
    int steps = 2000;
    int batch = 8;
    double lr = 1e-3;
    double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 0.1;
    double threshold_s = 0.0;
    int T = 15;
    double eta1 = 0.04, etaT = 0.999, p = 0.3, kappa = 2.0;
    uint64_t seed = 0;
    int checkpoint_interval = 0;   // 0 = only the final checkpoint
    std::string checkpoint_path;   // empty = keep in memory only

    void validate() const;
    DiffusionSchedule schedule() const { return make_schedule(T, eta1, etaT, p, kappa); }
};

struct TrainResult {
    ModelParams params;
    std::vector<double> loss_curve;
    CheckpointMeta meta;
};

// Adam with fixed learning rate over the dual-stream objective.
// Deterministic given (config seeds, model seed); identical runs produce
// bit-identical checkpoints.
TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg, const SynthSpec& data);

// validation pairs live in a disjoint index range from training pairs
TrainPair train_sample(const SynthSpec& spec, uint64_t seed, int64_t index);
TrainPair val_sample(const SynthSpec& spec, uint64_t seed, int64_t index);

// T-step reverse sampling: upsample the LR input, derive the mask at the
// (H/2, W/2) token grid, then iterate reverse steps from init_sample down to
// t=1; the result is clipped to [-1, 1]. With oracle_hr set the network is
// bypassed and f_pred = oracle_hr (a correctness probe).
Tensor sample_sr(const ModelParams& params, const ModelConfig& cfg, const DiffusionSchedule& sched,
                 const Tensor& lr_img, int scale, double s, uint64_t seed,
                 const Tensor* oracle_hr = nullptr);

struct TilePlan {
    int P = 128;          // LR tile side
    int S = 112;          // stride, <= P
    int scale = 4;        // SR factor per tile
    double sigma_w = 0.0; // 0 = output tile side / 4

    void validate() const;
    double sigma_out() const { return sigma_w > 0 ? sigma_w : static_cast<double>(P) * scale / 4.0; }
};

// separable Gaussian weight patch, strictly positive, centered at (P-1)/2
DTensor gaussian_weight(int P_out, double sigma_w);

// Overlap-add fusion: tile the input with stride S (border tiles clamped
// inward so coverage is exact), apply tile_op to each tile, accumulate
// Gaussian-weighted numerator/denominator in double precision, divide.
Tensor uhr_fuse(const Tensor& big, const TilePlan& plan,
                const std::function<Tensor(const Tensor&)>& tile_op, int jobs = 1);

// tiled super-resolution of an LR image too large for one pass
Tensor uhr_sr(const ModelParams& params, const ModelConfig& cfg, const DiffusionSchedule& sched,
              const Tensor& big_lr, const TilePlan& plan, double s, uint64_t seed, int jobs = 1);

struct BenchRow {
    double threshold = 0.0;
    double density = 0.0;
    double flops_up = 0.0;
    double flops_down = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct BenchPair {
    Tensor lr;
    Tensor hr;
};

// Per-threshold mask density, analytic FLOPs and reference metrics of the
// sampled outputs; thresholds must be sorted ascending.
std::vector<BenchRow> bench_threshold_sweep(const ModelParams& params, const ModelConfig& cfg,
                                            const DiffusionSchedule& sched,
                                            const std::vector<BenchPair>& pairs, int scale,
                                            const std::vector<double>& thresholds, uint64_t seed);

std::string bench_to_csv(const std::vector<BenchRow>& rows);

} // namespace qdm

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qdm/autodiff.hpp"
#include "qdm/tensor.hpp"

namespace qdm {

// Dual-stream architecture hyperparameters. The upstream stream runs DiT
// blocks over up_patch x up_patch patches; the downstream stream refines
// 2x2-patch tokens inside mask-selected win x win token windows via
// self-attention + cross-attention into the upstream features.
struct ModelConfig {
    int layers = 2;
    int hidden = 64;
    int heads = 4;
    int up_patch = 8;
    int win = 8;                 // window side on the half-resolution token grid
    int mlp_ratio = 4;
    int max_parallel_chunks = 64;
    int in_channels = 2;         // channel concat of X_t and Y_0
    int out_channels = 1;
    int time_embed_dim = 256;

    // presets: tiny=(2,64,4), S=(6,384,6), B=(6,768,12), L=(12,1024,16)
    static ModelConfig preset(const std::string& name);
    void validate() const;
    void validate_input(int64_t H, int64_t W) const;
};

// Named weight tensors with a fixed iteration order (checkpoint layout and
// optimizer slots rely on it).
template <typename T>
struct ModelParamsT {
    std::vector<std::string> order;
    std::map<std::string, TensorT<T>> tensors;

    TensorT<T>& at(const std::string& name);
    const TensorT<T>& at(const std::string& name) const;
    void add(const std::string& name, TensorT<T> t);
    int64_t total_parameters() const;

    template <typename U>
    ModelParamsT<U> cast() const {
        ModelParamsT<U> out;
        for (const auto& name : order) out.add(name, tensors.at(name).template cast<U>());
        return out;
    }
};
using ModelParams = ModelParamsT<float>;

// adaLN-Zero initialization: modulation projections and the output heads
// start at zero so every residual branch begins as identity. Tests may pass
// zero_gates=false to randomize those too.
template <typename T>
ModelParamsT<T> init_params(const ModelConfig& cfg, uint64_t seed, bool zero_gates = true);

// One tape leaf per weight tensor, shared by every sub-module of a forward
// pass so gradients accumulate in a single place.
template <typename T>
struct ParamVarsT {
    TapeT<T>* tape = nullptr;
    std::map<std::string, VarT<T>> vars;

    static ParamVarsT bind(TapeT<T>& tape, const ModelParamsT<T>& params, bool requires_grad);
    VarT<T> operator()(const std::string& name) const;
};

// Mask-selected downstream windows on the (H/2, W/2) token grid.
struct ChunkSet {
    struct Window {
        int64_t b = 0, wy = 0, wx = 0;
    };
    int win = 0;
    int64_t grid_h = 0, grid_w = 0; // token grid dims
    std::vector<Window> windows;

    bool empty() const { return windows.empty(); }
    int64_t count() const { return static_cast<int64_t>(windows.size()); }
};

// Windows whose win x win token area contains at least one active mask site.
// mask is (B, H/2, W/2); win must divide H/2 and W/2.
ChunkSet select_chunks(const MaskBits& mask, int64_t H, int64_t W, int win);

// {0,1} pixel map of the selected windows' footprints, (B, H, W)
MaskBits chunk_pixel_support(const ChunkSet& chunks, int64_t B, int64_t H, int64_t W);

template <typename T>
struct KVCacheT {
    std::vector<VarT<T>> k; // per layer, (B*heads, n_up, head_dim)
    std::vector<VarT<T>> v;
};

template <typename T>
struct UpstreamOutT {
    VarT<T> coarse_pred;   // (B, C_out, H, W)
    VarT<T> global_tokens; // (B, n_up, hidden)
};

// upstream DiT stream over x_in = concat(x_t, y0) channels
template <typename T>
UpstreamOutT<T> upstream_forward(TapeT<T>& tape, const TensorT<T>& x_in,
                                 const std::vector<int>& t_steps,
                                 const ParamVarsT<T>& P, const ModelConfig& cfg);

// per-layer K/V projections of the global tokens, computed once per forward
template <typename T>
KVCacheT<T> precompute_kv(TapeT<T>& tape, VarT<T> global_tokens,
                          const ParamVarsT<T>& P, const ModelConfig& cfg);

// Refined 2x2-patch outputs per chunk group; pixel_idx maps every refined
// scalar to its flat position on the (B, C_out, H, W) canvas.
template <typename T>
struct DownstreamOutT {
    std::vector<VarT<T>> refined;                // per group, (g, win*win, 4*C_out)
    std::vector<std::vector<int64_t>> pixel_idx; // per group
    bool empty() const { return refined.empty(); }
};

// Chunks pass layers of (MSA -> MCA -> FFN), each residual + adaLN-Zero
// modulated, grouped into batches of at most chunk_group (default
// max_parallel_chunks). With kv == nullptr, K/V are recomputed from
// global_tokens for every group instead of reusing the cache.
template <typename T>
DownstreamOutT<T> downstream_forward(TapeT<T>& tape, const TensorT<T>& x_in, const ChunkSet& chunks,
                                     const KVCacheT<T>* kv, VarT<T> global_tokens,
                                     const std::vector<int>& t_steps,
                                     const ParamVarsT<T>& P, const ModelConfig& cfg,
                                     int chunk_group = -1);

// coarse prediction with every selected window's pixels replaced by the
// refined downstream values; untouched elsewhere
template <typename T>
VarT<T> combine_predictions(TapeT<T>& tape, VarT<T> coarse_pred, const DownstreamOutT<T>& down);

template <typename T>
struct ModelForwardOutT {
    VarT<T> pred_full;
    VarT<T> pred_up;
    ChunkSet chunks;
};

// Full dual-stream forward. mask is (B, H/2, W/2); t_steps holds one step
// index per batch item.
template <typename T>
ModelForwardOutT<T> model_forward(TapeT<T>& tape, const TensorT<T>& x_t, const TensorT<T>& y0,
                                  const MaskBits& mask, const std::vector<int>& t_steps,
                                  const ParamVarsT<T>& P, const ModelConfig& cfg,
                                  bool use_kv_cache = true, int chunk_group = -1);

// inference convenience: runs on a local tape, returns plain tensors
template <typename T>
struct ModelPrediction {
    TensorT<T> pred_full;
    TensorT<T> pred_up;
    int64_t selected_windows = 0;
};
template <typename T>
ModelPrediction<T> predict(const TensorT<T>& x_t, const TensorT<T>& y0, const MaskBits& mask,
                           int t, const ModelParamsT<T>& params, const ModelConfig& cfg);

// Analytic multiply-accumulate counts (see docs/flops.md). Upstream covers
// the global stream including its K/V pre-projection; downstream is
// n_selected_windows times the per-chunk cost.
struct FlopsEstimate {
    double upstream = 0.0;
    double downstream = 0.0;
    double total() const { return upstream + downstream; }
};
FlopsEstimate flops_estimate(const ModelConfig& cfg, int64_t H, int64_t W, int64_t n_selected_windows);

// Checkpoint container: little-endian; magic "QDMCKPT1", u32 version,
// config block, schedule block, then (name, shape, float32 payload) records.
struct CheckpointMeta {
    ModelConfig config;
    int T = 15;
    double eta1 = 0.04, etaT = 0.999, p = 0.3, kappa = 2.0;
};
void save_checkpoint(const std::string& path, const ModelParams& params, const CheckpointMeta& meta);
std::pair<ModelParams, CheckpointMeta> load_checkpoint(const std::string& path);

} // namespace qdm

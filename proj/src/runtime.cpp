#include "qdm/runtime.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

#include "qdm/metrics.hpp"
#include "qdm/rng.hpp"

namespace qdm {

void TrainConfig::validate() const {
    if (steps < 1 || batch < 1) throw ConfigError("TrainConfig: steps and batch must be >= 1");
    if (lr <= 0) throw ConfigError("TrainConfig: lr must be > 0");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("TrainConfig: lambdas must be >= 0");
    if (threshold_s < 0) throw ConfigError("TrainConfig: threshold must be >= 0");
    if (checkpoint_interval < 0) throw ConfigError("TrainConfig: checkpoint interval must be >= 0");
}

TrainPair train_sample(const SynthSpec& spec, uint64_t seed, int64_t index) {
    return make_pair(spec, seed, static_cast<uint64_t>(index));
}

TrainPair val_sample(const SynthSpec& spec, uint64_t seed, int64_t index) {
    // disjoint index range from training draws
    return make_pair(spec, seed, (uint64_t(1) << 40) + static_cast<uint64_t>(index));
}

namespace {

// Adam moments per named tensor, iteration order fixed by params.order
struct AdamState {
    std::map<std::string, Tensor> m, v;
    int64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void update(ModelParams& params, const std::map<std::string, Tensor>& grads, double lr) {
        ++step;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (const auto& name : params.order) {
            Tensor& w = params.tensors.at(name);
            auto git = grads.find(name);
            if (git == grads.end()) continue; // unused tensor this step: no movement
            const Tensor& g = git->second;
            Tensor& mm = m.try_emplace(name, Tensor::zeros(w.shape())).first->second;
            Tensor& vv = v.try_emplace(name, Tensor::zeros(w.shape())).first->second;
            for (int64_t i = 0; i < w.numel(); ++i) {
                const double gi = g[i];
                const double mi = beta1 * mm[i] + (1.0 - beta1) * gi;
                const double vi = beta2 * vv[i] + (1.0 - beta2) * gi * gi;
                mm[i] = static_cast<float>(mi);
                vv[i] = static_cast<float>(vi);
                w[i] -= static_cast<float>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
            }
        }
    }
};

} // namespace

TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg, const SynthSpec& data) {
    cfg.validate();
    data.validate();
    model_cfg.validate();
    const DiffusionSchedule sched = cfg.schedule();
    const int64_t H = data.size, W = data.size;
    model_cfg.validate_input(H, W);

    TrainResult result;
    result.params = init_params<float>(model_cfg, cfg.seed);
    result.meta.config = model_cfg;
    result.meta.T = cfg.T;
    result.meta.eta1 = cfg.eta1;
    result.meta.etaT = cfg.etaT;
    result.meta.p = cfg.p;
    result.meta.kappa = cfg.kappa;

    SurrogateConfig surrogate;
    const bool use_surrogate = cfg.lambda3 > 0;
    LossWeights weights{cfg.lambda1, cfg.lambda2, cfg.lambda3};
    AdamState adam;

    for (int step = 0; step < cfg.steps; ++step) {
        // assemble the batch
        Tensor x0({cfg.batch, 1, H, W}), y0({cfg.batch, 1, H, W}), x_t({cfg.batch, 1, H, W});
        MaskBits mask({cfg.batch, H / 2, W / 2});
        std::vector<int> t_steps(static_cast<size_t>(cfg.batch));
        for (int i = 0; i < cfg.batch; ++i) {
            const int64_t index = static_cast<int64_t>(step) * cfg.batch + i;
            TrainPair pair = train_sample(data, cfg.seed, index);
            const int t = static_cast<int>(rng_uniform_int(cfg.seed, Stream::time_draw,
                                                           static_cast<uint64_t>(step), static_cast<uint64_t>(i),
                                                           1, sched.T));
            t_steps[static_cast<size_t>(i)] = t;
            QuadtreeMask qm = generate_mask(pair.y0_up, cfg.threshold_s, H / 2, W / 2);
            MaskBits mask_px = mask_to_grid(qm.bits, H, W);
            // diffusion noise keyed on a per-(step, item) derived seed
            const uint64_t noise_seed = rng_words(cfg.seed, Stream::generic,
                                                  static_cast<uint64_t>(step), static_cast<uint64_t>(i))[0];
            Tensor xt_i = forward_marginal_sample(pair.hr, pair.y0_up, mask_px, t, sched, noise_seed);
            for (int64_t e = 0; e < H * W; ++e) {
                x0[i * H * W + e] = pair.hr[e];
                y0[i * H * W + e] = pair.y0_up[e];
                x_t[i * H * W + e] = xt_i[e];
            }
            for (int64_t e = 0; e < (H / 2) * (W / 2); ++e)
                mask[i * (H / 2) * (W / 2) + e] = qm.bits[e];
        }

        Tape tape;
        auto P = ParamVarsT<float>::bind(tape, result.params, true);
        auto out = model_forward(tape, x_t, y0, mask, t_steps, P, model_cfg);
        MaskBits support = chunk_pixel_support(out.chunks, cfg.batch, H, W);
        auto loss = dual_objective(tape, out.pred_full, out.pred_up, x0, support, weights,
                                   use_surrogate ? &surrogate : nullptr);
        const double loss_value = loss.val()[0];
        if (!std::isfinite(loss_value))
            throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                               " (t range, lr or data scale likely at fault)");
        result.loss_curve.push_back(loss_value);

        tape.backward(loss);
        std::map<std::string, Tensor> grads;
        for (const auto& [name, var] : P.vars) {
            const Tensor& g = tape.grad(var);
            if (!g.all_finite()) throw NumericError("train: non-finite gradient in '" + name + "'");
            grads.emplace(name, g);
        }
        adam.update(result.params, grads, cfg.lr);

        if (cfg.checkpoint_interval > 0 && !cfg.checkpoint_path.empty() &&
            (step + 1) % cfg.checkpoint_interval == 0 && step + 1 < cfg.steps) {
            save_checkpoint(cfg.checkpoint_path + ".step" + std::to_string(step + 1), result.params, result.meta);
        }
    }
    if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, result.params, result.meta);
    return result;
}

Tensor sample_sr(const ModelParams& params, const ModelConfig& cfg, const DiffusionSchedule& sched,
                 const Tensor& lr_img, int scale, double s, uint64_t seed, const Tensor* oracle_hr) {
    check_image4(lr_img, "sample_sr");
    Tensor y0 = upsample_lr(lr_img, scale);
    const int64_t H = y0.dim(2), W = y0.dim(3);
    if (oracle_hr == nullptr) cfg.validate_input(H, W);
    if (oracle_hr != nullptr && !oracle_hr->same_shape(y0))
        throw DimensionError("sample_sr: oracle reference shape mismatch");

    QuadtreeMask qm = generate_mask(y0, s, H / 2, W / 2);
    MaskBits mask_px = mask_to_grid(qm.bits, H, W);
    Tensor x = init_sample(y0, mask_px, sched, seed);
    for (int t = sched.T; t >= 1; --t) {
        Tensor f_pred = oracle_hr != nullptr
                            ? *oracle_hr
                            : predict(x, y0, qm.bits, t, params, cfg).pred_full;
        x = reverse_step(x, f_pred, y0, mask_px, t, sched, seed);
    }
    return clip(std::move(x), -1.0f, 1.0f);
}

void TilePlan::validate() const {
    if (P < 1 || S < 1 || S > P) throw ConfigError("TilePlan: need 1 <= S <= P");
    if (scale < 1) throw ConfigError("TilePlan: scale must be >= 1");
    if (sigma_w < 0) throw ConfigError("TilePlan: sigma must be >= 0");
}

DTensor gaussian_weight(int P_out, double sigma_w) {
    if (P_out < 1) throw ConfigError("gaussian_weight: size must be >= 1");
    if (sigma_w <= 0) throw ConfigError("gaussian_weight: sigma must be > 0");
    const double c = (P_out - 1) / 2.0;
    std::vector<double> w1(static_cast<size_t>(P_out));
    for (int i = 0; i < P_out; ++i)
        w1[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma_w * sigma_w));
    DTensor w({P_out, P_out});
    for (int i = 0; i < P_out; ++i)
        for (int j = 0; j < P_out; ++j)
            w.at(i, j) = w1[static_cast<size_t>(i)] * w1[static_cast<size_t>(j)];
    return w;
}

namespace {

std::vector<int64_t> tile_starts(int64_t extent, int64_t P, int64_t S) {
    std::vector<int64_t> starts;
    for (int64_t pos = 0;; pos += S) {
        if (pos + P >= extent) {
            starts.push_back(extent - P); // clamp the last tile inward
            break;
        }
        starts.push_back(pos);
    }
    return starts;
}

} // namespace

Tensor uhr_fuse(const Tensor& big, const TilePlan& plan,
                const std::function<Tensor(const Tensor&)>& tile_op, int jobs) {
    check_image4(big, "uhr_fuse");
    plan.validate();
    const int64_t B = big.dim(0), C = big.dim(1), H = big.dim(2), W = big.dim(3);
    if (H < plan.P || W < plan.P) throw DimensionError("uhr_fuse: image smaller than tile");

    const auto ys = tile_starts(H, plan.P, plan.S);
    const auto xs = tile_starts(W, plan.P, plan.S);
    const int64_t P_out = static_cast<int64_t>(plan.P) * plan.scale;
    const DTensor w = gaussian_weight(static_cast<int>(P_out), plan.sigma_out());

    struct TileJob {
        int64_t y, x;
    };
    std::vector<TileJob> tiles;
    for (int64_t y : ys)
        for (int64_t x : xs) tiles.push_back({y, x});

    // super-resolve tiles (parallelizable), then accumulate in a fixed order
    std::vector<Tensor> outputs(tiles.size());
    auto run_tile = [&](size_t ti) {
        const auto [y, x] = tiles[ti];
        Tensor tile({B, C, plan.P, plan.P});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < plan.P; ++i)
                    for (int64_t j = 0; j < plan.P; ++j)
                        tile.at(b, c, i, j) = big.at(b, c, y + i, x + j);
        Tensor out = tile_op(tile);
        if (out.rank() != 4 || out.dim(0) != B || out.dim(1) != C || out.dim(2) != P_out || out.dim(3) != P_out)
            throw DimensionError("uhr_fuse: tile operator returned wrong shape");
        outputs[ti] = std::move(out);
    };
    if (jobs > 1 && tiles.size() > 1) {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int j = 0; j < std::min<int>(jobs, static_cast<int>(tiles.size())); ++j)
            pool.emplace_back([&] {
                for (size_t ti = next.fetch_add(1); ti < tiles.size(); ti = next.fetch_add(1)) run_tile(ti);
            });
        for (auto& th : pool) th.join();
    } else {
        for (size_t ti = 0; ti < tiles.size(); ++ti) run_tile(ti);
    }

    const int64_t Ho = H * plan.scale, Wo = W * plan.scale;
    DTensor num({B, C, Ho, Wo}, 0.0);
    DTensor den({B, C, Ho, Wo}, 0.0);
    for (size_t ti = 0; ti < tiles.size(); ++ti) {
        const auto [y, x] = tiles[ti];
        const int64_t yo = y * plan.scale, xo = x * plan.scale;
        const Tensor& out = outputs[ti];
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < P_out; ++i)
                    for (int64_t j = 0; j < P_out; ++j) {
                        const double wv = w.at(i, j);
                        num.at(b, c, yo + i, xo + j) += wv * static_cast<double>(out.at(b, c, i, j));
                        den.at(b, c, yo + i, xo + j) += wv;
                    }
    }
    Tensor fused({B, C, Ho, Wo});
    for (int64_t i = 0; i < fused.numel(); ++i) fused[i] = static_cast<float>(num[i] / den[i]);
    return fused;
}

Tensor uhr_sr(const ModelParams& params, const ModelConfig& cfg, const DiffusionSchedule& sched,
              const Tensor& big_lr, const TilePlan& plan, double s, uint64_t seed, int jobs) {
    std::atomic<uint64_t> tile_counter{0};
    auto op = [&](const Tensor& tile) {
        const uint64_t k = tile_counter.fetch_add(1);
        return sample_sr(params, cfg, sched, tile, plan.scale, s,
                         rng_words(seed, Stream::generic, 0x7f1e5u, k)[0]);
    };
    Tensor fused = uhr_fuse(big_lr, plan, op, jobs);
    return clip(std::move(fused), -1.0f, 1.0f);
}

std::vector<BenchRow> bench_threshold_sweep(const ModelParams& params, const ModelConfig& cfg,
                                            const DiffusionSchedule& sched,
                                            const std::vector<BenchPair>& pairs, int scale,
                                            const std::vector<double>& thresholds, uint64_t seed) {
    if (pairs.empty()) throw ConfigError("bench: need at least one (lr, hr) pair");
    for (size_t i = 1; i < thresholds.size(); ++i)
        if (thresholds[i] < thresholds[i - 1]) throw ConfigError("bench: thresholds must be sorted ascending");

    std::vector<BenchRow> rows;
    for (double s : thresholds) {
        BenchRow row;
        row.threshold = s;
        for (size_t pi = 0; pi < pairs.size(); ++pi) {
            const Tensor& lr_img = pairs[pi].lr;
            const Tensor& hr = pairs[pi].hr;
            Tensor y0 = upsample_lr(lr_img, scale);
            const int64_t H = y0.dim(2), W = y0.dim(3);
            QuadtreeMask qm = generate_mask(y0, s, H / 2, W / 2);
            row.density += mask_density(qm);
            const ChunkSet chunks = select_chunks(qm.bits, H, W, cfg.win);
            const FlopsEstimate fl = flops_estimate(cfg, H, W, chunks.count());
            row.flops_up += fl.upstream;
            row.flops_down += fl.downstream;
            Tensor sr = sample_sr(params, cfg, sched, lr_img, scale, s,
                                  rng_words(seed, Stream::generic, 0xbe7c4u, pi)[0]);
            row.psnr += psnr(sr, hr, 2.0);
            row.ssim += ssim(sr, hr, 2.0);
        }
        const double n = static_cast<double>(pairs.size());
        row.density /= n;
        row.flops_up /= n;
        row.flops_down /= n;
        row.psnr /= n;
        row.ssim /= n;
        rows.push_back(row);
    }
    return rows;
}

std::string bench_to_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "threshold,density,flops_up,flops_down,psnr,ssim\n";
    os.precision(10);
    for (const auto& r : rows)
        os << r.threshold << "," << r.density << "," << r.flops_up << "," << r.flops_down << ","
           << r.psnr << "," << r.ssim << "\n";
    return os.str();
}

} // namespace qdm

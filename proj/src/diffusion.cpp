#include "qdm/diffusion.hpp"

#include <cmath>

namespace qdm {

void DiffusionSchedule::check_step(int t) const {
    if (t < 1 || t > T) throw StepError("diffusion step t=" + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
}

DiffusionSchedule make_schedule(int T, double eta1, double etaT, double p, double kappa) {
    if (T < 1) throw ConfigError("make_schedule: T must be >= 1");
    if (!(eta1 > 0.0 && eta1 < etaT && etaT < 1.0)) throw ConfigError("make_schedule: need 0 < eta1 < etaT < 1");
    if (eta1 > 0.2) throw ConfigError("make_schedule: eta1 must be in (0, 0.2]");
    if (etaT < 0.99) throw ConfigError("make_schedule: etaT must be in [0.99, 1)");
    if (p <= 0.0) throw ConfigError("make_schedule: p must be > 0");
    if (kappa <= 0.0) throw ConfigError("make_schedule: kappa must be > 0");

    DiffusionSchedule s;
    s.T = T;
    s.kappa = kappa;
    s.p = p;
    s.eta.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(T) + 1, 0.0);
    if (T == 1) {
        s.eta[1] = etaT; // single step jumps straight to the far endpoint
    } else {
        const double b0 = std::pow(etaT / eta1, 1.0 / (2.0 * (T - 1)));
        const double sqrt_eta1 = std::sqrt(eta1);
        for (int t = 1; t <= T; ++t) {
            const double beta = std::pow(static_cast<double>(t - 1) / static_cast<double>(T - 1), p) * (T - 1);
            const double r = sqrt_eta1 * std::pow(b0, beta);
            s.eta[static_cast<size_t>(t)] = r * r;
        }
        // pin the endpoints exactly
        s.eta[1] = eta1;
        s.eta[static_cast<size_t>(T)] = etaT;
    }
    for (int t = 1; t <= T; ++t) {
        s.alpha[static_cast<size_t>(t)] = s.eta[static_cast<size_t>(t)] - s.eta[static_cast<size_t>(t) - 1];
        if (!(s.alpha[static_cast<size_t>(t)] > 0.0))
            throw ConfigError("make_schedule: schedule not strictly increasing at t=" + std::to_string(t));
    }
    return s;
}

namespace {

template <typename T>
void check_diffusion_shapes(const TensorT<T>& x, const TensorT<T>& y0, const MaskBits& mask, const char* what) {
    check_image4(x, what);
    if (!x.same_shape(y0)) throw DimensionError(std::string(what) + ": x/y0 shape mismatch");
    if (mask.rank() != 3 || mask.dim(0) != x.dim(0) || mask.dim(1) != x.dim(2) || mask.dim(2) != x.dim(3))
        throw DimensionError(std::string(what) + ": mask must be (B,H,W) aligned with the image grid");
}

// flat (b, c, h, w) site index; the mask is shared across channels
struct SiteIter {
    int64_t B, C, H, W;
    template <typename Fn>
    void operator()(const MaskBits& mask, Fn&& fn) const {
        int64_t site = 0;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W; ++w, ++site)
                        fn(site, mask[(b * H + h) * W + w] != 0);
    }
};

} // namespace

template <typename T>
TensorT<T> forward_step(const TensorT<T>& x_prev, const TensorT<T>& x0, const TensorT<T>& y0,
                        const MaskBits& mask, int t, const DiffusionSchedule& sched, uint64_t seed) {
    check_diffusion_shapes(x_prev, y0, mask, "forward_step");
    if (!x_prev.same_shape(x0)) throw DimensionError("forward_step: x_prev/x0 shape mismatch");
    sched.check_step(t);
    const double alpha = sched.alpha[static_cast<size_t>(t)];
    const double eta = sched.eta[static_cast<size_t>(t)];
    const double std_dev = sched.kappa * std::sqrt(alpha);
    TensorT<T> out(x_prev.shape());
    SiteIter it{x_prev.dim(0), x_prev.dim(1), x_prev.dim(2), x_prev.dim(3)};
    it(mask, [&](int64_t i, bool active) {
        const double e0 = static_cast<double>(y0[i]) - static_cast<double>(x0[i]);
        if (active) {
            double v = alpha * e0 + static_cast<double>(x_prev[i]);
            v += std_dev * rng_normal(seed, Stream::forward_noise, static_cast<uint64_t>(t), static_cast<uint64_t>(i));
            out[i] = static_cast<T>(v);
        } else {
            out[i] = static_cast<T>(eta * e0 + static_cast<double>(x0[i]));
        }
    });
    return out;
}

template <typename T>
TensorT<T> forward_marginal_sample(const TensorT<T>& x0, const TensorT<T>& y0, const MaskBits& mask,
                                   int t, const DiffusionSchedule& sched, uint64_t seed) {
    check_diffusion_shapes(x0, y0, mask, "forward_marginal_sample");
    sched.check_step(t);
    const double eta = sched.eta[static_cast<size_t>(t)];
    const double std_dev = sched.kappa * std::sqrt(eta);
    TensorT<T> out(x0.shape());
    SiteIter it{x0.dim(0), x0.dim(1), x0.dim(2), x0.dim(3)};
    it(mask, [&](int64_t i, bool active) {
        const double e0 = static_cast<double>(y0[i]) - static_cast<double>(x0[i]);
        double v = eta * e0 + static_cast<double>(x0[i]);
        if (active)
            v += std_dev * rng_normal(seed, Stream::marginal_noise, static_cast<uint64_t>(t), static_cast<uint64_t>(i));
        out[i] = static_cast<T>(v);
    });
    return out;
}

template <typename T>
TensorT<T> init_sample(const TensorT<T>& y0, const MaskBits& mask,
                       const DiffusionSchedule& sched, uint64_t seed) {
    check_diffusion_shapes(y0, y0, mask, "init_sample");
    TensorT<T> out = y0;
    SiteIter it{y0.dim(0), y0.dim(1), y0.dim(2), y0.dim(3)};
    it(mask, [&](int64_t i, bool active) {
        if (active)
            out[i] = static_cast<T>(static_cast<double>(y0[i]) +
                                    sched.kappa * rng_normal(seed, Stream::init_noise, 0, static_cast<uint64_t>(i)));
    });
    return out;
}

template <typename T>
TensorT<T> reverse_step(const TensorT<T>& x_t, const TensorT<T>& f_pred, const TensorT<T>& y0,
                        const MaskBits& mask, int t, const DiffusionSchedule& sched, uint64_t seed) {
    check_diffusion_shapes(x_t, y0, mask, "reverse_step");
    if (!x_t.same_shape(f_pred)) throw DimensionError("reverse_step: x_t/f_pred shape mismatch");
    sched.check_step(t);
    if (t == 1) return f_pred; // eta_0 = 0 zeroes both the x_t coefficient and the variance

    const double eta_t = sched.eta[static_cast<size_t>(t)];
    const double eta_prev = sched.eta[static_cast<size_t>(t) - 1];
    const double alpha = sched.alpha[static_cast<size_t>(t)];
    const double coef_prev = eta_prev / eta_t;
    const double coef_pred = alpha / eta_t;
    const double std_dev = sched.kappa * std::sqrt(coef_prev * alpha);
    TensorT<T> out(x_t.shape());
    SiteIter it{x_t.dim(0), x_t.dim(1), x_t.dim(2), x_t.dim(3)};
    it(mask, [&](int64_t i, bool active) {
        double v = coef_prev * static_cast<double>(x_t[i]) + coef_pred * static_cast<double>(f_pred[i]);
        if (active)
            v += std_dev * rng_normal(seed, Stream::reverse_noise, static_cast<uint64_t>(t), static_cast<uint64_t>(i));
        out[i] = static_cast<T>(v);
    });
    return out;
}

template <typename T>
double mse_loss(const TensorT<T>& f_pred, const TensorT<T>& x0) {
    if (!f_pred.same_shape(x0)) throw DimensionError("mse_loss: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < f_pred.numel(); ++i) {
        const double d = static_cast<double>(f_pred[i]) - static_cast<double>(x0[i]);
        s += d * d;
    }
    return s / static_cast<double>(f_pred.numel());
}

template <typename T>
VarT<T> surrogate_features(TapeT<T>& tape, VarT<T> image, const SurrogateConfig& cfg) {
    const auto& shp = image.shape();
    if (shp.size() != 4) throw DimensionError("surrogate_features: want (B,C,H,W)");
    if (shp[2] % 8 != 0 || shp[3] % 8 != 0)
        throw DimensionError("surrogate_features: H,W must be divisible by 8");
    VarT<T> x = image;
    int64_t C = shp[1], H = shp[2], W = shp[3];
    const int64_t B = shp[0];
    for (int stage = 0; stage < 3; ++stage) {
        const int64_t Cw = cfg.widths[stage];
        // 2x2 patchify via a flat index permutation
        const int64_t Ho = H / 2, Wo = W / 2;
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(B * Ho * Wo * 4 * C));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < Ho; ++i)
                for (int64_t j = 0; j < Wo; ++j)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t di = 0; di < 2; ++di)
                            for (int64_t dj = 0; dj < 2; ++dj)
                                idx.push_back(((b * C + c) * H + 2 * i + di) * W + 2 * j + dj);
        VarT<T> patches = ad::gather_flat(x, std::move(idx), {B, Ho * Wo, 4 * C});
        TensorT<T> w({4 * C, Cw});
        fill_normal(w, cfg.seed, Stream::surrogate, static_cast<uint64_t>(stage));
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(4 * C)));
        for (int64_t i = 0; i < w.numel(); ++i) w[i] *= scale;
        VarT<T> lin = ad::linear_nobias(patches, tape.constant(std::move(w)));
        VarT<T> act = ad::gelu(lin);
        // back to (B, Cw, Ho, Wo) layout for the next stage
        std::vector<int64_t> back;
        back.reserve(static_cast<size_t>(B * Cw * Ho * Wo));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < Cw; ++c)
                for (int64_t i = 0; i < Ho; ++i)
                    for (int64_t j = 0; j < Wo; ++j)
                        back.push_back((b * Ho * Wo + i * Wo + j) * Cw + c);
        x = ad::gather_flat(act, std::move(back), {B, Cw, Ho, Wo});
        C = Cw;
        H = Ho;
        W = Wo;
    }
    return x;
}

template <typename T>
VarT<T> dual_objective(TapeT<T>& tape, VarT<T> pred_down, VarT<T> pred_up, const TensorT<T>& x0,
                       const MaskBits& window_support, const LossWeights& w,
                       const SurrogateConfig* surrogate) {
    if (w.lambda1 < 0 || w.lambda2 < 0 || w.lambda3 < 0)
        throw ConfigError("dual_objective: loss weights must be >= 0");
    if (!pred_up.val().same_shape(x0) || !pred_down.val().same_shape(x0))
        throw DimensionError("dual_objective: prediction/target shape mismatch");
    check_diffusion_shapes(x0, x0, window_support, "dual_objective");

    VarT<T> x0_const = tape.constant(x0);
    VarT<T> total = tape.constant(TensorT<T>({1}, T(0)));

    if (w.lambda2 > 0) {
        VarT<T> l_up = ad::mse(pred_up, x0_const);
        total = ad::add(total, ad::affine(l_up, static_cast<T>(w.lambda2)));
    }
    if (w.lambda1 > 0) {
        // squared error restricted to selected-window sites
        const int64_t B = x0.dim(0), C = x0.dim(1), H = x0.dim(2), W = x0.dim(3);
        TensorT<T> support(x0.shape());
        int64_t count = 0;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t ww = 0; ww < W; ++ww) {
                        const bool on = window_support[(b * H + h) * W + ww] != 0;
                        support.at(b, c, h, ww) = on ? T(1) : T(0);
                        count += on ? 1 : 0;
                    }
        if (count > 0) {
            VarT<T> diff = ad::sub(pred_down, x0_const);
            VarT<T> masked = ad::mul(diff, tape.constant(std::move(support)));
            VarT<T> l_down = ad::affine(ad::sum_all(ad::mul(masked, masked)), static_cast<T>(1.0 / static_cast<double>(count)));
            total = ad::add(total, ad::affine(l_down, static_cast<T>(w.lambda1)));
        }
    }
    if (w.lambda3 > 0 && surrogate != nullptr) {
        VarT<T> fa = surrogate_features(tape, pred_down, *surrogate);
        VarT<T> fb = surrogate_features(tape, x0_const, *surrogate);
        VarT<T> l_feat = ad::mse(fa, fb);
        total = ad::add(total, ad::affine(l_feat, static_cast<T>(w.lambda3)));
    }
    return total;
}

template <typename T>
double dual_objective_value(const TensorT<T>& pred_down, const TensorT<T>& pred_up, const TensorT<T>& x0,
                            const MaskBits& window_support, const LossWeights& w,
                            const SurrogateConfig* surrogate) {
    TapeT<T> tape;
    VarT<T> pd = tape.constant(pred_down);
    VarT<T> pu = tape.constant(pred_up);
    return static_cast<double>(dual_objective(tape, pd, pu, x0, window_support, w, surrogate).val()[0]);
}

#define QDM_INSTANTIATE(T) \
    template TensorT<T> forward_step<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, const MaskBits&, int, const DiffusionSchedule&, uint64_t); \
    template TensorT<T> forward_marginal_sample<T>(const TensorT<T>&, const TensorT<T>&, const MaskBits&, int, const DiffusionSchedule&, uint64_t); \
    template TensorT<T> init_sample<T>(const TensorT<T>&, const MaskBits&, const DiffusionSchedule&, uint64_t); \
    template TensorT<T> reverse_step<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, const MaskBits&, int, const DiffusionSchedule&, uint64_t); \
    template double mse_loss<T>(const TensorT<T>&, const TensorT<T>&); \
    template VarT<T> surrogate_features<T>(TapeT<T>&, VarT<T>, const SurrogateConfig&); \
    template VarT<T> dual_objective<T>(TapeT<T>&, VarT<T>, VarT<T>, const TensorT<T>&, const MaskBits&, const LossWeights&, const SurrogateConfig*); \
    template double dual_objective_value<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, const MaskBits&, const LossWeights&, const SurrogateConfig*);

QDM_INSTANTIATE(float)
QDM_INSTANTIATE(double)
#undef QDM_INSTANTIATE

} // namespace qdm

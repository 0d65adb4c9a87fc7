#include "qdm/selftest.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <sstream>

#include "qdm/data.hpp"
#include "qdm/diffusion.hpp"
#include "qdm/metrics.hpp"
#include "qdm/model.hpp"
#include "qdm/quadtree.hpp"
#include "qdm/rng.hpp"
#include "qdm/runtime.hpp"

namespace qdm::selftest {

namespace {

struct Check {
    std::ostringstream msg;
    bool ok = true;

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            if (!ok) msg << "; ";
            msg << what;
            ok = false;
        }
    }
};

Tensor random_image(int64_t C, int64_t H, int64_t W, uint64_t seed, uint64_t idx) {
    Tensor img({1, C, H, W});
    fill_uniform(img, seed, Stream::generic, idx, -1.0, 1.0);
    return img;
}

void quadtree_oracle(Check& c) {
    const int64_t sizes[] = {8, 16, 32};
    const double thresholds[] = {0.0, 0.1, 0.5};
    int idx = 0;
    for (int rep = 0; rep < 40; ++rep)
        for (double s : thresholds) {
            const int64_t H = sizes[rep % 3], W = sizes[(rep / 3) % 3];
            Tensor img = random_image(rep % 2 ? 3 : 1, H, W, 99, static_cast<uint64_t>(idx++));
            for (int64_t hm : {H, H / 2, H / 4}) {
                const int64_t wm = hm * W / H;
                auto fast = generate_mask(img, s, hm, wm);
                auto slow = brute_force_mask(img, s, hm, wm);
                c.expect(std::memcmp(fast.bits.data(), slow.bits.data(),
                                     static_cast<size_t>(fast.bits.numel())) == 0,
                         "mask mismatch at s=" + std::to_string(s));
            }
        }
}

void quadtree_properties(Check& c) {
    for (int rep = 0; rep < 10; ++rep) {
        Tensor img = random_image(1, 16, 16, 123, static_cast<uint64_t>(rep));
        auto m1 = generate_mask(img, 0.1, 8, 8);
        auto m2 = generate_mask(img, 0.4, 8, 8);
        for (int64_t i = 0; i < m1.bits.numel(); ++i)
            c.expect(m2.bits[i] <= m1.bits[i], "monotonicity violated");
        Tensor shifted = img;
        for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.25f;
        auto ms = generate_mask(shifted, 0.1, 8, 8);
        c.expect(std::memcmp(ms.bits.data(), m1.bits.data(), static_cast<size_t>(m1.bits.numel())) == 0,
                 "shift invariance violated");
        const double d = mask_density(m1);
        c.expect(d >= 0.0 && d <= 1.0, "density out of range");
    }
}

void schedule_endpoints(Check& c) {
    auto sched = make_schedule(15, 0.04, 0.999, 0.3, 2.0);
    c.expect(std::abs(sched.eta[1] - 0.04) < 1e-12, "eta_1 endpoint");
    c.expect(std::abs(sched.eta[15] - 0.999) < 1e-12, "eta_T endpoint");
    for (int t = 1; t <= 15; ++t) c.expect(sched.alpha[static_cast<size_t>(t)] > 0, "alpha > 0");
}

void inactive_site_determinism(Check& c) {
    auto sched = make_schedule(15, 0.04, 0.999, 0.3, 2.0);
    Tensor x0 = random_image(1, 8, 8, 5, 0);
    Tensor y0 = random_image(1, 8, 8, 5, 1);
    MaskBits mask({1, 8, 8}, 0);
    for (int64_t i = 0; i < 32; ++i) mask[i * 2] = 1; // half the sites active
    Tensor xa = x0, xb = x0;
    for (int t = 1; t <= 15; ++t) {
        xa = forward_step(xa, x0, y0, mask, t, sched, 111);
        xb = forward_step(xb, x0, y0, mask, t, sched, 222);
        for (int64_t i = 0; i < xa.numel(); ++i)
            if (!mask[i]) {
                c.expect(xa[i] == xb[i], "inactive forward site differs across seeds");
                const float expect = static_cast<float>(
                    sched.eta[static_cast<size_t>(t)] * (static_cast<double>(y0[i]) - x0[i]) + x0[i]);
                c.expect(xa[i] == expect, "inactive forward site off the residual path");
            }
    }
}

void perfect_predictor(Check& c) {
    auto sched = make_schedule(15, 0.04, 0.999, 0.3, 2.0);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x0 = random_image(1, 8, 8, 31, static_cast<uint64_t>(rep) * 2);
        Tensor y0 = random_image(1, 8, 8, 31, static_cast<uint64_t>(rep) * 2 + 1);
        MaskBits mask({1, 8, 8}, 1);
        Tensor x = init_sample(y0, mask, sched, static_cast<uint64_t>(rep));
        for (int t = sched.T; t >= 1; --t)
            x = reverse_step(x, x0, y0, mask, t, sched, static_cast<uint64_t>(rep));
        c.expect(std::memcmp(x.data(), x0.data(), sizeof(float) * static_cast<size_t>(x.numel())) == 0,
                 "oracle rollout not bit-exact");
    }
}

void model_structural(Check& c) {
    ModelConfig cfg = ModelConfig::preset("tiny");
    auto params = init_params<float>(cfg, 17, /*zero_gates=*/false);
    Tensor x_t = random_image(1, 16, 16, 7, 0);
    Tensor y0 = random_image(1, 16, 16, 7, 1);
    MaskBits empty({1, 8, 8}, 0);
    MaskBits full({1, 8, 8}, 1);
    auto pe = predict(x_t, y0, empty, 3, params, cfg);
    c.expect(std::memcmp(pe.pred_full.data(), pe.pred_up.data(),
                         sizeof(float) * static_cast<size_t>(pe.pred_full.numel())) == 0,
             "empty mask should collapse to the coarse prediction");
    auto pf = predict(x_t, y0, full, 3, params, cfg);
    c.expect(pf.selected_windows == 1, "full 8x8 token grid is one window");
    auto pf2 = predict(x_t, y0, full, 3, params, cfg);
    c.expect(std::memcmp(pf.pred_full.data(), pf2.pred_full.data(),
                         sizeof(float) * static_cast<size_t>(pf.pred_full.numel())) == 0,
             "prediction not deterministic");
}

void fusion_identity(Check& c) {
    Tensor big = random_image(1, 128, 128, 3, 0);
    TilePlan plan;
    plan.P = 48;
    plan.S = 40;
    plan.scale = 1;
    Tensor fused = uhr_fuse(big, plan, [](const Tensor& t) { return t; });
    double max_err = 0.0;
    for (int64_t i = 0; i < big.numel(); ++i)
        max_err = std::max(max_err, std::abs(static_cast<double>(fused[i]) - big[i]));
    c.expect(max_err < 1e-10, "identity fusion error " + std::to_string(max_err));
}

void metric_sanity(Check& c) {
    Tensor a = random_image(1, 16, 16, 41, 0);
    c.expect(psnr(a, a, 2.0) == 100.0, "psnr cap");
    c.expect(std::abs(ssim(a, a, 2.0) - 1.0) < 1e-12, "ssim identity");
    Tensor b = random_image(1, 16, 16, 41, 1);
    c.expect(std::abs(psnr(a, b, 2.0) - psnr(b, a, 2.0)) < 1e-12, "psnr symmetry");
    c.expect(std::abs(ssim(a, b, 2.0) - ssim(b, a, 2.0)) < 1e-12, "ssim symmetry");
}

void data_determinism(Check& c) {
    SynthSpec spec;
    spec.size = 32;
    auto p1 = make_pair(spec, 9, 4);
    auto p2 = make_pair(spec, 9, 4);
    c.expect(std::memcmp(p1.hr.data(), p2.hr.data(), sizeof(float) * static_cast<size_t>(p1.hr.numel())) == 0,
             "synth pair not deterministic");
    c.expect(p1.lr.dim(2) == 8 && p1.y0_up.dim(2) == 32, "degrade/upsample shape chain");
}

void gradient_spot_check(Check& c) {
    // tiny 2-layer MLP against central differences
    using D = double;
    auto build = [](TapeT<D>& tape, std::vector<VarT<D>>& params) {
        TensorT<D> xin({2, 3});
        fill_uniform(xin, 11, Stream::generic, 0, -1.0, 1.0);
        auto x = tape.constant(xin);
        auto h = ad::gelu(ad::linear(x, params[0], params[1]));
        auto y = ad::linear(h, params[2], params[3]);
        return ad::mean_all(ad::mul(y, y));
    };
    TensorT<D> w1({3, 4}), b1({4}), w2({4, 2}), b2({2});
    fill_uniform(w1, 12, Stream::generic, 1, -0.7, 0.7);
    fill_uniform(b1, 12, Stream::generic, 2, -0.2, 0.2);
    fill_uniform(w2, 12, Stream::generic, 3, -0.7, 0.7);
    fill_uniform(b2, 12, Stream::generic, 4, -0.2, 0.2);
    const double err = grad_check<D>(build, {w1, b1, w2, b2}, 1e-5);
    c.expect(err < 1e-6, "mlp gradient error " + std::to_string(err));
}

} // namespace

std::vector<SuiteResult> run_all() {
    using Fn = std::function<void(Check&)>;
    const std::pair<const char*, Fn> suites[] = {
        {"quadtree.oracle_equivalence", quadtree_oracle},
        {"quadtree.properties", quadtree_properties},
        {"diffusion.schedule_endpoints", schedule_endpoints},
        {"diffusion.inactive_site_determinism", inactive_site_determinism},
        {"diffusion.perfect_predictor", perfect_predictor},
        {"model.structural_equivalences", model_structural},
        {"runtime.fusion_identity", fusion_identity},
        {"eval.metric_sanity", metric_sanity},
        {"data.determinism", data_determinism},
        {"numerics.gradient_check", gradient_spot_check},
    };
    std::vector<SuiteResult> results;
    for (const auto& [name, fn] : suites) {
        SuiteResult r;
        r.name = name;
        const auto start = std::chrono::steady_clock::now();
        try {
            Check c;
            fn(c);
            r.passed = c.ok;
            r.detail = c.msg.str();
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        results.push_back(std::move(r));
    }
    return results;
}

bool run_all(std::ostream& os) {
    bool all = true;
    for (const auto& r : run_all()) {
        os << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
        char buf[32];
        std::snprintf(buf, sizeof(buf), " (%.2fs)", r.seconds);
        os << buf;
        if (!r.passed && !r.detail.empty()) os << " -- " << r.detail;
        os << "\n";
        all = all && r.passed;
    }
    return all;
}

} // namespace qdm::selftest

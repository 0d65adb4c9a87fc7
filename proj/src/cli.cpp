#include "qdm/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "qdm/data.hpp"
#include "qdm/diffusion.hpp"
#include "qdm/image_io.hpp"
#include "qdm/metrics.hpp"
#include "qdm/model.hpp"
#include "qdm/quadtree.hpp"
#include "qdm/runtime.hpp"
#include "qdm/selftest.hpp"

namespace qdm {

namespace {

struct SeedOpt {
    uint64_t seed = 0;
    void attach(CLI::App* cmd) {
        cmd->add_option("--seed", seed, "global RNG seed")->envname("QDM_SEED")->capture_default_str();
    }
};

void attach_config(CLI::App* cmd) {
    cmd->set_config("--config", "", "key = value config file with [sections]; explicit flags win");
    cmd->allow_config_extras(false);
}

struct SynthOpts {
    SynthSpec spec;
    void attach(CLI::App* cmd) {
        cmd->add_option("--size", spec.size, "HR side (power of two)")->capture_default_str();
        cmd->add_option("--scale", spec.scale, "SR factor")->capture_default_str();
        cmd->add_option("--shapes", spec.n_shapes, "textured shapes per image")->capture_default_str();
        cmd->add_option("--texture-amp", spec.texture_amp, "texture amplitude")->capture_default_str();
        cmd->add_option("--noise-sigma", spec.noise_sigma, "degradation noise std")->capture_default_str();
    }
};

std::vector<double> parse_thresholds(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stod(tok));
    }
    if (out.empty()) throw ConfigError("no thresholds given");
    return out;
}

int run_mask(const std::string& in_path, const std::string& out_path, const std::string& overlay_path,
             double s, int64_t hm, int64_t wm) {
    Tensor img = load_image(in_path);
    Tensor padded = pad_to_pow2_square(img);
    const int64_t Hp = padded.dim(2), Wp = padded.dim(3);
    int64_t mh = hm > 0 ? hm : Hp / 2;
    int64_t mw = wm > 0 ? wm : Wp / 2;
    QuadtreeMask mask = generate_mask(padded, s, mh, mw);
    // crop the mask back to the source aspect
    const int64_t ch = std::max<int64_t>(1, (img.dim(2) * mh + Hp - 1) / Hp);
    const int64_t cw = std::max<int64_t>(1, (img.dim(3) * mw + Wp - 1) / Wp);
    MaskBits cropped({1, ch, cw});
    for (int64_t i = 0; i < ch; ++i)
        for (int64_t j = 0; j < cw; ++j) cropped[i * cw + j] = mask.bits[i * mw + j];
    save_pbm(out_path, cropped);
    std::cout << "mask " << ch << "x" << cw << " density " << mask_density(cropped)
              << " level " << mask.level << " -> " << out_path << "\n";
    if (!overlay_path.empty()) {
        QuadtreePartition part = build_partition(padded, s);
        save_overlay_png(overlay_path, render_partition_overlay(padded, part));
        std::cout << "partition overlay (" << part.leaves().size() << " leaves) -> " << overlay_path << "\n";
    }
    return 0;
}

ModelConfig model_config_from_flags(const std::string& preset, int win, int up_patch) {
    ModelConfig cfg = ModelConfig::preset(preset);
    if (win > 0) cfg.win = win;
    if (up_patch > 0) cfg.up_patch = up_patch;
    return cfg;
}

} // namespace

int dispatch(int argc, const char* const* argv) {
    CLI::App app{"quadtree-masked sparse diffusion super-resolution"};
    app.require_subcommand(1);

    // ---- mask ----------------------------------------------------------
    auto* mask_cmd = app.add_subcommand("mask", "binary quadtree mask (PBM) from an image");
    std::string mask_in, mask_out = "mask.pbm", mask_overlay;
    double mask_s = 0.15;
    int64_t mask_hm = 0, mask_wm = 0;
    mask_cmd->add_option("input", mask_in, "input image (.png/.pgm/.pfm)")->required();
    mask_cmd->add_option("-o,--out", mask_out, "output PBM path")->capture_default_str();
    mask_cmd->add_option("--overlay", mask_overlay, "also render a partition overlay PNG");
    mask_cmd->add_option("--s", mask_s, "homogeneity threshold")->capture_default_str();
    mask_cmd->add_option("--mask-height", mask_hm, "mask height (default: padded H/2)");
    mask_cmd->add_option("--mask-width", mask_wm, "mask width (default: padded W/2)");
    attach_config(mask_cmd);

    // ---- train ---------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train on synthetic pairs");
    TrainConfig tc;
    SynthOpts train_synth;
    SeedOpt train_seed;
    std::string train_preset = "tiny", train_out = "model.qdm", train_loss_csv;
    int train_win = 0, train_patch = 0;
    train_cmd->add_option("--preset", train_preset, "model preset (tiny|S|B|L)")->capture_default_str();
    train_cmd->add_option("--win", train_win, "downstream window side (tokens)");
    train_cmd->add_option("--up-patch", train_patch, "upstream patch side");
    train_cmd->add_option("--steps", tc.steps, "training steps")->capture_default_str();
    train_cmd->add_option("--batch", tc.batch, "batch size")->capture_default_str();
    train_cmd->add_option("--lr", tc.lr, "learning rate")->capture_default_str();
    train_cmd->add_option("--lambda1", tc.lambda1, "window-restricted loss weight")->capture_default_str();
    train_cmd->add_option("--lambda2", tc.lambda2, "full-image loss weight")->capture_default_str();
    train_cmd->add_option("--lambda3", tc.lambda3, "feature-surrogate loss weight")->capture_default_str();
    train_cmd->add_option("--s", tc.threshold_s, "quadtree threshold")->capture_default_str();
    train_cmd->add_option("--T", tc.T, "diffusion steps")->capture_default_str();
    train_cmd->add_option("--eta1", tc.eta1, "schedule start")->capture_default_str();
    train_cmd->add_option("--etaT", tc.etaT, "schedule end")->capture_default_str();
    train_cmd->add_option("--p", tc.p, "schedule exponent")->capture_default_str();
    train_cmd->add_option("--kappa", tc.kappa, "noise scale")->capture_default_str();
    train_cmd->add_option("--ckpt-interval", tc.checkpoint_interval, "periodic checkpoint stride")->capture_default_str();
    train_cmd->add_option("-o,--out", train_out, "checkpoint path")->capture_default_str();
    train_cmd->add_option("--loss-csv", train_loss_csv, "write the loss curve as CSV");
    train_synth.attach(train_cmd);
    train_seed.attach(train_cmd);
    attach_config(train_cmd);

    // ---- sr ------------------------------------------------------------
    auto* sr_cmd = app.add_subcommand("sr", "super-resolve an LR image");
    std::string sr_ckpt, sr_in, sr_out = "sr.png", sr_oracle;
    double sr_s = 0.0;
    int sr_scale = 4;
    SeedOpt sr_seed;
    sr_cmd->add_option("--ckpt", sr_ckpt, "model checkpoint")->required();
    sr_cmd->add_option("input", sr_in, "LR image")->required();
    sr_cmd->add_option("-o,--out", sr_out, "output image")->capture_default_str();
    sr_cmd->add_option("--scale", sr_scale, "SR factor")->capture_default_str();
    sr_cmd->add_option("--s", sr_s, "quadtree threshold")->capture_default_str();
    sr_cmd->add_option("--oracle-hr", sr_oracle, "bypass the model with this ground-truth image");
    sr_seed.attach(sr_cmd);
    attach_config(sr_cmd);

    // ---- uhr -----------------------------------------------------------
    auto* uhr_cmd = app.add_subcommand("uhr", "tiled SR with Gaussian-weighted fusion");
    std::string uhr_ckpt, uhr_in, uhr_out = "uhr.png";
    TilePlan plan;
    double uhr_s = 0.0;
    int uhr_jobs = 1;
    SeedOpt uhr_seed;
    uhr_cmd->add_option("--ckpt", uhr_ckpt, "model checkpoint")->required();
    uhr_cmd->add_option("input", uhr_in, "large LR image")->required();
    uhr_cmd->add_option("-o,--out", uhr_out, "output image")->capture_default_str();
    uhr_cmd->add_option("--P", plan.P, "tile side (LR px)")->capture_default_str();
    uhr_cmd->add_option("--S", plan.S, "tile stride (LR px)")->capture_default_str();
    uhr_cmd->add_option("--scale", plan.scale, "SR factor")->capture_default_str();
    uhr_cmd->add_option("--sigma", plan.sigma_w, "fusion Gaussian sigma (0 = tile/4)")->capture_default_str();
    uhr_cmd->add_option("--s", uhr_s, "quadtree threshold")->capture_default_str();
    uhr_cmd->add_option("--jobs", uhr_jobs, "worker cap for tile processing")->capture_default_str();
    uhr_seed.attach(uhr_cmd);
    attach_config(uhr_cmd);

    // ---- bench ---------------------------------------------------------
    auto* bench_cmd = app.add_subcommand("bench", "threshold sweep: density, FLOPs, metrics");
    std::string bench_ckpt, bench_out = "bench.csv", bench_thresholds = "0,0.15,0.3,0.6,0.9";
    std::string bench_preset = "tiny";
    std::vector<std::string> bench_inputs, bench_refs;
    int bench_synth = 0;
    SynthOpts bench_synth_opts;
    SeedOpt bench_seed;
    bench_cmd->add_option("--ckpt", bench_ckpt, "model checkpoint (default: fresh preset weights)");
    bench_cmd->add_option("--preset", bench_preset, "model preset when no checkpoint is given")->capture_default_str();
    bench_cmd->add_option("--thresholds", bench_thresholds, "comma-separated ascending thresholds")->capture_default_str();
    bench_cmd->add_option("--input", bench_inputs, "LR input image (repeatable)");
    bench_cmd->add_option("--ref", bench_refs, "HR reference for each --input (repeatable)");
    bench_cmd->add_option("--synth", bench_synth, "number of synthetic eval pairs")->capture_default_str();
    bench_cmd->add_option("-o,--out", bench_out, "output CSV")->capture_default_str();
    bench_synth_opts.attach(bench_cmd);
    bench_seed.attach(bench_cmd);
    attach_config(bench_cmd);

    // ---- eval ----------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM between two images");
    std::string eval_a, eval_b;
    double eval_max = 2.0;
    bool eval_y = false;
    eval_cmd->add_option("--a", eval_a, "first image")->required();
    eval_cmd->add_option("--b", eval_b, "second image")->required();
    eval_cmd->add_option("--max-val", eval_max, "dynamic range (2.0 for model space)")->capture_default_str();
    eval_cmd->add_flag("--y-channel", eval_y, "compare BT.601 luma of RGB inputs");
    attach_config(eval_cmd);

    // ---- selftest ------------------------------------------------------
    auto* selftest_cmd = app.add_subcommand("selftest", "run the oracle/property suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (mask_cmd->parsed())
            return run_mask(mask_in, mask_out, mask_overlay, mask_s, mask_hm, mask_wm);

        if (train_cmd->parsed()) {
            tc.seed = train_seed.seed;
            tc.checkpoint_path = train_out;
            ModelConfig mc = model_config_from_flags(train_preset, train_win, train_patch);
            TrainResult result = train(tc, mc, train_synth.spec);
            if (!train_loss_csv.empty()) {
                std::ofstream os(train_loss_csv);
                os << "step,loss\n";
                for (size_t i = 0; i < result.loss_curve.size(); ++i) os << i << "," << result.loss_curve[i] << "\n";
            }
            std::cout << "trained " << tc.steps << " steps (" << result.params.total_parameters()
                      << " params), final loss " << result.loss_curve.back() << " -> " << train_out << "\n";
            return 0;
        }

        if (sr_cmd->parsed()) {
            auto [params, meta] = load_checkpoint(sr_ckpt);
            auto sched = make_schedule(meta.T, meta.eta1, meta.etaT, meta.p, meta.kappa);
            Tensor lr_img = load_image(sr_in);
            Tensor oracle;
            const Tensor* oracle_ptr = nullptr;
            if (!sr_oracle.empty()) {
                oracle = load_image(sr_oracle);
                oracle_ptr = &oracle;
            }
            Tensor sr = sample_sr(params, meta.config, sched, lr_img, sr_scale, sr_s, sr_seed.seed, oracle_ptr);
            save_image(sr_out, sr);
            std::cout << "sr " << sr.dim(3) << "x" << sr.dim(2) << " -> " << sr_out << "\n";
            return 0;
        }

        if (uhr_cmd->parsed()) {
            auto [params, meta] = load_checkpoint(uhr_ckpt);
            auto sched = make_schedule(meta.T, meta.eta1, meta.etaT, meta.p, meta.kappa);
            Tensor big = load_image(uhr_in);
            Tensor out = uhr_sr(params, meta.config, sched, big, plan, uhr_s, uhr_seed.seed, uhr_jobs);
            save_image(uhr_out, out);
            std::cout << "uhr " << out.dim(3) << "x" << out.dim(2) << " -> " << uhr_out << "\n";
            return 0;
        }

        if (bench_cmd->parsed()) {
            ModelParams params;
            CheckpointMeta meta;
            if (!bench_ckpt.empty()) {
                std::tie(params, meta) = load_checkpoint(bench_ckpt);
            } else {
                meta.config = ModelConfig::preset(bench_preset);
                params = init_params<float>(meta.config, bench_seed.seed);
            }
            auto sched = make_schedule(meta.T, meta.eta1, meta.etaT, meta.p, meta.kappa);
            std::vector<BenchPair> pairs;
            if (!bench_inputs.empty()) {
                if (bench_inputs.size() != bench_refs.size())
                    throw ConfigError("bench: need one --ref per --input");
                for (size_t i = 0; i < bench_inputs.size(); ++i)
                    pairs.push_back({load_image(bench_inputs[i]), load_image(bench_refs[i])});
            }
            for (int i = 0; i < bench_synth; ++i) {
                TrainPair p = val_sample(bench_synth_opts.spec, bench_seed.seed, i);
                pairs.push_back({p.lr, p.hr});
            }
            auto rows = bench_threshold_sweep(params, meta.config, sched, pairs,
                                              bench_synth_opts.spec.scale,
                                              parse_thresholds(bench_thresholds), bench_seed.seed);
            std::ofstream os(bench_out);
            if (!os) throw DataError("cannot open '" + bench_out + "' for writing");
            os << bench_to_csv(rows);
            std::cout << bench_to_csv(rows);
            return 0;
        }

        if (eval_cmd->parsed()) {
            Tensor a = load_image(eval_a), b = load_image(eval_b);
            if (eval_y) {
                a = to_luma(a);
                b = to_luma(b);
            }
            MetricReport rep;
            rep.psnr = psnr(a, b, eval_max);
            rep.ssim = ssim(a, b, eval_max);
            rep.n_images = 1;
            std::cout << "psnr " << rep.psnr << " dB\nssim " << rep.ssim << "\nn " << rep.n_images << "\n";
            return 0;
        }

        if (selftest_cmd->parsed())
            return selftest::run_all(std::cout) ? 0 : 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace qdm

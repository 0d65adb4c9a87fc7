#include "qdm/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "qdm/rng.hpp"

namespace qdm {

ModelConfig ModelConfig::preset(const std::string& name) {
    ModelConfig c;
    if (name == "tiny") {
        c.layers = 2; c.hidden = 64; c.heads = 4;
    } else if (name == "S") {
        c.layers = 6; c.hidden = 384; c.heads = 6;
    } else if (name == "B") {
        c.layers = 6; c.hidden = 768; c.heads = 12;
    } else if (name == "L") {
        c.layers = 12; c.hidden = 1024; c.heads = 16;
    } else {
        throw ConfigError("unknown model preset '" + name + "' (want tiny|S|B|L)");
    }
    return c;
}

void ModelConfig::validate() const {
    if (layers < 1 || hidden < 4 || heads < 1) throw ConfigError("ModelConfig: bad layers/hidden/heads");
    if (hidden % heads != 0) throw ConfigError("ModelConfig: hidden must be divisible by heads");
    if (hidden % 4 != 0) throw ConfigError("ModelConfig: hidden must be divisible by 4 (2D sincos embedding)");
    if (up_patch < 1 || win < 1 || mlp_ratio < 1 || max_parallel_chunks < 1)
        throw ConfigError("ModelConfig: bad patch/window/mlp/chunk settings");
    if (in_channels < 1 || out_channels < 1) throw ConfigError("ModelConfig: bad channel counts");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("ModelConfig: time_embed_dim must be even");
}

void ModelConfig::validate_input(int64_t H, int64_t W) const {
    validate();
    if (H % up_patch != 0 || W % up_patch != 0)
        throw DimensionError("ModelConfig: H,W must be divisible by up_patch");
    if (H % (2 * win) != 0 || W % (2 * win) != 0)
        throw DimensionError("ModelConfig: H,W must be divisible by 2*win");
}

template <typename T>
TensorT<T>& ModelParamsT<T>::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("missing parameter tensor '" + name + "'");
    return it->second;
}

template <typename T>
const TensorT<T>& ModelParamsT<T>::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("missing parameter tensor '" + name + "'");
    return it->second;
}

template <typename T>
void ModelParamsT<T>::add(const std::string& name, TensorT<T> t) {
    if (tensors.count(name)) throw ConfigError("duplicate parameter tensor '" + name + "'");
    order.push_back(name);
    tensors.emplace(name, std::move(t));
}

template <typename T>
int64_t ModelParamsT<T>::total_parameters() const {
    int64_t n = 0;
    for (const auto& name : order) n += tensors.at(name).numel();
    return n;
}

template <typename T>
ParamVarsT<T> ParamVarsT<T>::bind(TapeT<T>& tape, const ModelParamsT<T>& params, bool requires_grad) {
    ParamVarsT<T> pv;
    pv.tape = &tape;
    for (const auto& name : params.order) pv.vars.emplace(name, tape.leaf(params.tensors.at(name), requires_grad));
    return pv;
}

template <typename T>
VarT<T> ParamVarsT<T>::operator()(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ConfigError("unbound parameter tensor '" + name + "'");
    return it->second;
}

namespace {

bool is_gate_tensor(const std::string& name) {
    return name.find(".mod.") != std::string::npos || name.find("final.out") != std::string::npos;
}

} // namespace

template <typename T>
ModelParamsT<T> init_params(const ModelConfig& cfg, uint64_t seed, bool zero_gates) {
    cfg.validate();
    ModelParamsT<T> p;
    const int64_t d = cfg.hidden;
    const int64_t r = cfg.mlp_ratio;

    auto add_linear = [&](const std::string& name, int64_t k, int64_t m, bool bias) {
        p.add(name + ".w", TensorT<T>({k, m}));
        if (bias) p.add(name + ".b", TensorT<T>({m}, T(0)));
    };

    add_linear("time.mlp1", cfg.time_embed_dim, d, true);
    add_linear("time.mlp2", d, d, true);
    add_linear("up.embed", static_cast<int64_t>(cfg.up_patch) * cfg.up_patch * cfg.in_channels, d, true);
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string b = "up.blk" + std::to_string(i);
        add_linear(b + ".attn.qkv", d, 3 * d, true);
        add_linear(b + ".attn.out", d, d, true);
        add_linear(b + ".mlp.fc1", d, r * d, true);
        add_linear(b + ".mlp.fc2", r * d, d, true);
        add_linear(b + ".mod", d, 6 * d, true);
    }
    add_linear("up.final.mod", d, 2 * d, true);
    add_linear("up.final.out", d, static_cast<int64_t>(cfg.up_patch) * cfg.up_patch * cfg.out_channels, true);

    add_linear("down.embed", 4 * static_cast<int64_t>(cfg.in_channels), d, true);
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string b = "down.blk" + std::to_string(i);
        add_linear(b + ".sa.qkv", d, 3 * d, true);
        add_linear(b + ".sa.out", d, d, true);
        add_linear(b + ".ca.q", d, d, true);
        add_linear(b + ".ca.k", d, d, false); // bias-free so zero tokens give zero K/V
        add_linear(b + ".ca.v", d, d, false);
        add_linear(b + ".ca.out", d, d, true);
        add_linear(b + ".mlp.fc1", d, r * d, true);
        add_linear(b + ".mlp.fc2", r * d, d, true);
        add_linear(b + ".mod", d, 9 * d, true);
    }
    add_linear("down.final.mod", d, 2 * d, true);
    add_linear("down.final.out", d, 4 * static_cast<int64_t>(cfg.out_channels), true);

    // Xavier-uniform weights keyed by tensor position; biases stay zero.
    for (size_t ti = 0; ti < p.order.size(); ++ti) {
        const std::string& name = p.order[ti];
        TensorT<T>& t = p.tensors.at(name);
        if (t.rank() != 2) continue; // biases
        if (zero_gates && is_gate_tensor(name)) continue;
        const double a = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
        for (int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>((2.0 * rng_uniform(seed, Stream::param_init, ti, static_cast<uint64_t>(i)) - 1.0) * a);
    }
    return p;
}

ChunkSet select_chunks(const MaskBits& mask, int64_t H, int64_t W, int win) {
    if (mask.rank() != 3) throw DimensionError("select_chunks: mask must be (B, H/2, W/2)");
    const int64_t B = mask.dim(0), gh = mask.dim(1), gw = mask.dim(2);
    if (gh != H / 2 || gw != W / 2)
        throw DimensionError("select_chunks: mask grid must be (H/2, W/2)");
    if (win < 1 || gh % win != 0 || gw % win != 0)
        throw DimensionError("select_chunks: win must divide H/2 and W/2");
    ChunkSet cs;
    cs.win = win;
    cs.grid_h = gh;
    cs.grid_w = gw;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t wy = 0; wy < gh / win; ++wy)
            for (int64_t wx = 0; wx < gw / win; ++wx) {
                bool active = false;
                for (int64_t i = 0; i < win && !active; ++i)
                    for (int64_t j = 0; j < win && !active; ++j)
                        active = mask[(b * gh + wy * win + i) * gw + wx * win + j] != 0;
                if (active) cs.windows.push_back({b, wy, wx});
            }
    return cs;
}

MaskBits chunk_pixel_support(const ChunkSet& chunks, int64_t B, int64_t H, int64_t W) {
    MaskBits support({B, H, W}, 0);
    const int64_t side = 2 * chunks.win; // pixel footprint per window
    for (const auto& w : chunks.windows) {
        const int64_t y0 = w.wy * side, x0 = w.wx * side;
        for (int64_t i = 0; i < side; ++i)
            for (int64_t j = 0; j < side; ++j)
                support[(w.b * H + y0 + i) * W + x0 + j] = 1;
    }
    return support;
}

namespace {

// fixed 2D sine-cosine positional table for a list of (y, x) coordinates
template <typename T>
TensorT<T> sincos_pos_2d(const std::vector<std::pair<int64_t, int64_t>>& coords, int64_t dim) {
    const int64_t quarter = dim / 4;
    TensorT<T> out({static_cast<int64_t>(coords.size()), dim});
    for (size_t n = 0; n < coords.size(); ++n) {
        const double y = static_cast<double>(coords[n].first);
        const double x = static_cast<double>(coords[n].second);
        for (int64_t i = 0; i < quarter; ++i) {
            const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
            out.at(static_cast<int64_t>(n), 0 * quarter + i) = static_cast<T>(std::sin(y * omega));
            out.at(static_cast<int64_t>(n), 1 * quarter + i) = static_cast<T>(std::cos(y * omega));
            out.at(static_cast<int64_t>(n), 2 * quarter + i) = static_cast<T>(std::sin(x * omega));
            out.at(static_cast<int64_t>(n), 3 * quarter + i) = static_cast<T>(std::cos(x * omega));
        }
    }
    return out;
}

template <typename T>
TensorT<T> time_embedding_table(const std::vector<int>& t_steps, int64_t dim) {
    const int64_t half = dim / 2;
    TensorT<T> out({static_cast<int64_t>(t_steps.size()), dim});
    for (size_t n = 0; n < t_steps.size(); ++n) {
        const double t = static_cast<double>(t_steps[n]);
        for (int64_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            out.at(static_cast<int64_t>(n), i) = static_cast<T>(std::sin(t * freq));
            out.at(static_cast<int64_t>(n), half + i) = static_cast<T>(std::cos(t * freq));
        }
    }
    return out;
}

// t_feat = mlp2(silu(mlp1(sincos(t)))), one row per batch item
template <typename T>
VarT<T> time_features(TapeT<T>& tape, const std::vector<int>& t_steps,
                      const ParamVarsT<T>& P, const ModelConfig& cfg) {
    auto emb = tape.constant(time_embedding_table<T>(t_steps, cfg.time_embed_dim));
    auto h = ad::silu(ad::linear(emb, P("time.mlp1.w"), P("time.mlp1.b")));
    return ad::linear(h, P("time.mlp2.w"), P("time.mlp2.b"));
}

// x * (1 + scale) + shift, per-row modulation
template <typename T>
VarT<T> modulate(VarT<T> x, VarT<T> shift, VarT<T> scale) {
    return ad::add_rows(ad::mul_rows(x, ad::affine(scale, T(1), T(1))), shift);
}

// softmax(q k^T / sqrt(dh)) v with already-split heads, then merge + project
template <typename T>
VarT<T> attn_core(VarT<T> q_heads, VarT<T> k_heads, VarT<T> v_heads, int heads,
                  const ParamVarsT<T>& P, const std::string& out_prefix) {
    const int64_t dh = q_heads.val().dim(2);
    auto scores = ad::affine(ad::bmm(q_heads, ad::transpose12(k_heads)),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto attn = ad::softmax_last(scores);
    auto out = ad::merge_heads(ad::bmm(attn, v_heads), heads);
    return ad::linear(out, P(out_prefix + ".w"), P(out_prefix + ".b"));
}

template <typename T>
VarT<T> self_attention(TapeT<T>&, VarT<T> x, const ParamVarsT<T>& P,
                       const std::string& prefix, int heads) {
    const int64_t d = x.val().dim(2);
    auto qkv = ad::linear(x, P(prefix + ".qkv.w"), P(prefix + ".qkv.b"));
    auto q = ad::split_heads(ad::slice_last(qkv, 0, d), heads);
    auto k = ad::split_heads(ad::slice_last(qkv, d, d), heads);
    auto v = ad::split_heads(ad::slice_last(qkv, 2 * d, d), heads);
    return attn_core(q, k, v, heads, P, prefix + ".out");
}

template <typename T>
VarT<T> cross_attention(TapeT<T>&, VarT<T> x, VarT<T> k_heads, VarT<T> v_heads,
                        const ParamVarsT<T>& P, const std::string& prefix, int heads) {
    auto q = ad::split_heads(ad::linear(x, P(prefix + ".q.w"), P(prefix + ".q.b")), heads);
    return attn_core(q, k_heads, v_heads, heads, P, prefix + ".out");
}

// flat-index map for (B, n_tok, p*p*C) tokens -> (B, C, H, W) pixels
std::vector<int64_t> unpatchify_index(int64_t B, int64_t C, int64_t H, int64_t W, int64_t p) {
    const int64_t gw = W / p;
    std::vector<int64_t> idx(static_cast<size_t>(B * C * H * W));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x, ++o) {
                    const int64_t ti = (y / p) * gw + (x / p);
                    const int64_t j = (c * p + (y % p)) * p + (x % p);
                    idx[o] = (b * (H / p) * gw + ti) * (p * p * C) + j;
                }
    return idx;
}

// plain-tensor patchify of the (constant) network input
template <typename T>
TensorT<T> patchify(const TensorT<T>& x, int64_t p) {
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t gh = H / p, gw = W / p;
    TensorT<T> out({B, gh * gw, p * p * C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t ty = 0; ty < gh; ++ty)
            for (int64_t tx = 0; tx < gw; ++tx)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t dy = 0; dy < p; ++dy)
                        for (int64_t dx = 0; dx < p; ++dx)
                            out.at(b, ty * gw + tx, (c * p + dy) * p + dx) = x.at(b, c, ty * p + dy, tx * p + dx);
    return out;
}

} // namespace

template <typename T>
UpstreamOutT<T> upstream_forward(TapeT<T>& tape, const TensorT<T>& x_in,
                                 const std::vector<int>& t_steps,
                                 const ParamVarsT<T>& P, const ModelConfig& cfg) {
    check_image4(x_in, "upstream_forward");
    const int64_t B = x_in.dim(0), H = x_in.dim(2), W = x_in.dim(3);
    if (x_in.dim(1) != cfg.in_channels) throw DimensionError("upstream_forward: channel mismatch");
    cfg.validate_input(H, W);
    if (static_cast<int64_t>(t_steps.size()) != B) throw DimensionError("upstream_forward: one t per batch item");

    const int64_t p = cfg.up_patch, d = cfg.hidden;
    const int64_t gh = H / p, gw = W / p, n = gh * gw;

    VarT<T> t_feat = time_features(tape, t_steps, P, cfg);
    VarT<T> t_silu = ad::silu(t_feat);

    auto tokens_raw = tape.constant(patchify(x_in, p));
    VarT<T> x = ad::linear(tokens_raw, P("up.embed.w"), P("up.embed.b"));
    std::vector<std::pair<int64_t, int64_t>> coords;
    coords.reserve(static_cast<size_t>(n));
    for (int64_t ty = 0; ty < gh; ++ty)
        for (int64_t tx = 0; tx < gw; ++tx) coords.push_back({ty, tx});
    x = ad::add_bcast(x, tape.constant(sincos_pos_2d<T>(coords, d)));

    for (int i = 0; i < cfg.layers; ++i) {
        const std::string blk = "up.blk" + std::to_string(i);
        auto mod = ad::linear(t_silu, P(blk + ".mod.w"), P(blk + ".mod.b"));
        auto sh1 = ad::slice_last(mod, 0, d), sc1 = ad::slice_last(mod, d, d), g1 = ad::slice_last(mod, 2 * d, d);
        auto sh2 = ad::slice_last(mod, 3 * d, d), sc2 = ad::slice_last(mod, 4 * d, d), g2 = ad::slice_last(mod, 5 * d, d);
        auto a = modulate(ad::layer_norm_last(x), sh1, sc1);
        auto attn_out = self_attention(tape, a, P, blk + ".attn", cfg.heads);
        x = ad::add(x, ad::mul_rows(attn_out, g1));
        auto m = modulate(ad::layer_norm_last(x), sh2, sc2);
        auto ff = ad::linear(ad::gelu(ad::linear(m, P(blk + ".mlp.fc1.w"), P(blk + ".mlp.fc1.b"))),
                             P(blk + ".mlp.fc2.w"), P(blk + ".mlp.fc2.b"));
        x = ad::add(x, ad::mul_rows(ff, g2));
    }

    auto fmod = ad::linear(t_silu, P("up.final.mod.w"), P("up.final.mod.b"));
    auto fsh = ad::slice_last(fmod, 0, d), fsc = ad::slice_last(fmod, d, d);
    auto y = modulate(ad::layer_norm_last(x), fsh, fsc);
    auto patch_out = ad::linear(y, P("up.final.out.w"), P("up.final.out.b"));
    auto coarse = ad::gather_flat(patch_out, unpatchify_index(B, cfg.out_channels, H, W, p),
                                  {B, cfg.out_channels, H, W});
    return {coarse, x};
}

template <typename T>
KVCacheT<T> precompute_kv(TapeT<T>& tape, VarT<T> global_tokens,
                          const ParamVarsT<T>& P, const ModelConfig& cfg) {
    (void)tape;
    KVCacheT<T> kv;
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string blk = "down.blk" + std::to_string(i);
        kv.k.push_back(ad::split_heads(ad::linear_nobias(global_tokens, P(blk + ".ca.k.w")), cfg.heads));
        kv.v.push_back(ad::split_heads(ad::linear_nobias(global_tokens, P(blk + ".ca.v.w")), cfg.heads));
    }
    return kv;
}

template <typename T>
DownstreamOutT<T> downstream_forward(TapeT<T>& tape, const TensorT<T>& x_in, const ChunkSet& chunks,
                                     const KVCacheT<T>* kv, VarT<T> global_tokens,
                                     const std::vector<int>& t_steps,
                                     const ParamVarsT<T>& P, const ModelConfig& cfg,
                                     int chunk_group) {
    DownstreamOutT<T> out;
    if (chunks.empty()) return out;
    check_image4(x_in, "downstream_forward");
    const int64_t H = x_in.dim(2), W = x_in.dim(3);
    cfg.validate_input(H, W);
    if (kv == nullptr && !global_tokens.valid())
        throw ConfigError("downstream_forward: need a KV cache or global tokens");

    const int64_t d = cfg.hidden;
    const int64_t win = chunks.win, w2 = win * win;
    const int64_t gw = chunks.grid_w;
    const int64_t group = chunk_group > 0 ? chunk_group : cfg.max_parallel_chunks;

    // 2x2-patch token grid of the raw input, (B, (H/2)*(W/2), 4*Cin)
    const TensorT<T> grid_raw = patchify(x_in, 2);

    VarT<T> t_feat = time_features(tape, t_steps, P, cfg);
    VarT<T> t_silu = ad::silu(t_feat);
    // per-block modulation rows for every batch item, gathered per chunk later
    std::vector<VarT<T>> mods;
    for (int i = 0; i < cfg.layers; ++i)
        mods.push_back(ad::linear(t_silu, P("down.blk" + std::to_string(i) + ".mod.w"),
                                  P("down.blk" + std::to_string(i) + ".mod.b")));
    auto fmod_all = ad::linear(t_silu, P("down.final.mod.w"), P("down.final.mod.b"));

    const int64_t n_chunks = chunks.count();
    for (int64_t g0 = 0; g0 < n_chunks; g0 += group) {
        const int64_t g1 = std::min(n_chunks, g0 + group);
        const int64_t g = g1 - g0;

        // raw window tokens, positional rows, per-chunk batch/head row ids
        TensorT<T> raw({g, w2, 4 * static_cast<int64_t>(cfg.in_channels)});
        std::vector<std::pair<int64_t, int64_t>> coords;
        coords.reserve(static_cast<size_t>(g * w2));
        std::vector<int64_t> trow_idx;
        std::vector<int64_t> head_idx;
        for (int64_t ci = g0; ci < g1; ++ci) {
            const auto& wnd = chunks.windows[static_cast<size_t>(ci)];
            trow_idx.push_back(wnd.b);
            for (int h = 0; h < cfg.heads; ++h) head_idx.push_back(wnd.b * cfg.heads + h);
            for (int64_t r = 0; r < win; ++r)
                for (int64_t s = 0; s < win; ++s) {
                    const int64_t ty = wnd.wy * win + r, tx = wnd.wx * win + s;
                    coords.push_back({ty, tx});
                    const int64_t ti = ty * gw + tx;
                    for (int64_t j = 0; j < 4 * cfg.in_channels; ++j)
                        raw.at(ci - g0, r * win + s, j) = grid_raw.at(wnd.b, ti, j);
                }
        }

        VarT<T> x = ad::linear(tape.constant(std::move(raw)), P("down.embed.w"), P("down.embed.b"));
        x = ad::add_bcast(x, tape.constant(sincos_pos_2d<T>(coords, d).reshaped({g, w2, d})));

        for (int i = 0; i < cfg.layers; ++i) {
            const std::string blk = "down.blk" + std::to_string(i);
            auto mod = ad::gather_rows(mods[static_cast<size_t>(i)], trow_idx);
            auto sh1 = ad::slice_last(mod, 0, d), sc1 = ad::slice_last(mod, d, d), gt1 = ad::slice_last(mod, 2 * d, d);
            auto sh2 = ad::slice_last(mod, 3 * d, d), sc2 = ad::slice_last(mod, 4 * d, d), gt2 = ad::slice_last(mod, 5 * d, d);
            auto sh3 = ad::slice_last(mod, 6 * d, d), sc3 = ad::slice_last(mod, 7 * d, d), gt3 = ad::slice_last(mod, 8 * d, d);

            auto a = modulate(ad::layer_norm_last(x), sh1, sc1);
            auto sa = self_attention(tape, a, P, blk + ".sa", cfg.heads);
            x = ad::add(x, ad::mul_rows(sa, gt1));

            VarT<T> k_rows, v_rows;
            if (kv != nullptr) {
                k_rows = ad::gather_rows(kv->k[static_cast<size_t>(i)], head_idx);
                v_rows = ad::gather_rows(kv->v[static_cast<size_t>(i)], head_idx);
            } else {
                // recompute the projections for this group instead of caching
                auto kf = ad::split_heads(ad::linear_nobias(global_tokens, P(blk + ".ca.k.w")), cfg.heads);
                auto vf = ad::split_heads(ad::linear_nobias(global_tokens, P(blk + ".ca.v.w")), cfg.heads);
                k_rows = ad::gather_rows(kf, head_idx);
                v_rows = ad::gather_rows(vf, head_idx);
            }
            auto c = modulate(ad::layer_norm_last(x), sh2, sc2);
            auto ca = cross_attention(tape, c, k_rows, v_rows, P, blk + ".ca", cfg.heads);
            x = ad::add(x, ad::mul_rows(ca, gt2));

            auto m = modulate(ad::layer_norm_last(x), sh3, sc3);
            auto ff = ad::linear(ad::gelu(ad::linear(m, P(blk + ".mlp.fc1.w"), P(blk + ".mlp.fc1.b"))),
                                 P(blk + ".mlp.fc2.w"), P(blk + ".mlp.fc2.b"));
            x = ad::add(x, ad::mul_rows(ff, gt3));
        }

        auto fmod = ad::gather_rows(fmod_all, trow_idx);
        auto fsh = ad::slice_last(fmod, 0, d), fsc = ad::slice_last(fmod, d, d);
        auto y = modulate(ad::layer_norm_last(x), fsh, fsc);
        out.refined.push_back(ad::linear(y, P("down.final.out.w"), P("down.final.out.b")));

        std::vector<int64_t> pix;
        pix.reserve(static_cast<size_t>(g * w2 * 4 * cfg.out_channels));
        for (int64_t ci = g0; ci < g1; ++ci) {
            const auto& wnd = chunks.windows[static_cast<size_t>(ci)];
            for (int64_t r = 0; r < win; ++r)
                for (int64_t s = 0; s < win; ++s)
                    for (int64_t c = 0; c < cfg.out_channels; ++c)
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dx = 0; dx < 2; ++dx) {
                                const int64_t y_px = 2 * (wnd.wy * win + r) + dy;
                                const int64_t x_px = 2 * (wnd.wx * win + s) + dx;
                                pix.push_back(((wnd.b * cfg.out_channels + c) * H + y_px) * W + x_px);
                            }
        }
        out.pixel_idx.push_back(std::move(pix));
    }
    return out;
}

template <typename T>
VarT<T> combine_predictions(TapeT<T>& tape, VarT<T> coarse_pred, const DownstreamOutT<T>& down) {
    (void)tape;
    VarT<T> pred = coarse_pred;
    for (size_t g = 0; g < down.refined.size(); ++g)
        pred = ad::overwrite_scatter(pred, down.refined[g], down.pixel_idx[g]);
    return pred;
}

template <typename T>
ModelForwardOutT<T> model_forward(TapeT<T>& tape, const TensorT<T>& x_t, const TensorT<T>& y0,
                                  const MaskBits& mask, const std::vector<int>& t_steps,
                                  const ParamVarsT<T>& P, const ModelConfig& cfg,
                                  bool use_kv_cache, int chunk_group) {
    check_image4(x_t, "model_forward");
    if (!x_t.same_shape(y0)) throw DimensionError("model_forward: x_t/y0 shape mismatch");
    const int64_t B = x_t.dim(0), C = x_t.dim(1), H = x_t.dim(2), W = x_t.dim(3);
    if (2 * C != cfg.in_channels) throw DimensionError("model_forward: in_channels must equal 2*C");
    if (C != cfg.out_channels) throw DimensionError("model_forward: out_channels must equal C");

    // channel concat of the diffusion state and the conditioning image
    TensorT<T> x_in({B, 2 * C, H, W});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    x_in.at(b, c, i, j) = x_t.at(b, c, i, j);
                    x_in.at(b, C + c, i, j) = y0.at(b, c, i, j);
                }

    ModelForwardOutT<T> out;
    auto up = upstream_forward(tape, x_in, t_steps, P, cfg);
    out.pred_up = up.coarse_pred;
    out.chunks = select_chunks(mask, H, W, cfg.win);
    if (out.chunks.empty()) {
        out.pred_full = up.coarse_pred;
        return out;
    }
    DownstreamOutT<T> down;
    if (use_kv_cache) {
        KVCacheT<T> kv = precompute_kv(tape, up.global_tokens, P, cfg);
        down = downstream_forward(tape, x_in, out.chunks, &kv, VarT<T>{}, t_steps, P, cfg, chunk_group);
    } else {
        down = downstream_forward(tape, x_in, out.chunks, static_cast<const KVCacheT<T>*>(nullptr),
                                  up.global_tokens, t_steps, P, cfg, chunk_group);
    }
    out.pred_full = combine_predictions(tape, up.coarse_pred, down);
    return out;
}

template <typename T>
ModelPrediction<T> predict(const TensorT<T>& x_t, const TensorT<T>& y0, const MaskBits& mask,
                           int t, const ModelParamsT<T>& params, const ModelConfig& cfg) {
    TapeT<T> tape;
    auto P = ParamVarsT<T>::bind(tape, params, false);
    std::vector<int> t_steps(static_cast<size_t>(x_t.dim(0)), t);
    auto out = model_forward(tape, x_t, y0, mask, t_steps, P, cfg);
    ModelPrediction<T> p;
    p.pred_full = out.pred_full.val();
    p.pred_up = out.pred_up.val();
    p.selected_windows = out.chunks.count();
    return p;
}

FlopsEstimate flops_estimate(const ModelConfig& cfg, int64_t H, int64_t W, int64_t n_selected_windows) {
    cfg.validate();
    if (n_selected_windows < 0) throw ConfigError("flops_estimate: negative window count");
    const double d = cfg.hidden, r = cfg.mlp_ratio, L = cfg.layers;
    const double p = cfg.up_patch;
    const double n_up = static_cast<double>(H) * static_cast<double>(W) / (p * p);
    const double w2 = static_cast<double>(cfg.win) * cfg.win;

    FlopsEstimate f;
    // global stream: time MLP, patch embed, DiT blocks, unpatchify head, K/V pre-projection
    f.upstream = cfg.time_embed_dim * d + d * d;
    f.upstream += n_up * (p * p * cfg.in_channels) * d;
    f.upstream += L * (d * 6 * d + 4 * n_up * d * d + 2 * n_up * n_up * d + 2 * r * n_up * d * d);
    f.upstream += d * 2 * d + n_up * d * (p * p * cfg.out_channels);
    f.upstream += L * 2 * n_up * d * d; // cached K,V

    if (n_selected_windows > 0) {
        double per_chunk = 0.0;
        per_chunk += w2 * (4.0 * cfg.in_channels) * d;              // embed
        per_chunk += L * (d * 9 * d);                               // adaLN modulation
        per_chunk += L * (4 * w2 * d * d + 2 * w2 * w2 * d);        // MSA
        per_chunk += L * (2 * w2 * d * d + 2 * w2 * n_up * d);      // MCA
        per_chunk += L * (2 * r * w2 * d * d);                      // FFN
        per_chunk += d * 2 * d + w2 * d * (4.0 * cfg.out_channels); // final modulate + head
        f.downstream = static_cast<double>(n_selected_windows) * per_chunk;
    }
    return f;
}

namespace {

template <typename V>
void write_pod(std::ofstream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_pod(std::ifstream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError("checkpoint: truncated file");
    return v;
}

constexpr char kMagic[8] = {'Q', 'D', 'M', 'C', 'K', 'P', 'T', '1'};

} // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const CheckpointMeta& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 8);
    write_pod<uint32_t>(os, 1u);
    const ModelConfig& c = meta.config;
    for (int v : {c.layers, c.hidden, c.heads, c.up_patch, c.win, c.mlp_ratio,
                  c.max_parallel_chunks, c.in_channels, c.out_channels, c.time_embed_dim})
        write_pod<int32_t>(os, static_cast<int32_t>(v));
    write_pod<int32_t>(os, static_cast<int32_t>(meta.T));
    for (double v : {meta.eta1, meta.etaT, meta.p, meta.kappa}) write_pod<double>(os, v);
    write_pod<uint32_t>(os, static_cast<uint32_t>(params.order.size()));
    for (const auto& name : params.order) {
        const Tensor& t = params.tensors.at(name);
        write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) write_pod<int64_t>(os, t.dim(i));
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!os) throw DataError("checkpoint: write failed for '" + path + "'");
}

std::pair<ModelParams, CheckpointMeta> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw DataError("checkpoint: bad magic");
    const uint32_t version = read_pod<uint32_t>(is);
    if (version != 1) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    CheckpointMeta meta;
    ModelConfig& c = meta.config;
    c.layers = read_pod<int32_t>(is);
    c.hidden = read_pod<int32_t>(is);
    c.heads = read_pod<int32_t>(is);
    c.up_patch = read_pod<int32_t>(is);
    c.win = read_pod<int32_t>(is);
    c.mlp_ratio = read_pod<int32_t>(is);
    c.max_parallel_chunks = read_pod<int32_t>(is);
    c.in_channels = read_pod<int32_t>(is);
    c.out_channels = read_pod<int32_t>(is);
    c.time_embed_dim = read_pod<int32_t>(is);
    meta.T = read_pod<int32_t>(is);
    meta.eta1 = read_pod<double>(is);
    meta.etaT = read_pod<double>(is);
    meta.p = read_pod<double>(is);
    meta.kappa = read_pod<double>(is);
    const uint32_t n_tensors = read_pod<uint32_t>(is);
    ModelParams params;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const uint32_t name_len = read_pod<uint32_t>(is);
        if (name_len > 4096) throw DataError("checkpoint: unreasonable name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t ndim = read_pod<uint32_t>(is);
        if (ndim == 0 || ndim > 8) throw DataError("checkpoint: unreasonable rank");
        Shape shape;
        for (uint32_t k = 0; k < ndim; ++k) shape.push_back(read_pod<int64_t>(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!is) throw DataError("checkpoint: truncated tensor payload");
        params.add(name, std::move(t));
    }
    return {std::move(params), meta};
}

#define QDM_INSTANTIATE_MODEL(T) \
    template struct ModelParamsT<T>; \
    template struct ParamVarsT<T>; \
    template ModelParamsT<T> init_params<T>(const ModelConfig&, uint64_t, bool); \
    template UpstreamOutT<T> upstream_forward<T>(TapeT<T>&, const TensorT<T>&, const std::vector<int>&, const ParamVarsT<T>&, const ModelConfig&); \
    template KVCacheT<T> precompute_kv<T>(TapeT<T>&, VarT<T>, const ParamVarsT<T>&, const ModelConfig&); \
    template DownstreamOutT<T> downstream_forward<T>(TapeT<T>&, const TensorT<T>&, const ChunkSet&, const KVCacheT<T>*, VarT<T>, const std::vector<int>&, const ParamVarsT<T>&, const ModelConfig&, int); \
    template VarT<T> combine_predictions<T>(TapeT<T>&, VarT<T>, const DownstreamOutT<T>&); \
    template ModelForwardOutT<T> model_forward<T>(TapeT<T>&, const TensorT<T>&, const TensorT<T>&, const MaskBits&, const std::vector<int>&, const ParamVarsT<T>&, const ModelConfig&, bool, int); \
    template ModelPrediction<T> predict<T>(const TensorT<T>&, const TensorT<T>&, const MaskBits&, int, const ModelParamsT<T>&, const ModelConfig&);

QDM_INSTANTIATE_MODEL(float)
QDM_INSTANTIATE_MODEL(double)
#undef QDM_INSTANTIATE_MODEL

} // namespace qdm

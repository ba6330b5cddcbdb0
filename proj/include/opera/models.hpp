#pragma once

#include <string>
#include <vector>

#include "opera/dsp.hpp"
#include "opera/tape.hpp"

namespace opera::models {

using ad::Array;
using ad::ParamStore;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

struct EncoderConfig {
    std::string kind = "vit";  // "vit" or "cnn"
    int embed_dim = 64;
    int depth = 2;
    int heads = 2;
    int patch = 4;
    int max_positions = 1024;
    int min_input_frames = 8;
    int proj_dim = 32;
    int decoder_depth = 1;
    int decoder_heads = 2;

    void validate() const;
    std::string to_text() const;
    static EncoderConfig from_text(const std::string& text);
};

struct PatchGrid {
    int64_t rows = 0;  // time axis, in patches
    int64_t cols = 0;  // mel axis
    int64_t tokens() const { return rows * cols; }
};

struct MaskPlan {
    int64_t n_tokens = 0;
    double ratio = 0.0;
    std::vector<int64_t> masked;  // sorted, unique
};

int64_t pad_to_multiple(int64_t frames, int patch);
PatchGrid patch_grid(int64_t padded_frames, int n_mels, int patch);
dsp::Spectrogram pad_to_patch(const dsp::Spectrogram& spec, int patch);

// round(ratio*n) distinct indices, uniform without replacement
MaskPlan sample_mask(int64_t n_tokens, double ratio, Rng& rng);
std::vector<int64_t> visible_indices(const MaskPlan& plan);

// ---- parameter initialization (names are the checkpoint contract) ----

template <typename T>
Array<T> trunc_normal_array(Rng& rng, Shape dims, double stddev) {
    Array<T> a = Array<T>::zeros(std::move(dims));
    for (T& v : a.v) v = static_cast<T>(rng.trunc_normal(stddev));
    return a;
}

namespace detail {

template <typename T>
void init_block(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int d) {
    ps.add(prefix + ".ln1.g", Array<T>::full({d}, T(1)));
    ps.add(prefix + ".ln1.b", Array<T>::zeros({d}));
    for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
        ps.add(prefix + w, trunc_normal_array<T>(rng, {d, d}, 0.02));
    for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
        ps.add(prefix + b, Array<T>::zeros({d}));
    ps.add(prefix + ".ln2.g", Array<T>::full({d}, T(1)));
    ps.add(prefix + ".ln2.b", Array<T>::zeros({d}));
    ps.add(prefix + ".mlp.w1", trunc_normal_array<T>(rng, {d, 4 * d}, 0.02));
    ps.add(prefix + ".mlp.b1", Array<T>::zeros({4 * d}));
    ps.add(prefix + ".mlp.w2", trunc_normal_array<T>(rng, {4 * d, d}, 0.02));
    ps.add(prefix + ".mlp.b2", Array<T>::zeros({d}));
}

}  // namespace detail

template <typename T>
void init_encoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.embed_dim;
    if (cfg.kind == "vit") {
        // the patch embedding feeds the residual stream without a skip path, so
        // keep it scale-preserving; unit-scale positions give mean pooling a
        // position-resolved view of token content from the first step
        const double patch_std = 1.0 / std::sqrt(static_cast<double>(cfg.patch * cfg.patch));
        ps.add("enc.patch.w", trunc_normal_array<T>(rng, {cfg.patch * cfg.patch, d}, patch_std));
        ps.add("enc.patch.b", Array<T>::zeros({d}));
        ps.add("enc.pos", trunc_normal_array<T>(rng, {cfg.max_positions, d}, 1.0));
        for (int i = 0; i < cfg.depth; ++i)
            detail::init_block(ps, rng, "enc.b" + std::to_string(i), d);
        ps.add("enc.ln.g", Array<T>::full({d}, T(1)));
        ps.add("enc.ln.b", Array<T>::zeros({d}));
    } else {
        const int c1 = d / 4, c2 = d / 2;
        ps.add("enc.c0.w", trunc_normal_array<T>(rng, {c1, 1, 3, 3}, 0.02));
        ps.add("enc.c0.b", Array<T>::zeros({c1}));
        ps.add("enc.c1.w", trunc_normal_array<T>(rng, {c2, c1, 3, 3}, 0.02));
        ps.add("enc.c1.b", Array<T>::zeros({c2}));
        ps.add("enc.c2.w", trunc_normal_array<T>(rng, {d, c2, 3, 3}, 0.02));
        ps.add("enc.c2.b", Array<T>::zeros({d}));
    }
}

// scale-preserving init: the projector has no residual path, so a 0.02 std
// would shrink embeddings ~250x and leave the bilinear similarities flat
template <typename T>
void init_projector(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) {
    const int d = cfg.embed_dim, p = cfg.proj_dim;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    ps.add("proj.w1", trunc_normal_array<T>(rng, {d, d}, s));
    ps.add("proj.b1", Array<T>::zeros({d}));
    ps.add("proj.w2", trunc_normal_array<T>(rng, {d, p}, s));
    ps.add("proj.b2", Array<T>::zeros({p}));
}

template <typename T>
void init_bilinear_head(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) {
    const int p = cfg.proj_dim;
    Array<T> w = trunc_normal_array<T>(rng, {p, p}, 0.02);  // identity plus noise
    for (int i = 0; i < p; ++i) w.v[static_cast<size_t>(i * p + i)] += T(1);
    ps.add("head.W", std::move(w));
}

template <typename T>
void init_decoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) {
    const int d = cfg.embed_dim;
    ps.add("dec.mask", trunc_normal_array<T>(rng, {d}, 0.02));
    ps.add("dec.pos", trunc_normal_array<T>(rng, {cfg.max_positions, d}, 0.02));
    for (int i = 0; i < cfg.decoder_depth; ++i)
        detail::init_block(ps, rng, "dec.b" + std::to_string(i), d);
    ps.add("dec.ln.g", Array<T>::full({d}, T(1)));
    ps.add("dec.ln.b", Array<T>::zeros({d}));
    ps.add("dec.out.w", trunc_normal_array<T>(rng, {d, cfg.patch * cfg.patch}, 0.02));
    ps.add("dec.out.b", Array<T>::zeros({cfg.patch * cfg.patch}));
}

// ---- forward graph builders ----

// [B, F, M] -> [B, rows*cols, patch*patch], time-major row scan over patches
template <typename T>
Tensor<T> patch_cells(Tensor<T> spec, int patch) {
    const Shape& s = spec.dims();
    if (s.size() != 3) throw ShapeError("patch_cells expects [batch, frames, mels]");
    const int64_t B = s[0], F = s[1], M = s[2], p = patch;
    if (F % p != 0 || M % p != 0)
        throw ContractError("spectrogram not padded to a patch multiple");
    Tensor<T> r = ad::reshape(spec, {B, F / p, p, M / p, p});
    Tensor<T> t = ad::permute(r, {0, 1, 3, 2, 4});
    return ad::reshape(t, {B, (F / p) * (M / p), p * p});
}

// same rearrangement on a plain array (reconstruction targets)
template <typename T>
Array<T> patch_cells_array(const Array<T>& spec, int patch) {
    Tape<T> tp;
    return patch_cells(tp.constant(spec), patch).val();
}

template <typename T>
Tensor<T> patch_tokens(Tape<T>& tp, ParamStore<T>& ps, const EncoderConfig& cfg,
                       Tensor<T> spec, PatchGrid* grid_out = nullptr) {
    const Shape& s = spec.dims();
    if (s.size() != 3) throw ShapeError("patch_tokens expects [batch, frames, mels]");
    const PatchGrid grid = patch_grid(s[1], static_cast<int>(s[2]), cfg.patch);
    if (grid.tokens() > cfg.max_positions)
        throw ConfigError("token count " + std::to_string(grid.tokens()) +
                          " exceeds max_positions " + std::to_string(cfg.max_positions));
    if (grid_out) *grid_out = grid;
    Tensor<T> cells = patch_cells(spec, cfg.patch);
    Tensor<T> emb = ad::add(ad::matmul(cells, tp.param(ps, "enc.patch.w")),
                            tp.param(ps, "enc.patch.b"));
    std::vector<int64_t> iota(static_cast<size_t>(grid.tokens()));
    for (size_t i = 0; i < iota.size(); ++i) iota[i] = static_cast<int64_t>(i);
    Tensor<T> pos = ad::index_select(tp.param(ps, "enc.pos"), 0, iota);
    return ad::add(emb, pos);
}

template <typename T>
Tensor<T> transformer_blocks(Tape<T>& tp, ParamStore<T>& ps, Tensor<T> x,
                             const std::string& prefix, int depth, int heads) {
    const Shape& s = x.dims();
    const int64_t B = s[0], N = s[1], d = s[2];
    if (d % heads != 0) throw ConfigError("embed dim not divisible by head count");
    const int64_t dh = d / heads;
    auto split_heads = [&](Tensor<T> t) {
        return ad::reshape(ad::permute(ad::reshape(t, {B, N, heads, dh}), {0, 2, 1, 3}),
                           {B * heads, N, dh});
    };
    for (int i = 0; i < depth; ++i) {
        const std::string bp = prefix + ".b" + std::to_string(i);
        Tensor<T> ln1 = ad::layer_norm(x, tp.param(ps, bp + ".ln1.g"),
                                       tp.param(ps, bp + ".ln1.b"));
        Tensor<T> q = split_heads(ad::add(ad::matmul(ln1, tp.param(ps, bp + ".attn.wq")),
                                          tp.param(ps, bp + ".attn.bq")));
        Tensor<T> k = split_heads(ad::add(ad::matmul(ln1, tp.param(ps, bp + ".attn.wk")),
                                          tp.param(ps, bp + ".attn.bk")));
        Tensor<T> v = split_heads(ad::add(ad::matmul(ln1, tp.param(ps, bp + ".attn.wv")),
                                          tp.param(ps, bp + ".attn.bv")));
        Tensor<T> att = ad::softmax(
            ad::scale(ad::matmul(q, ad::permute(k, {0, 2, 1})),
                      static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)))));
        Tensor<T> ctx = ad::reshape(
            ad::permute(ad::reshape(ad::matmul(att, v), {B, heads, N, dh}), {0, 2, 1, 3}),
            {B, N, d});
        x = ad::add(x, ad::add(ad::matmul(ctx, tp.param(ps, bp + ".attn.wo")),
                               tp.param(ps, bp + ".attn.bo")));
        Tensor<T> ln2 = ad::layer_norm(x, tp.param(ps, bp + ".ln2.g"),
                                       tp.param(ps, bp + ".ln2.b"));
        Tensor<T> hidden = ad::gelu(ad::add(ad::matmul(ln2, tp.param(ps, bp + ".mlp.w1")),
                                            tp.param(ps, bp + ".mlp.b1")));
        Tensor<T> mlp = ad::add(ad::matmul(hidden, tp.param(ps, bp + ".mlp.w2")),
                                tp.param(ps, bp + ".mlp.b2"));
        x = ad::add(x, mlp);
    }
    return x;
}

// conv shorthand reading weight and bias from the store
template <typename T>
Tensor<T> stored_conv(Tape<T>& tp, ParamStore<T>& ps, const std::string& prefix, Tensor<T> x) {
    return ad::conv2d(x, tp.param(ps, prefix + ".w"), tp.param(ps, prefix + ".b"), 2, 1);
}

// [B, F, M] -> [B, d]
template <typename T>
Tensor<T> encode_batch(Tape<T>& tp, ParamStore<T>& ps, const EncoderConfig& cfg,
                       Tensor<T> spec) {
    const Shape& s = spec.dims();
    if (s.size() != 3) throw ShapeError("encode_batch expects [batch, frames, mels]");
    if (s[1] < cfg.min_input_frames)
        throw InvalidInputError("input has " + std::to_string(s[1]) +
                                " frames; encoder minimum is " +
                                std::to_string(cfg.min_input_frames));
    if (cfg.kind == "vit") {
        Tensor<T> tokens = patch_tokens(tp, ps, cfg, spec);
        Tensor<T> enc = transformer_blocks(tp, ps, tokens, "enc", cfg.depth, cfg.heads);
        Tensor<T> ln = ad::layer_norm(enc, tp.param(ps, "enc.ln.g"), tp.param(ps, "enc.ln.b"));
        return ad::mean(ln, {1});
    }
    Tensor<T> x = ad::reshape(spec, {s[0], 1, s[1], s[2]});
    for (int i = 0; i < 3; ++i)
        x = ad::relu(stored_conv(tp, ps, "enc.c" + std::to_string(i), x));
    return ad::mean(x, {2, 3});
}

// [B, d] -> [B, p]
template <typename T>
Tensor<T> project(Tape<T>& tp, ParamStore<T>& ps, Tensor<T> emb) {
    Tensor<T> h = ad::relu(ad::add(ad::matmul(emb, tp.param(ps, "proj.w1")),
                                   tp.param(ps, "proj.b1")));
    return ad::add(ad::matmul(h, tp.param(ps, "proj.w2")), tp.param(ps, "proj.b2"));
}

// scores[i][j] = za[i]^T W zb[j]
template <typename T>
Tensor<T> bilinear_scores(Tape<T>& tp, ParamStore<T>& ps, Tensor<T> za, Tensor<T> zb) {
    return ad::matmul(ad::matmul(za, tp.param(ps, "head.W")), ad::permute(zb, {1, 0}));
}

template <typename T>
T bilinear_similarity(const std::vector<T>& z1, const std::vector<T>& z2, const Array<T>& w) {
    const int64_t p = static_cast<int64_t>(z1.size());
    if (static_cast<int64_t>(z2.size()) != p || w.dims != Shape{p, p})
        throw ShapeError("bilinear similarity dimension mismatch");
    T acc = T(0);
    for (int64_t i = 0; i < p; ++i) {
        T row = T(0);
        for (int64_t j = 0; j < p; ++j) row += w.v[static_cast<size_t>(i * p + j)] * z2[static_cast<size_t>(j)];
        acc += z1[static_cast<size_t>(i)] * row;
    }
    return acc;
}

template <typename T>
struct Reconstruction {
    Tensor<T> pred;                   // [B, n_tokens, patch*patch]
    Array<T> target;                  // same shape, constant
    std::vector<uint8_t> token_mask;  // B * n_tokens, 1 = masked
    PatchGrid grid;
};

// encoder sees visible tokens only; decoder fills masked slots with a learned
// embedding and predicts every patch's cells
template <typename T>
Reconstruction<T> reconstruct(Tape<T>& tp, ParamStore<T>& ps, const EncoderConfig& cfg,
                              const Array<T>& spec_batch, const std::vector<MaskPlan>& plans) {
    if (spec_batch.dims.size() != 3)
        throw ShapeError("reconstruct expects [batch, frames, mels]");
    const int64_t B = spec_batch.dims[0];
    if (static_cast<int64_t>(plans.size()) != B)
        throw ContractError("need one mask plan per batch item");
    Tensor<T> spec = tp.constant(spec_batch);
    PatchGrid grid;
    Tensor<T> tokens = patch_tokens(tp, ps, cfg, spec, &grid);
    const int64_t N = grid.tokens();
    const int64_t k_masked = static_cast<int64_t>(plans[0].masked.size());
    for (const MaskPlan& plan : plans) {
        if (plan.n_tokens != N) throw ContractError("mask plan does not match the patch grid");
        if (static_cast<int64_t>(plan.masked.size()) != k_masked)
            throw ContractError("mask plans in a batch must mask equal counts");
    }
    const int64_t k_vis = N - k_masked;
    if (k_vis < 1) throw ContractError("mask plan leaves no visible tokens");

    std::vector<int64_t> vis_idx;
    std::vector<uint8_t> token_mask(static_cast<size_t>(B * N), 0);
    vis_idx.reserve(static_cast<size_t>(B * k_vis));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t m : plans[static_cast<size_t>(b)].masked)
            token_mask[static_cast<size_t>(b * N + m)] = 1;
        for (int64_t t = 0; t < N; ++t)
            if (!token_mask[static_cast<size_t>(b * N + t)]) vis_idx.push_back(t);
    }

    Tensor<T> visible = ad::gather_rows(tokens, vis_idx, k_vis);
    Tensor<T> enc = transformer_blocks(tp, ps, visible, "enc", cfg.depth, cfg.heads);
    enc = ad::layer_norm(enc, tp.param(ps, "enc.ln.g"), tp.param(ps, "enc.ln.b"));

    const int d = cfg.embed_dim;
    Tensor<T> base = ad::add(tp.constant(Array<T>::zeros({B, N, d})), tp.param(ps, "dec.mask"));
    Tensor<T> seq = ad::scatter_rows(base, vis_idx, k_vis, enc);
    std::vector<int64_t> iota(static_cast<size_t>(N));
    for (size_t i = 0; i < iota.size(); ++i) iota[i] = static_cast<int64_t>(i);
    seq = ad::add(seq, ad::index_select(tp.param(ps, "dec.pos"), 0, iota));
    Tensor<T> dec = transformer_blocks(tp, ps, seq, "dec", cfg.decoder_depth, cfg.decoder_heads);
    dec = ad::layer_norm(dec, tp.param(ps, "dec.ln.g"), tp.param(ps, "dec.ln.b"));
    Tensor<T> pred = ad::add(ad::matmul(dec, tp.param(ps, "dec.out.w")),
                             tp.param(ps, "dec.out.b"));

    Reconstruction<T> out{pred, patch_cells_array(spec_batch, cfg.patch),
                          std::move(token_mask), grid};
    return out;
}

// |d scalar / d spec| per cell; build(tape, leaf) must return a scalar
template <typename T, typename F>
Array<T> saliency(F&& build, const Array<T>& spec) {
    Tape<T> tp;
    Tensor<T> leaf = tp.input(spec, true);
    Tensor<T> target = build(tp, leaf);
    if (!target.val().is_scalar()) throw ContractError("saliency target must be a scalar");
    tp.backward(target);
    Array<T> g = tp.grad_or_zeros(leaf);
    for (T& v : g.v) v = std::abs(v);
    return g;
}

// equal-shape spectrograms -> [B, F, M]
template <typename T>
Array<T> stack_batch(const std::vector<const dsp::Spectrogram*>& specs) {
    if (specs.empty()) throw InvalidInputError("cannot stack an empty batch");
    const int64_t F = specs[0]->n_frames;
    const int M = specs[0]->n_mels;
    Array<T> out = Array<T>::zeros({static_cast<int64_t>(specs.size()), F, M});
    for (size_t b = 0; b < specs.size(); ++b) {
        if (specs[b]->n_frames != F || specs[b]->n_mels != M)
            throw ShapeError("batch spectrograms must share one shape");
        for (size_t i = 0; i < specs[b]->values.size(); ++i)
            out.v[b * specs[b]->values.size() + i] = static_cast<T>(specs[b]->values[i]);
    }
    return out;
}

}  // namespace opera::models

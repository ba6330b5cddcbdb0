#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "opera/ssl.hpp"

using namespace opera;
using namespace opera::ssl;
using ad::Array;
using ad::ParamStore;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

dsp::Spectrogram ramp_spec(int64_t frames, int mels, float base) {
    dsp::Spectrogram s;
    s.n_frames = frames;
    s.n_mels = mels;
    s.values.resize(static_cast<size_t>(frames * mels));
    for (int64_t f = 0; f < frames; ++f)
        for (int m = 0; m < mels; ++m)
            s.values[static_cast<size_t>(f * mels + m)] =
                base + 0.01f * static_cast<float>(f) + 0.001f * static_cast<float>(m);
    return s;
}

// identity head of the given width
ParamStore<float> identity_head(int p) {
    ParamStore<float> ps;
    Array<float> eye = Array<float>::zeros({p, p});
    for (int i = 0; i < p; ++i) eye.v[static_cast<size_t>(i * p + i)] = 1.0f;
    ps.add("head.W", eye);
    return ps;
}

// batches of visually distinct clips: clip k carries a bright stripe at mel
// k mod mels, a crop-invariant cue that normalization layers cannot erase
std::vector<SpecBatch> toy_batches(int n_batches, int batch_size, int64_t frames, int mels,
                                   uint64_t seed) {
    std::vector<SpecBatch> out;
    Rng rng(seed);
    int clip = 0;
    for (int b = 0; b < n_batches; ++b) {
        SpecBatch sb;
        sb.source = "toy";
        sb.modality = "breath";
        for (int i = 0; i < batch_size; ++i, ++clip) {
            dsp::Spectrogram s;
            s.n_frames = frames;
            s.n_mels = mels;
            s.values.resize(static_cast<size_t>(frames * mels));
            const int hot = clip % mels;
            for (int64_t f = 0; f < frames; ++f)
                for (int m = 0; m < mels; ++m)
                    s.values[static_cast<size_t>(f * mels + m)] =
                        (m == hot ? 2.0f : 0.0f) +
                        0.05f * static_cast<float>(rng.uniform(-1.0, 1.0));
            s.source_id = "clip" + std::to_string(clip);
            sb.specs.push_back(std::move(s));
        }
        out.push_back(std::move(sb));
    }
    return out;
}

double brute_force_ce(const std::vector<std::vector<double>>& s) {
    double total = 0.0;
    for (size_t i = 0; i < s.size(); ++i) {
        double denom = 0.0;
        for (double v : s[i]) denom += std::exp(v);
        total += -std::log(std::exp(s[i][i]) / denom);
    }
    return total / static_cast<double>(s.size());
}

}  // namespace

TEST_CASE("pretrain config: validation") {
    PretrainConfig ok;
    ok.validate();

    PretrainConfig c;
    c.method = "moco";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.epochs = 201;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);  // contrastive needs pairs
    c.method = "generative";
    c.validate();  // batch of one is fine without negatives
    c.mask_ratio = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.val_fraction = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.hybrid_weight = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("make views: crops, determinism, degenerate full-length case") {
    dsp::Spectrogram s = ramp_spec(20, 4, 1.0f);

    Rng r1(5), r2(5), r3(6);
    auto [a1, b1] = make_views(s, 8, r1);
    auto [a2, b2] = make_views(s, 8, r2);
    auto [a3, b3] = make_views(s, 8, r3);
    CHECK(a1.n_frames == 8);
    CHECK(b1.n_frames == 8);
    CHECK(a1.values == a2.values);
    CHECK(b1.values == b2.values);
    CHECK((a1.values != a3.values || b1.values != b3.values));

    // every view is a contiguous window of the source
    bool found = false;
    for (int64_t off = 0; off + 8 <= 20 && !found; ++off) {
        bool match = true;
        for (int64_t f = 0; f < 8 && match; ++f)
            for (int m = 0; m < 4 && match; ++m)
                if (a1.at(f, m) != s.at(off + f, m)) match = false;
        found = match;
    }
    CHECK(found);

    // full-length crop degenerates to two copies of the clip
    Rng r4(9);
    auto [fa, fb] = make_views(s, 20, r4);
    CHECK(fa.values == s.values);
    CHECK(fb.values == s.values);

    Rng r5(1);
    CHECK_THROWS_AS(make_views(s, 21, r5), ContractError);
}

TEST_CASE("contrastive loss: uniform case gives ln B") {
    for (int b : {2, 5}) {
        ParamStore<float> ps = identity_head(3);
        Tape<float> tp;
        Tensor<float> z = tp.constant(Array<float>::zeros({b, 3}));
        ContrastiveResult r = contrastive_loss(tp, ps, z, z);
        CHECK(r.loss.val().v[0] ==
              doctest::Approx(std::log(static_cast<double>(b))).epsilon(1e-6));
    }
}

TEST_CASE("contrastive loss: saturated diagonal drives loss to zero") {
    const int b = 4, p = 4;
    ParamStore<float> ps = identity_head(p);
    Array<float> za = Array<float>::zeros({b, p});
    for (int i = 0; i < b; ++i)
        za.v[static_cast<size_t>(i * p + i)] = std::sqrt(20.0f);
    Tape<float> tp;
    Tensor<float> z = tp.constant(za);
    ContrastiveResult r = contrastive_loss(tp, ps, z, z);  // scores = 20 * I
    CHECK(r.loss.val().v[0] < 1e-6f);
    CHECK(r.top1 == 1.0);
}

TEST_CASE("contrastive loss: fixed scores match brute-force softmax") {
    // za = desired score rows, zb = identity -> S[i][j] = za[i][j]
    const std::vector<std::vector<double>> want{{2, 0, 0}, {0, 1, 0}, {0, 0, 3}};
    ParamStore<float> ps = identity_head(3);
    Array<float> za = Array<float>::zeros({3, 3});
    Array<float> zb = Array<float>::zeros({3, 3});
    for (int i = 0; i < 3; ++i) {
        zb.v[static_cast<size_t>(i * 3 + i)] = 1.0f;
        for (int j = 0; j < 3; ++j)
            za.v[static_cast<size_t>(i * 3 + j)] = static_cast<float>(want[static_cast<size_t>(i)][static_cast<size_t>(j)]);
    }
    Tape<float> tp;
    ContrastiveResult r = contrastive_loss(tp, ps, tp.constant(za), tp.constant(zb));
    CHECK(r.loss.val().v[0] == doctest::Approx(brute_force_ce(want)).epsilon(1e-6));
    CHECK(r.top1 == 1.0);  // every diagonal dominates its row

    // mis-aligned rows pull top1 down
    const std::vector<std::vector<double>> off{{0, 2, 0}, {0, 1, 0}, {0, 0, 3}};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            za.v[static_cast<size_t>(i * 3 + j)] = static_cast<float>(off[static_cast<size_t>(i)][static_cast<size_t>(j)]);
    Tape<float> tp2;
    ContrastiveResult r2 = contrastive_loss(tp2, ps, tp2.constant(za), tp2.constant(zb));
    CHECK(r2.top1 == doctest::Approx(2.0 / 3.0));
    CHECK(r2.loss.val().v[0] == doctest::Approx(brute_force_ce(off)).epsilon(1e-6));
}

TEST_CASE("contrastive loss: batch permutation leaves the mean unchanged") {
    const int b = 5, p = 4;
    ParamStore<float> ps;
    Rng rng(3);
    Array<float> w = Array<float>::zeros({p, p});
    for (float& v : w.v) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    ps.add("head.W", w);
    Array<float> za = Array<float>::zeros({b, p});
    Array<float> zb = Array<float>::zeros({b, p});
    for (float& v : za.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (float& v : zb.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));

    Tape<float> tp;
    ContrastiveResult base = contrastive_loss(tp, ps, tp.constant(za), tp.constant(zb));

    const std::vector<int64_t> perm{3, 0, 4, 1, 2};
    Array<float> pa = Array<float>::zeros({b, p});
    Array<float> pb = Array<float>::zeros({b, p});
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < p; ++j) {
            pa.v[static_cast<size_t>(i * p + j)] =
                za.v[static_cast<size_t>(perm[static_cast<size_t>(i)] * p + j)];
            pb.v[static_cast<size_t>(i * p + j)] =
                zb.v[static_cast<size_t>(perm[static_cast<size_t>(i)] * p + j)];
        }
    Tape<float> tp2;
    ContrastiveResult moved = contrastive_loss(tp2, ps, tp2.constant(pa), tp2.constant(pb));
    CHECK(moved.loss.val().v[0] == doctest::Approx(base.loss.val().v[0]).epsilon(1e-6));
    CHECK(moved.top1 == doctest::Approx(base.top1));
}

TEST_CASE("contrastive loss: symmetric flag averages both directions") {
    const int b = 3, p = 3;
    ParamStore<float> ps = identity_head(p);
    Rng rng(8);
    Array<float> za = Array<float>::zeros({b, p});
    Array<float> zb = Array<float>::zeros({b, p});
    for (float& v : za.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (float& v : zb.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));

    Tape<float> t1, t2, t3;
    const float fwd = contrastive_loss(t1, ps, t1.constant(za), t1.constant(zb)).loss.val().v[0];
    const float rev = contrastive_loss(t2, ps, t2.constant(zb), t2.constant(za)).loss.val().v[0];
    const float sym =
        contrastive_loss(t3, ps, t3.constant(za), t3.constant(zb), true).loss.val().v[0];
    // W is symmetric here, so swapping anchors transposes the score matrix
    CHECK(sym == doctest::Approx(0.5 * (fwd + rev)).epsilon(1e-6));
}

TEST_CASE("contrastive loss: guards") {
    ParamStore<float> ps = identity_head(2);
    Tape<float> tp;
    Tensor<float> one = tp.constant(Array<float>::zeros({1, 2}));
    CHECK_THROWS_AS(contrastive_loss(tp, ps, one, one), ContractError);
    Tensor<float> a = tp.constant(Array<float>::zeros({2, 2}));
    Tensor<float> b = tp.constant(Array<float>::zeros({3, 2}));
    CHECK_THROWS_AS(contrastive_loss(tp, ps, a, b), ShapeError);
}

TEST_CASE("generative step: determinism and mask-ratio guard") {
    models::EncoderConfig enc;
    enc.embed_dim = 8;
    enc.heads = 2;
    enc.depth = 1;
    enc.decoder_heads = 2;
    ParamStore<float> ps;
    Rng init(4);
    models::init_encoder(ps, enc, init);
    models::init_decoder(ps, enc, init);

    Rng data(5);
    Array<float> batch = Array<float>::zeros({2, 16, 8});
    for (float& v : batch.v) v = static_cast<float>(data.uniform(-1.0, 1.0));

    auto run = [&](uint64_t seed) {
        Rng rng(seed);
        Tape<float> tp;
        return generative_step(tp, ps, enc, batch, 0.7, rng).val().v[0];
    };
    const float l1 = run(11), l2 = run(11), l3 = run(12);
    CHECK(l1 == l2);
    CHECK(l1 != l3);  // different masks, different loss
    CHECK(std::isfinite(l1));
    CHECK(l1 > 0.0f);

    Rng rng(1);
    Tape<float> tp;
    CHECK_THROWS_AS(generative_step(tp, ps, enc, batch, 0.0, rng), ConfigError);
    CHECK_THROWS_AS(generative_step(tp, ps, enc, batch, 1.0, rng), ConfigError);
}

TEST_CASE("hybrid loss: convex combination") {
    Tape<float> tp;
    Tensor<float> lc = tp.constant(Array<float>::scalar(2.0f));
    Tensor<float> lg = tp.constant(Array<float>::scalar(4.0f));
    CHECK(hybrid_loss(lc, lg, 1.0).val().v[0] == doctest::Approx(2.0));
    CHECK(hybrid_loss(lc, lg, 0.0).val().v[0] == doctest::Approx(4.0));
    CHECK(hybrid_loss(lc, lg, 0.5).val().v[0] == doctest::Approx(3.0));
    CHECK_THROWS_AS(hybrid_loss(lc, lg, 1.5), ConfigError);
}

TEST_CASE("pretrain: split sizes, update counts, history bookkeeping") {
    models::EncoderConfig enc;
    enc.kind = "vit";
    enc.embed_dim = 4;
    enc.heads = 2;
    enc.depth = 1;
    enc.proj_dim = 4;
    enc.decoder_heads = 2;

    PretrainConfig cfg;
    cfg.method = "contrastive";
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.crop_frames = 8;
    cfg.seed = 3;

    std::vector<SpecBatch> batches = toy_batches(100, 2, 12, 8, 17);
    ParamStore<float> ps;
    Rng init(cfg.seed);
    init_pretrain_params(ps, enc, cfg, init);

    TrainHistory hist = pretrain(batches, enc, cfg, ps);
    // round(0.1 * 100) = 10 val batches; the other 90 each take one step
    CHECK(hist.update_count == 90);
    CHECK(hist.epochs.size() == 1);
    CHECK(hist.best_epoch == 0);
    CHECK(std::isfinite(hist.epochs[0].val_loss));

    const std::string csv = hist.to_csv();
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    CHECK(line == "epoch,train_loss,val_loss,top1");
    int rows = 0;
    while (std::getline(is, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 1);

    CHECK_THROWS_AS(pretrain({}, enc, cfg, ps), InvalidInputError);

    // too few batches to hold out a validation slice
    std::vector<SpecBatch> few = toy_batches(2, 2, 12, 8, 1);
    ParamStore<float> ps2;
    Rng init2(0);
    init_pretrain_params(ps2, enc, cfg, init2);
    CHECK_THROWS_AS(pretrain(few, enc, cfg, ps2), ConfigError);
}

TEST_CASE("pretrain: deterministic, selects the best-validation epoch") {
    models::EncoderConfig enc;
    enc.embed_dim = 4;
    enc.heads = 2;
    enc.depth = 1;
    enc.proj_dim = 4;

    PretrainConfig cfg;
    cfg.method = "contrastive";
    cfg.epochs = 4;
    cfg.batch_size = 3;
    cfg.crop_frames = 8;
    cfg.lr = 3e-3;
    cfg.seed = 21;

    auto run = [&](uint64_t seed, int epochs, ParamStore<float>* out) {
        PretrainConfig c = cfg;
        c.seed = seed;
        c.epochs = epochs;
        std::vector<SpecBatch> batches = toy_batches(12, 3, 12, 8, 99);
        ParamStore<float> ps;
        Rng init(seed);
        init_pretrain_params(ps, enc, c, init);
        TrainHistory h = pretrain(batches, enc, c, ps);
        if (out) *out = std::move(ps);
        return h;
    };

    ParamStore<float> pa, pb, pc;
    TrainHistory ha = run(21, 4, &pa);
    TrainHistory hb = run(21, 4, &pb);
    TrainHistory hc = run(22, 4, &pc);

    CHECK(ha.to_csv() == hb.to_csv());
    CHECK(ha.to_csv() != hc.to_csv());
    for (const auto& [name, arr] : pa.values) CHECK(arr.v == pb.at(name).v);

    // the recorded best epoch really is the minimum of the val column
    double mn = 1e300;
    int arg = -1;
    for (const EpochStats& e : ha.epochs)
        if (e.val_loss < mn) {
            mn = e.val_loss;
            arg = e.epoch;
        }
    CHECK(ha.best_epoch == arg);
    CHECK(ha.best_val_loss == doctest::Approx(mn));
    CHECK(ha.best_val_loss <= ha.epochs.back().val_loss);
    CHECK(ha.update_count == 4 * 11);  // 12 batches, one held out

    // replaying only best_epoch+1 epochs lands on the same weights, so the
    // returned store really is the best-epoch snapshot
    ParamStore<float> replay;
    TrainHistory hr = run(21, ha.best_epoch + 1, &replay);
    CHECK(hr.best_epoch == ha.best_epoch);
    for (const auto& [name, arr] : pa.values) {
        REQUIRE(replay.has(name));
        CHECK(arr.v == replay.at(name).v);
    }
}

TEST_CASE("pretrain: toy corpus is learnable; val contributes no updates") {
    models::EncoderConfig enc;
    enc.embed_dim = 8;
    enc.heads = 2;
    enc.depth = 1;
    enc.proj_dim = 8;

    PretrainConfig cfg;
    cfg.method = "contrastive";
    cfg.epochs = 20;
    cfg.batch_size = 4;
    cfg.crop_frames = 16;
    cfg.lr = 3e-3;
    cfg.seed = 5;

    std::vector<SpecBatch> batches = toy_batches(12, 4, 24, 8, 31);
    ParamStore<float> ps;
    Rng init(cfg.seed);
    init_pretrain_params(ps, enc, cfg, init);
    TrainHistory hist = pretrain(batches, enc, cfg, ps);

    CHECK(hist.update_count == 20 * 11);
    // distinct plateaus are easy to align: loss falls well under the uniform ln 4
    CHECK(hist.best_val_loss < std::log(4.0));
    double best_top1 = 0.0;
    for (const EpochStats& e : hist.epochs) best_top1 = std::max(best_top1, e.top1);
    CHECK(best_top1 >= 0.5);

    // generative run writes a zero top1 column and also trains
    PretrainConfig gen = cfg;
    gen.method = "generative";
    gen.epochs = 3;
    ParamStore<float> ps2;
    Rng init2(7);
    init_pretrain_params(ps2, enc, gen, init2);
    TrainHistory gh = pretrain(batches, enc, gen, ps2);
    for (const EpochStats& e : gh.epochs) CHECK(e.top1 == 0.0);
    CHECK(std::isfinite(gh.best_val_loss));
    CHECK(ps2.has("dec.mask"));
    CHECK_FALSE(ps2.has("head.W"));

    // hybrid trains every parameter group
    PretrainConfig hy = cfg;
    hy.method = "hybrid";
    hy.epochs = 2;
    ParamStore<float> ps3;
    Rng init3(9);
    init_pretrain_params(ps3, enc, hy, init3);
    TrainHistory hh = pretrain(batches, enc, hy, ps3);
    CHECK(ps3.has("head.W"));
    CHECK(ps3.has("dec.mask"));
    CHECK(std::isfinite(hh.best_val_loss));
}

TEST_CASE("pretrain: runaway loss aborts") {
    models::EncoderConfig enc;
    enc.embed_dim = 4;
    enc.heads = 2;
    enc.depth = 1;
    enc.proj_dim = 4;

    PretrainConfig cfg;
    cfg.method = "contrastive";
    cfg.epochs = 5;
    cfg.batch_size = 2;
    cfg.crop_frames = 8;
    cfg.lr = 1e30;  // first step catapults the weights out of range
    cfg.seed = 2;

    std::vector<SpecBatch> batches = toy_batches(12, 2, 12, 8, 55);
    ParamStore<float> ps;
    Rng init(1);
    init_pretrain_params(ps, enc, cfg, init);
    CHECK_THROWS_AS(pretrain(batches, enc, cfg, ps), Error);
}

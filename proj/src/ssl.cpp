#include "opera/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace opera::ssl {

using ad::Array;
using ad::ParamStore;
using ad::Tape;
using ad::Tensor;

void PretrainConfig::validate() const {
    if (method != "contrastive" && method != "generative" && method != "hybrid")
        throw ConfigError("pretrain method must be contrastive, generative, or hybrid");
    if (epochs < 1 || epochs > 200)
        throw ConfigError("epochs must lie in [1, 200]");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (uses_contrastive() && batch_size < 2)
        throw ConfigError("contrastive pretraining needs batch_size >= 2");
    if (crop_frames < 1) throw ConfigError("crop_frames must be positive");
    if (uses_generative() && !(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw ConfigError("mask_ratio must lie strictly between 0 and 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ConfigError("val_fraction must lie strictly between 0 and 1");
    if (hybrid_weight < 0.0 || hybrid_weight > 1.0)
        throw ConfigError("hybrid_weight must lie in [0, 1]");
}

std::string TrainHistory::to_csv() const {
    std::string out = "epoch,train_loss,val_loss,top1\n";
    char line[128];
    for (const EpochStats& e : epochs) {
        std::snprintf(line, sizeof(line), "%d,%.8g,%.8g,%.8g\n", e.epoch, e.train_loss,
                      e.val_loss, e.top1);
        out += line;
    }
    return out;
}

std::pair<dsp::Spectrogram, dsp::Spectrogram> make_views(const dsp::Spectrogram& spec,
                                                         int64_t crop_frames, Rng& rng) {
    if (crop_frames > spec.n_frames)
        throw ContractError("view crop of " + std::to_string(crop_frames) +
                            " frames exceeds the clip's " + std::to_string(spec.n_frames));
    dsp::Spectrogram a = dsp::random_crop(spec, crop_frames, rng);
    dsp::Spectrogram b = dsp::random_crop(spec, crop_frames, rng);
    return {std::move(a), std::move(b)};
}

ContrastiveResult contrastive_loss(Tape<float>& tp, ParamStore<float>& ps, Tensor<float> za,
                                   Tensor<float> zb, bool symmetric) {
    const ad::Shape& s = za.dims();
    if (s.size() != 2 || zb.dims() != s)
        throw ShapeError("contrastive_loss expects two [batch, dim] embeddings");
    const int64_t B = s[0];
    if (B < 2) throw ContractError("contrastive_loss needs at least two anchors");

    Tensor<float> scores = models::bilinear_scores(tp, ps, za, zb);
    std::vector<int64_t> diag(static_cast<size_t>(B));
    for (size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int64_t>(i);
    Tensor<float> loss = ad::cross_entropy_logits(scores, diag);
    if (symmetric) {
        Tensor<float> rev = ad::cross_entropy_logits(ad::permute(scores, {1, 0}), diag);
        loss = ad::scale(ad::add(loss, rev), 0.5f);
    }

    int64_t hits = 0;
    const Array<float>& sv = scores.val();
    for (int64_t i = 0; i < B; ++i) {
        int64_t arg = 0;
        float best = sv.v[static_cast<size_t>(i * B)];
        for (int64_t j = 1; j < B; ++j) {
            const float v = sv.v[static_cast<size_t>(i * B + j)];
            if (v > best) {
                best = v;
                arg = j;
            }
        }
        hits += (arg == i);
    }
    return {loss, static_cast<double>(hits) / static_cast<double>(B)};
}

Tensor<float> generative_step(Tape<float>& tp, ParamStore<float>& ps,
                              const models::EncoderConfig& enc, const Array<float>& batch,
                              double mask_ratio, Rng& rng) {
    if (batch.dims.size() != 3)
        throw ShapeError("generative_step expects [batch, frames, mels]");
    const models::PatchGrid grid =
        models::patch_grid(batch.dims[1], static_cast<int>(batch.dims[2]), enc.patch);
    std::vector<models::MaskPlan> plans;
    plans.reserve(static_cast<size_t>(batch.dims[0]));
    for (int64_t b = 0; b < batch.dims[0]; ++b)
        plans.push_back(models::sample_mask(grid.tokens(), mask_ratio, rng));
    models::Reconstruction<float> rec = models::reconstruct(tp, ps, enc, batch, plans);
    return ad::masked_mse(rec.pred, rec.target, rec.token_mask);
}

Tensor<float> hybrid_loss(Tensor<float> contrastive, Tensor<float> generative, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("hybrid weight must lie in [0, 1]");
    return ad::add(ad::scale(contrastive, static_cast<float>(alpha)),
                   ad::scale(generative, static_cast<float>(1.0 - alpha)));
}

void init_pretrain_params(ParamStore<float>& ps, const models::EncoderConfig& enc,
                          const PretrainConfig& cfg, Rng& rng) {
    cfg.validate();
    models::init_encoder(ps, enc, rng);
    if (cfg.uses_contrastive()) {
        models::init_projector(ps, enc, rng);
        models::init_bilinear_head(ps, enc, rng);
    }
    if (cfg.uses_generative()) models::init_decoder(ps, enc, rng);
}

namespace {

// stream salts keeping the loop's RNG uses independent
constexpr uint64_t kSplitStream = 7;
constexpr uint64_t kOrderBase = 1000;
constexpr uint64_t kTrainBase = 1u << 21;
constexpr uint64_t kValBase = 1u << 22;

struct StepResult {
    double loss = 0.0;
    double top1 = 0.0;
};

Array<float> crop_stack(const SpecBatch& batch, int64_t crop, Rng& rng) {
    std::vector<dsp::Spectrogram> crops;
    crops.reserve(batch.specs.size());
    for (const dsp::Spectrogram& s : batch.specs) crops.push_back(dsp::random_crop(s, crop, rng));
    std::vector<const dsp::Spectrogram*> ptrs;
    ptrs.reserve(crops.size());
    for (const dsp::Spectrogram& s : crops) ptrs.push_back(&s);
    return models::stack_batch<float>(ptrs);
}

std::pair<Array<float>, Array<float>> view_stacks(const SpecBatch& batch, int64_t crop,
                                                  Rng& rng) {
    std::vector<dsp::Spectrogram> as, bs;
    as.reserve(batch.specs.size());
    bs.reserve(batch.specs.size());
    for (const dsp::Spectrogram& s : batch.specs) {
        auto [a, b] = make_views(s, crop, rng);
        as.push_back(std::move(a));
        bs.push_back(std::move(b));
    }
    std::vector<const dsp::Spectrogram*> pa, pb;
    for (const dsp::Spectrogram& s : as) pa.push_back(&s);
    for (const dsp::Spectrogram& s : bs) pb.push_back(&s);
    return {models::stack_batch<float>(pa), models::stack_batch<float>(pb)};
}

// builds the configured objective for one batch; returns its scalar loss node
Tensor<float> objective(Tape<float>& tp, ParamStore<float>& ps,
                        const models::EncoderConfig& enc, const PretrainConfig& cfg,
                        const SpecBatch& batch, Rng& rng, StepResult* stats) {
    // batches arrive standardized to their crop-table length; the view crop
    // must fit inside it (equal is legal but yields identical views)
    const int64_t crop = cfg.crop_frames;
    Tensor<float> loss;
    if (cfg.uses_contrastive()) {
        auto [va, vb] = view_stacks(batch, crop, rng);
        Tensor<float> za = models::project(tp, ps, models::encode_batch(tp, ps, enc, tp.constant(va)));
        Tensor<float> zb = models::project(tp, ps, models::encode_batch(tp, ps, enc, tp.constant(vb)));
        ContrastiveResult cr = contrastive_loss(tp, ps, za, zb, cfg.symmetric);
        if (stats) stats->top1 = cr.top1;
        loss = cr.loss;
        if (cfg.uses_generative()) {
            Tensor<float> gen = generative_step(tp, ps, enc, va, cfg.mask_ratio, rng);
            loss = hybrid_loss(loss, gen, cfg.hybrid_weight);
        }
    } else {
        Array<float> stack = crop_stack(batch, crop, rng);
        loss = generative_step(tp, ps, enc, stack, cfg.mask_ratio, rng);
    }
    if (stats) stats->loss = static_cast<double>(loss.val().v[0]);
    return loss;
}

}  // namespace

TrainHistory pretrain(const std::vector<SpecBatch>& batches, const models::EncoderConfig& enc,
                      const PretrainConfig& cfg, ParamStore<float>& ps) {
    cfg.validate();
    enc.validate();
    if (batches.empty()) throw InvalidInputError("pretrain needs at least one batch");
    if (cfg.crop_frames < enc.min_input_frames)
        throw ConfigError("crop_frames is below the encoder's minimum input length");
    for (const SpecBatch& b : batches) {
        if (b.specs.empty()) throw InvalidInputError("pretrain batch has no spectrograms");
        if (cfg.uses_contrastive() && static_cast<int64_t>(b.specs.size()) < 2)
            throw ContractError("contrastive batches need at least two clips");
    }

    // one-time shuffle, then a held-out validation slice off the front
    std::vector<size_t> order(batches.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(Rng::mix(cfg.seed, kSplitStream));
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(split_rng.uniform_int(
                                    static_cast<int64_t>(i)))]);
    const auto n_val = static_cast<size_t>(
        std::llround(cfg.val_fraction * static_cast<double>(batches.size())));
    if (n_val == 0 || n_val >= order.size())
        throw ConfigError("validation split is empty; adjust val_fraction or batch count");
    std::vector<size_t> val_ids(order.begin(), order.begin() + static_cast<int64_t>(n_val));
    std::vector<size_t> train_ids(order.begin() + static_cast<int64_t>(n_val), order.end());

    TrainHistory hist;
    hist.best_val_loss = std::numeric_limits<double>::infinity();
    std::map<std::string, Array<float>> best_weights;
    int64_t global_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(Rng::mix(cfg.seed, kOrderBase + static_cast<uint64_t>(epoch)));
        std::vector<size_t> idx = train_ids;
        for (size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1],
                      idx[static_cast<size_t>(order_rng.uniform_int(static_cast<int64_t>(i)))]);

        double train_sum = 0.0;
        for (size_t k = 0; k < idx.size(); ++k, ++global_step) {
            Rng step_rng(Rng::mix(cfg.seed, kTrainBase + static_cast<uint64_t>(global_step)));
            Tape<float> tp;
            StepResult stats;
            Tensor<float> loss = objective(tp, ps, enc, cfg, batches[idx[k]], step_rng, &stats);
            if (!std::isfinite(stats.loss))
                throw TrainingError("non-finite training loss at epoch " +
                                    std::to_string(epoch) + ", batch " + std::to_string(k));
            train_sum += stats.loss;
            tp.backward(loss);
            try {
                ad::adam_step(ps, tp.param_grads(), ad::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
            } catch (const TrainingError& e) {
                throw TrainingError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(k) + ")");
            }
            ++hist.update_count;
        }

        // fixed per-batch streams keep validation crops identical across epochs
        double val_sum = 0.0, top1_sum = 0.0;
        for (size_t k = 0; k < val_ids.size(); ++k) {
            Rng val_rng(Rng::mix(cfg.seed, kValBase + static_cast<uint64_t>(k)));
            Tape<float> tp;
            StepResult stats;
            objective(tp, ps, enc, cfg, batches[val_ids[k]], val_rng, &stats);
            if (!std::isfinite(stats.loss))
                throw TrainingError("non-finite validation loss at epoch " +
                                    std::to_string(epoch) + ", batch " + std::to_string(k));
            val_sum += stats.loss;
            top1_sum += stats.top1;
        }

        EpochStats es;
        es.epoch = epoch;
        es.train_loss = train_sum / static_cast<double>(idx.size());
        es.val_loss = val_sum / static_cast<double>(val_ids.size());
        es.top1 = top1_sum / static_cast<double>(val_ids.size());
        hist.epochs.push_back(es);
        if (es.val_loss < hist.best_val_loss) {
            hist.best_val_loss = es.val_loss;
            hist.best_epoch = epoch;
            best_weights = ps.values;
        }
    }

    ps.values = std::move(best_weights);
    return hist;
}

}  // namespace opera::ssl

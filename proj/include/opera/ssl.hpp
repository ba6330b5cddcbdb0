#pragma once

#include <string>
#include <utility>
#include <vector>

#include "opera/models.hpp"

namespace opera::ssl {

// One pretraining batch: same source and modality throughout, every
// spectrogram repeat-padded to a shared frame count >= crop_frames.
struct SpecBatch {
    std::vector<dsp::Spectrogram> specs;
    std::string source;
    std::string modality;
    int64_t crop_frames = 0;
};

struct PretrainConfig {
    std::string method = "contrastive";  // contrastive | generative | hybrid
    int epochs = 30;
    double lr = 1e-3;
    int batch_size = 16;
    int64_t crop_frames = 64;
    double mask_ratio = 0.7;
    double val_fraction = 0.1;
    double hybrid_weight = 0.5;  // alpha on the contrastive term
    bool symmetric = false;      // also score view-b anchors
    uint64_t seed = 0;

    bool uses_contrastive() const { return method == "contrastive" || method == "hybrid"; }
    bool uses_generative() const { return method == "generative" || method == "hybrid"; }
    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double top1 = 0.0;  // contrastive alignment accuracy on val; 0 when unused
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_val_loss = 0.0;
    int64_t update_count = 0;  // optimizer steps taken; val batches add none

    // one record per line: epoch,train_loss,val_loss,top1
    std::string to_csv() const;
};

// two independent random crops of the same clip form a positive pair
std::pair<dsp::Spectrogram, dsp::Spectrogram> make_views(const dsp::Spectrogram& spec,
                                                         int64_t crop_frames, Rng& rng);

struct ContrastiveResult {
    ad::Tensor<float> loss;
    double top1 = 0.0;
};

// za, zb: [B, p] projected embeddings; loss is cross-entropy of each row of
// the bilinear similarity matrix against its diagonal entry
ContrastiveResult contrastive_loss(ad::Tape<float>& tp, ad::ParamStore<float>& ps,
                                   ad::Tensor<float> za, ad::Tensor<float> zb,
                                   bool symmetric = false);

// masked-patch reconstruction loss on one equal-length batch [B, F, M]
ad::Tensor<float> generative_step(ad::Tape<float>& tp, ad::ParamStore<float>& ps,
                                  const models::EncoderConfig& enc, const ad::Array<float>& batch,
                                  double mask_ratio, Rng& rng);

ad::Tensor<float> hybrid_loss(ad::Tensor<float> contrastive, ad::Tensor<float> generative,
                              double alpha);

// every parameter group the chosen method trains
void init_pretrain_params(ad::ParamStore<float>& ps, const models::EncoderConfig& enc,
                          const PretrainConfig& cfg, Rng& rng);

// Shuffles batches, holds out round(val_fraction * n) for validation, runs
// epochs of objective + Adam over the rest, and leaves ps at the weights of
// the epoch with the lowest validation loss.
TrainHistory pretrain(const std::vector<SpecBatch>& batches, const models::EncoderConfig& enc,
                      const PretrainConfig& cfg, ad::ParamStore<float>& ps);

}  // namespace opera::ssl

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "opera/dsp.hpp"
#include "opera/ssl.hpp"

namespace opera::data {

// a label is either a number (regression / class index) or a category string
struct LabelValue {
    enum class Kind { number, category };
    Kind kind = Kind::number;
    double num = 0.0;
    std::string cat;

    static LabelValue number(double v) { return {Kind::number, v, {}}; }
    static LabelValue category(std::string v) { return {Kind::category, 0.0, std::move(v)}; }
    bool operator==(const LabelValue&) const = default;
};

struct ClipRecord {
    std::string id;
    std::string path;
    std::string subject_id;
    std::string source;
    std::string modality;  // breath | cough | lung | snore | vowel
    std::map<std::string, LabelValue> labels;
    double duration_s = 0.0;
    std::string split;  // optional free-form tag

    bool operator==(const ClipRecord&) const = default;
};

struct Manifest {
    std::vector<ClipRecord> records;
    double norm_mean = 0.0;
    double norm_std = 1.0;
    std::string provenance;

    const ClipRecord& by_id(const std::string& id) const;
};

bool is_known_modality(const std::string& m);

// Line-delimited storage: a header line with the corpus-level constants, then
// one record per line. Relative clip paths resolve against the manifest's
// directory on load.
Manifest load_manifest(const std::string& path);
void write_manifest(const Manifest& m, const std::string& path);

struct CropTable {
    std::map<std::pair<std::string, std::string>, int64_t> frames;

    void set(const std::string& source, const std::string& modality, int64_t n) {
        frames[{source, modality}] = n;
    }
    int64_t at(const std::string& source, const std::string& modality) const;
};

// grouping half of batch construction: record indices per emitted batch,
// every batch single-(source, modality), leftovers dropped, order shuffled
std::vector<std::vector<size_t>> plan_pretrain_batches(const Manifest& m, int batch_size,
                                                       const CropTable& crops, uint64_t seed);

// full pipeline: load, preprocess, and standardize every clip to its pair's
// crop length (repeat-pad shorter clips, seeded random crop for longer ones)
std::vector<ssl::SpecBatch> build_pretrain_batches(const Manifest& m, const dsp::DspConfig& dcfg,
                                                   int batch_size, const CropTable& crops,
                                                   uint64_t seed);

struct SplitPlan {
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
    std::string strategy;
};

// subjects partitioned by (train, val, test) ratios; clips follow subjects
SplitPlan split_participant_independent(const Manifest& m, const std::vector<double>& ratios,
                                        uint64_t seed);

// one fold per subject; the fold's test set is that subject's clips
std::vector<SplitPlan> loso_splits(const Manifest& m);

struct SynthConfig {
    int n_subjects = 20;
    int clips_per_subject = 10;
    double duration_s = 10.0;
    double rate_min = 8.0;   // breaths per minute
    double rate_max = 25.0;
    double wheeze_probability = 0.5;
    double band_center_hz = 600.0;  // breath-noise timbre
    double band_spread_hz = 400.0;  // per-subject center offset range
    double band_width_hz = 150.0;   // narrow enough for a crisp spectral peak
    double wheeze_center_hz = 2000.0;
    double wheeze_spread_hz = 900.0;  // per-clip tone placement
    int sample_rate = 16000;
    uint64_t seed = 0;

    void validate() const;
};

// Band-passed noise amplitude-modulated by raised-cosine breathing cycles;
// wheezy clips add a narrowband tone burst during each inhalation. Writes
// PCM-16 WAVs plus manifest.jsonl into out_dir and returns the manifest with
// corpus-level log-mel normalization constants filled in.
Manifest synth_corpus(const SynthConfig& cfg, const std::string& out_dir);

// the raised-cosine modulation envelope a clip is generated with (test hook)
std::vector<float> breath_envelope(double rate_bpm, double duration_s, int sample_rate);

}  // namespace opera::data

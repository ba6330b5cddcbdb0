#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "opera/data.hpp"
#include "opera/dsp.hpp"
#include "opera/models.hpp"
#include "opera/tape.hpp"

namespace opera::bench {

// A downstream evaluation task: what to predict, how to score it, and how
// the clips are partitioned into train/val/test.
struct TaskSpec {
    std::string task_id;
    std::string kind = "binary";  // binary | multiclass | regression
    int n_classes = 2;            // used by multiclass
    std::string metric = "auroc"; // auroc | mae
    dsp::PadPolicy pad_policy = dsp::PadPolicy::repeat;
    std::string split = "participant_independent";  // official | participant_independent | loso
    std::string label_key;
    int n_runs = 5;
    double l2 = 1e-5;

    void validate() const;
    static TaskSpec classification(std::string id, std::string label_key, int n_classes = 2);
    static TaskSpec regression(std::string id, std::string label_key);
};

// Row-major feature matrix with the clip ids that produced each row.
struct FeatureMatrix {
    ad::Array<float> x;            // [n, d]
    std::vector<std::string> ids;  // length n

    int64_t n() const { return x.dims.empty() ? 0 : x.dims[0]; }
    int64_t dim() const { return x.dims.size() < 2 ? 0 : x.dims[1]; }
};

// Binary feature archive: magic + version + [n, d] floats + clip id index.
void save_features(const std::string& path, const FeatureMatrix& f);
FeatureMatrix load_features(const std::string& path);

// Longest input (in frames) the encoder accepts in one pass; longer clips are
// windowed and mean-pooled.
int64_t max_input_frames(const models::EncoderConfig& enc, int n_mels);

// Frozen-encoder feature extraction: load each clip, pad per `policy` to the
// encoder minimum, window anything longer than the encoder maximum with a
// half-window hop, embed each window, and mean-pool across windows.
FeatureMatrix extract_features(ad::ParamStore<float>& enc_ps, const models::EncoderConfig& enc,
                               const data::Manifest& m, const std::vector<std::string>& clip_ids,
                               const dsp::DspConfig& dcfg, dsp::PadPolicy policy);

struct ProbeConfig {
    double lr = 1e-3;
    int epochs = 64;
    int batch_size = 32;
    double l2 = 1e-5;
    uint64_t seed = 0;
};

// One linear layer: logits = x.w + b (classification, K columns) or
// prediction = x.w + b (regression, one column).
struct ProbeModel {
    std::string kind;  // binary | multiclass | regression
    int n_classes = 2;
    ad::Array<float> w;  // [d, K] or [d, 1]
    ad::Array<float> b;  // [K] or [1]
};

// Trains a linear probe on frozen features; cross-entropy + L2(w) for
// classification, mean absolute error + L2(w) for regression. When a
// validation set is given the epoch with the lowest validation loss wins.
ProbeModel train_probe(const ad::Array<float>& x, const std::vector<double>& y,
                       const TaskSpec& task, const ProbeConfig& cfg,
                       const ad::Array<float>* val_x = nullptr,
                       const std::vector<double>* val_y = nullptr);

// Raw probe outputs: [n, K] logits for classification, [n] for regression.
ad::Array<float> probe_scores(const ProbeModel& probe, const ad::Array<float>& x);

// Scores the probe on a labeled set with the task's metric.
double evaluate_probe(const ProbeModel& probe, const ad::Array<float>& x,
                      const std::vector<double>& y, const TaskSpec& task);

// Applies a probe trained on one dataset to features from another without any
// adaptation; shape and label-space mismatches are errors.
double zero_shot(const ProbeModel& probe, const ad::Array<float>& x,
                 const std::vector<double>& y, const TaskSpec& task);

struct FinetuneConfig {
    double lr = 1e-4;
    int epochs = 4;
    int batch_size = 8;
    double l2 = 1e-5;
    uint64_t seed = 0;
    // Parameter-name prefixes excluded from updates, e.g. "enc." or "enc.b0.".
    std::vector<std::string> freeze;
};

// Joint training of encoder + linear head ("ft.w"/"ft.b", added to `ps`) on
// labeled spectrograms. Frozen parameters receive no updates; freezing
// everything (no trainable parameter) is a configuration error.
void finetune(ad::ParamStore<float>& ps, const models::EncoderConfig& enc,
              const std::vector<dsp::Spectrogram>& specs, const std::vector<double>& y,
              const TaskSpec& task, const FinetuneConfig& cfg);

// Area under the ROC curve via the rank statistic: average ranks over ties,
// AUROC = (R+ - n+(n+ + 1)/2) / (n+ * n-). Needs both classes present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Macro one-vs-rest AUROC over the classes present with both positives and
// negatives; scores is [n, K] row-major.
double multiclass_auroc(const std::vector<double>& scores, int n_classes,
                        const std::vector<int>& labels);

double mae(const std::vector<double>& pred, const std::vector<double>& y);
double mape(const std::vector<double>& pred, const std::vector<double>& y);

struct WelchResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;  // two-sided
};

// Welch's unequal-variance t-test with the Welch-Satterthwaite df; two-sided
// p from the regularized incomplete beta function.
WelchResult welch_ttest(const std::vector<double>& a, const std::vector<double>& b);

// Published-results grid: one scalar per (task, method) plus a per-task
// direction and group tag.
struct MethodTable {
    std::vector<std::string> tasks;    // insertion order
    std::vector<std::string> methods;  // insertion order
    std::map<std::pair<std::string, std::string>, double> values;  // (task, method)
    std::map<std::string, bool> higher_better;  // per task
    std::map<std::string, std::string> group;   // per task

    void add(const std::string& task, const std::string& method, double value,
             bool task_higher_better, const std::string& group_name);
    double at(const std::string& task, const std::string& method) const;
};

// Mean reciprocal rank per method across `tasks`. Competition ranking: ties
// share the best (minimum) rank. Missing cells are completeness errors.
std::map<std::string, double> mean_reciprocal_rank(const MethodTable& table,
                                                   const std::vector<std::string>& tasks,
                                                   const std::vector<std::string>& methods);

struct MrrReport {
    std::vector<std::string> methods;
    // group ("all" | "health" | "lung") -> method -> MRR
    std::map<std::string, std::map<std::string, double>> values;
    std::vector<std::string> mismatches;  // vs pinned published values

    bool ok() const { return mismatches.empty(); }
    std::string to_text() const;
};

// Loads the published per-task results table (CSV: task_id,group,direction,
// method,value), recomputes MRR for all tasks and per group, and compares
// each number to the published summary within +/-5e-4.
MrrReport reproduce_mrr_fixture(const std::string& fixture_path);

// One benchmark outcome; `error` is nonempty when the task failed.
struct ResultRecord {
    std::string task_id;
    std::string method;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_unit;  // per run (fixed split) or per subject (loso)
    std::string error;
};

std::string results_to_csv(const std::vector<ResultRecord>& records);
std::string results_to_markdown(const std::vector<ResultRecord>& records);

// Runs one task over precomputed features: splits per the task spec, trains
// one probe per run (fixed splits) or per fold (loso), and aggregates.
// `task_salt` keeps split seeds distinct between tasks of one benchmark run.
// Errors propagate; run_benchmark catches them per task.
ResultRecord run_task(const data::Manifest& m, const FeatureMatrix& feats, const TaskSpec& task,
                      const std::string& method_name, uint64_t seed, uint64_t task_salt = 0);

// Runs every task against one frozen encoder: fixed-split tasks train
// `n_runs` probes with per-run seeds and aggregate over runs; loso tasks
// aggregate over held-out subjects. Writes results.csv and report.md under
// out_dir (if nonempty). Task failures are recorded and the run continues.
std::vector<ResultRecord> run_benchmark(const data::Manifest& m, ad::ParamStore<float>& enc_ps,
                                        const models::EncoderConfig& enc,
                                        const std::string& method_name,
                                        const std::vector<TaskSpec>& tasks,
                                        const dsp::DspConfig& dcfg, uint64_t seed,
                                        const std::string& out_dir);

}  // namespace opera::bench

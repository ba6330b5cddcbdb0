#include "opera/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "opera/wav.hpp"

namespace fs = std::filesystem;

namespace opera::bench {

using ad::Array;
using ad::ParamStore;
using ad::Tape;
using ad::Tensor;

// ---------------------------------------------------------------- task spec

void TaskSpec::validate() const {
    if (task_id.empty()) throw ConfigError("task_id must be nonempty");
    if (kind != "binary" && kind != "multiclass" && kind != "regression")
        throw ConfigError("task kind must be binary, multiclass, or regression");
    if (kind == "binary" && n_classes != 2)
        throw ConfigError("binary task must have n_classes == 2");
    if (kind == "multiclass" && n_classes < 2)
        throw ConfigError("multiclass task needs n_classes >= 2");
    const bool classify = kind != "regression";
    if (classify && metric != "auroc")
        throw ConfigError("classification task '" + task_id + "' must use the auroc metric");
    if (!classify && metric != "mae")
        throw ConfigError("regression task '" + task_id + "' must use the mae metric");
    if (split != "official" && split != "participant_independent" && split != "loso")
        throw ConfigError("task split must be official, participant_independent, or loso");
    if (label_key.empty()) throw ConfigError("task label_key must be nonempty");
    if (n_runs < 1) throw ConfigError("n_runs must be >= 1");
    if (!(l2 >= 0.0)) throw ConfigError("l2 must be >= 0");
}

TaskSpec TaskSpec::classification(std::string id, std::string label_key, int n_classes) {
    TaskSpec t;
    t.task_id = std::move(id);
    t.kind = n_classes == 2 ? "binary" : "multiclass";
    t.n_classes = n_classes;
    t.metric = "auroc";
    t.pad_policy = dsp::PadPolicy::repeat;
    t.label_key = std::move(label_key);
    return t;
}

TaskSpec TaskSpec::regression(std::string id, std::string label_key) {
    TaskSpec t;
    t.task_id = std::move(id);
    t.kind = "regression";
    t.metric = "mae";
    t.pad_policy = dsp::PadPolicy::zero;
    t.label_key = std::move(label_key);
    return t;
}

// ---------------------------------------------------------------- features

int64_t max_input_frames(const models::EncoderConfig& enc, int n_mels) {
    enc.validate();
    if (enc.kind == "vit") {
        if (n_mels % enc.patch != 0)
            throw ConfigError("mel count " + std::to_string(n_mels) +
                              " is not a multiple of the patch size");
        const int64_t cols = n_mels / enc.patch;
        const int64_t max_rows = enc.max_positions / cols;
        if (max_rows < 1)
            throw ConfigError("max_positions too small for " + std::to_string(n_mels) + " mels");
        return max_rows * enc.patch;
    }
    return 256;  // convolutional encoders accept any length; cap one window at 256 frames
}

FeatureMatrix extract_features(ParamStore<float>& enc_ps, const models::EncoderConfig& enc,
                               const data::Manifest& m, const std::vector<std::string>& clip_ids,
                               const dsp::DspConfig& dcfg, dsp::PadPolicy policy) {
    enc.validate();
    dsp::DspConfig cfg = dcfg;
    cfg.norm_mean = m.norm_mean;
    cfg.norm_std = m.norm_std;
    cfg.validate();

    const int64_t max_f = max_input_frames(enc, cfg.n_mels);
    FeatureMatrix out;
    out.ids = clip_ids;
    out.x = Array<float>::zeros({static_cast<int64_t>(clip_ids.size()), enc.embed_dim});

    for (size_t i = 0; i < clip_ids.size(); ++i) {
        const data::ClipRecord& rec = m.by_id(clip_ids[i]);
        try {
            dsp::WaveForm wave = dsp::read_wav(rec.path);
            wave = dsp::mix_mono(wave);
            wave = dsp::resample(wave, cfg.target_rate);
            dsp::Spectrogram spec = dsp::log_mel(wave, cfg);
            if (spec.n_frames < 1) throw InvalidInputError("no frames after preprocessing");

            int64_t target = std::max<int64_t>(spec.n_frames, enc.min_input_frames);
            if (enc.kind == "vit")
                target = (target + enc.patch - 1) / enc.patch * enc.patch;
            if (target > spec.n_frames) spec = dsp::pad(spec, target, policy);

            std::vector<dsp::Spectrogram> segments;
            if (spec.n_frames > max_f)
                segments = dsp::segment_frames(spec, max_f, std::max<int64_t>(1, max_f / 2));
            else
                segments.push_back(std::move(spec));

            std::vector<const dsp::Spectrogram*> ptrs;
            for (const auto& s : segments) ptrs.push_back(&s);
            Tape<float> tape;
            Tensor<float> emb =
                models::encode_batch(tape, enc_ps, enc, tape.constant(models::stack_batch<float>(ptrs)));
            const Array<float>& ev = emb.val();
            const int64_t S = ev.dims[0];
            for (int64_t k = 0; k < enc.embed_dim; ++k) {
                double acc = 0.0;
                for (int64_t s = 0; s < S; ++s) acc += ev.v[s * enc.embed_dim + k];
                out.x.v[i * enc.embed_dim + k] = static_cast<float>(acc / static_cast<double>(S));
            }
        } catch (const InvalidInputError& e) {
            throw InvalidInputError("clip '" + rec.id + "': " + e.what());
        }
    }
    return out;
}

void save_features(const std::string& path, const FeatureMatrix& f) {
    if (f.x.ndim() != 2) throw ShapeError("feature matrix must be [n, d]");
    if (static_cast<int64_t>(f.ids.size()) != f.n())
        throw ShapeError("feature matrix needs one id per row");
    std::string buf;
    buf += "OPFT";
    le::write<uint32_t>(buf, 1);
    le::write<uint32_t>(buf, static_cast<uint32_t>(f.n()));
    le::write<uint32_t>(buf, static_cast<uint32_t>(f.dim()));
    for (float v : f.x.v) le::write<float>(buf, v);
    for (const std::string& id : f.ids) {
        if (id.size() > 65535) throw ContractError("clip id too long for feature index");
        le::write<uint16_t>(buf, static_cast<uint16_t>(id.size()));
        buf += id;
    }
    write_file(path, buf);
}

FeatureMatrix load_features(const std::string& path) {
    const std::string buf = read_file(path);
    if (buf.size() < 16 || buf.compare(0, 4, "OPFT") != 0)
        throw IoError("not a feature archive: " + path);
    size_t off = 4;
    const uint32_t version = le::read<uint32_t>(buf, off);
    if (version != 1) throw IoError("unsupported feature archive version in " + path);
    const uint32_t n = le::read<uint32_t>(buf, off);
    const uint32_t d = le::read<uint32_t>(buf, off);
    FeatureMatrix f;
    f.x = Array<float>::zeros({static_cast<int64_t>(n), static_cast<int64_t>(d)});
    if (off + static_cast<size_t>(n) * d * sizeof(float) > buf.size())
        throw IoError("truncated feature archive: " + path);
    for (float& v : f.x.v) v = le::read<float>(buf, off);
    for (uint32_t i = 0; i < n; ++i) {
        const uint16_t len = le::read<uint16_t>(buf, off);
        if (off + len > buf.size()) throw IoError("truncated feature archive: " + path);
        f.ids.push_back(buf.substr(off, len));
        off += len;
    }
    if (off != buf.size()) throw IoError("trailing bytes in feature archive: " + path);
    return f;
}

// ---------------------------------------------------------------- probes

namespace {

std::vector<int64_t> class_targets(const std::vector<double>& y, int n_classes,
                                   const std::string& what) {
    std::vector<int64_t> t(y.size());
    for (size_t i = 0; i < y.size(); ++i) {
        const double v = y[i];
        if (!std::isfinite(v) || v != std::floor(v))
            throw InvalidInputError(what + " labels must be integer class ids");
        const auto c = static_cast<int64_t>(v);
        if (c < 0 || c >= n_classes)
            throw InvalidInputError(what + " label " + std::to_string(c) + " outside [0, " +
                                    std::to_string(n_classes) + ")");
        t[i] = c;
    }
    return t;
}

void require_two_classes(const std::vector<int64_t>& t) {
    const std::set<int64_t> distinct(t.begin(), t.end());
    if (distinct.size() < 2)
        throw InvalidInputError("labels contain a single class; nothing to separate");
}

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t i = n; i > 1; --i) {
        const auto j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

Array<float> take_rows(const Array<float>& x, const std::vector<size_t>& idx, size_t lo,
                       size_t hi) {
    const int64_t d = x.dims[1];
    Array<float> out = Array<float>::zeros({static_cast<int64_t>(hi - lo), d});
    for (size_t r = lo; r < hi; ++r)
        std::copy_n(x.v.begin() + static_cast<int64_t>(idx[r]) * d, d,
                    out.v.begin() + static_cast<int64_t>(r - lo) * d);
    return out;
}

// mean data loss (no L2): cross-entropy for classification, MAE for regression
double probe_data_loss(const Array<float>& w, const Array<float>& b, const Array<float>& x,
                       const std::vector<double>& y, const std::string& kind, int n_classes) {
    const int64_t n = x.dims[0], d = x.dims[1];
    const int64_t K = kind == "regression" ? 1 : n_classes;
    double total = 0.0;
    std::vector<double> row(static_cast<size_t>(K));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t k = 0; k < K; ++k) {
            double acc = b.v[static_cast<size_t>(k)];
            for (int64_t j = 0; j < d; ++j) acc += static_cast<double>(x.v[i * d + j]) * w.v[j * K + k];
            row[static_cast<size_t>(k)] = acc;
        }
        if (kind == "regression") {
            total += std::abs(row[0] - y[static_cast<size_t>(i)]);
        } else {
            const double mx = *std::max_element(row.begin(), row.end());
            double lse = 0.0;
            for (double v : row) lse += std::exp(v - mx);
            lse = mx + std::log(lse);
            total += lse - row[static_cast<size_t>(static_cast<int64_t>(y[static_cast<size_t>(i)]))];
        }
    }
    return total / static_cast<double>(n);
}

}  // namespace

ProbeModel train_probe(const Array<float>& x, const std::vector<double>& y, const TaskSpec& task,
                       const ProbeConfig& cfg, const Array<float>* val_x,
                       const std::vector<double>* val_y) {
    task.validate();
    if (x.ndim() != 2) throw ShapeError("probe features must be [n, d]");
    const int64_t n = x.dims[0], d = x.dims[1];
    if (n < 2) throw InvalidInputError("probe training needs at least two examples");
    if (static_cast<int64_t>(y.size()) != n)
        throw ShapeError("probe needs one label per feature row");
    if ((val_x == nullptr) != (val_y == nullptr))
        throw ConfigError("validation features and labels must come together");
    if (val_x != nullptr) {
        if (val_x->ndim() != 2 || val_x->dims[1] != d)
            throw ShapeError("validation features must be [n_val, " + std::to_string(d) + "]");
        if (static_cast<int64_t>(val_y->size()) != val_x->dims[0])
            throw ShapeError("validation needs one label per feature row");
    }
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw ConfigError("probe epochs and batch_size must be >= 1");

    const bool classify = task.kind != "regression";
    const int64_t K = classify ? task.n_classes : 1;
    std::vector<int64_t> targets;
    if (classify) {
        targets = class_targets(y, task.n_classes, "training");
        require_two_classes(targets);
        if (val_y != nullptr) class_targets(*val_y, task.n_classes, "validation");
    }

    ParamStore<float> ps;
    ps.add("probe.w", Array<float>::zeros({d, K}));
    ps.add("probe.b", Array<float>::zeros({K}));
    const ad::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};

    double best_val = std::numeric_limits<double>::infinity();
    std::map<std::string, Array<float>> best_weights;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(Rng::mix(cfg.seed, 200 + static_cast<uint64_t>(epoch)));
        const std::vector<size_t> idx = shuffled_indices(static_cast<size_t>(n), order_rng);
        for (size_t lo = 0; lo < idx.size(); lo += static_cast<size_t>(cfg.batch_size)) {
            const size_t hi = std::min(idx.size(), lo + static_cast<size_t>(cfg.batch_size));
            Tape<float> tape;
            Tensor<float> xs = tape.constant(take_rows(x, idx, lo, hi));
            Tensor<float> w = tape.param(ps, "probe.w");
            Tensor<float> b = tape.param(ps, "probe.b");
            Tensor<float> logits = ad::add(ad::matmul(xs, w), b);
            Tensor<float> loss;
            if (classify) {
                std::vector<int64_t> t(hi - lo);
                for (size_t r = lo; r < hi; ++r) t[r - lo] = targets[idx[r]];
                loss = ad::cross_entropy_logits(logits, t);
            } else {
                Array<float> t = Array<float>::zeros({static_cast<int64_t>(hi - lo), 1});
                for (size_t r = lo; r < hi; ++r)
                    t.v[r - lo] = static_cast<float>(y[idx[r]]);
                Tensor<float> diff = ad::sub(logits, tape.constant(t));
                loss = ad::mean_all(ad::add(ad::relu(diff), ad::relu(ad::scale(diff, -1.0f))));
            }
            if (cfg.l2 > 0.0)
                loss = ad::add(loss, ad::scale(ad::sum_all(ad::mul(w, w)), static_cast<float>(cfg.l2)));
            tape.backward(loss);
            ad::adam_step(ps, tape.param_grads(), adam);
        }
        if (val_x != nullptr) {
            const double vl = probe_data_loss(ps.at("probe.w"), ps.at("probe.b"), *val_x, *val_y,
                                              task.kind, task.n_classes);
            if (vl < best_val) {
                best_val = vl;
                best_weights = ps.values;
            }
        }
    }
    if (val_x != nullptr) ps.values = std::move(best_weights);

    ProbeModel pm;
    pm.kind = task.kind;
    pm.n_classes = static_cast<int>(K == 1 ? task.n_classes : K);
    pm.w = ps.at("probe.w");
    pm.b = ps.at("probe.b");
    return pm;
}

ad::Array<float> probe_scores(const ProbeModel& probe, const Array<float>& x) {
    if (x.ndim() != 2) throw ShapeError("probe features must be [n, d]");
    if (probe.w.ndim() != 2 || x.dims[1] != probe.w.dims[0])
        throw ShapeError("feature dimension " + std::to_string(x.dims[1]) +
                         " does not match probe input dimension " +
                         std::to_string(probe.w.ndim() == 2 ? probe.w.dims[0] : -1));
    const int64_t n = x.dims[0], d = x.dims[1], K = probe.w.dims[1];
    Array<float> out = Array<float>::zeros(probe.kind == "regression" ? ad::Shape{n}
                                                                      : ad::Shape{n, K});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < K; ++k) {
            double acc = probe.b.v[static_cast<size_t>(k)];
            for (int64_t j = 0; j < d; ++j)
                acc += static_cast<double>(x.v[i * d + j]) * probe.w.v[j * K + k];
            out.v[i * K + k] = static_cast<float>(acc);
        }
    return out;
}

double evaluate_probe(const ProbeModel& probe, const Array<float>& x,
                      const std::vector<double>& y, const TaskSpec& task) {
    if (static_cast<int64_t>(y.size()) != (x.ndim() == 2 ? x.dims[0] : -1))
        throw ShapeError("evaluation needs one label per feature row");
    const Array<float> s = probe_scores(probe, x);
    if (task.kind == "regression") {
        std::vector<double> pred(s.v.begin(), s.v.end());
        return mae(pred, y);
    }
    const std::vector<int64_t> t = class_targets(y, task.n_classes, "evaluation");
    std::vector<int> labels(t.begin(), t.end());
    if (task.kind == "binary") {
        std::vector<double> score(y.size());
        for (size_t i = 0; i < y.size(); ++i)
            score[i] = static_cast<double>(s.v[i * 2 + 1]) - static_cast<double>(s.v[i * 2]);
        return auroc(score, labels);
    }
    std::vector<double> score(s.v.begin(), s.v.end());
    return multiclass_auroc(score, task.n_classes, labels);
}

double zero_shot(const ProbeModel& probe, const Array<float>& x, const std::vector<double>& y,
                 const TaskSpec& task) {
    task.validate();
    if ((probe.kind == "regression") != (task.kind == "regression"))
        throw ConfigError("probe was trained for a " + probe.kind + " task, not " + task.kind);
    if (x.ndim() != 2 || probe.w.ndim() != 2 || x.dims[1] != probe.w.dims[0])
        throw ShapeError("feature dimension mismatch: probe expects " +
                         std::to_string(probe.w.ndim() == 2 ? probe.w.dims[0] : -1) + ", got " +
                         std::to_string(x.ndim() == 2 ? x.dims[1] : -1));
    if (task.kind != "regression") {
        if (task.n_classes != probe.n_classes)
            throw InvalidInputError("label-space mismatch: probe has " +
                                    std::to_string(probe.n_classes) + " classes, task has " +
                                    std::to_string(task.n_classes));
        class_targets(y, probe.n_classes, "zero-shot");
    }
    return evaluate_probe(probe, x, y, task);
}

// ---------------------------------------------------------------- finetune

void finetune(ParamStore<float>& ps, const models::EncoderConfig& enc,
              const std::vector<dsp::Spectrogram>& specs, const std::vector<double>& y,
              const TaskSpec& task, const FinetuneConfig& cfg) {
    task.validate();
    enc.validate();
    if (specs.empty()) throw InvalidInputError("finetune needs at least one clip");
    if (specs.size() != y.size()) throw ShapeError("finetune needs one label per clip");
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw ConfigError("finetune epochs and batch_size must be >= 1");

    const bool classify = task.kind != "regression";
    const int64_t K = classify ? task.n_classes : 1;
    std::vector<int64_t> targets;
    if (classify) {
        targets = class_targets(y, task.n_classes, "finetune");
        require_two_classes(targets);
    }

    if (!ps.has("ft.w")) {
        ps.add("ft.w", Array<float>::zeros({enc.embed_dim, K}));
        ps.add("ft.b", Array<float>::zeros({K}));
    }
    const auto frozen = [&](const std::string& name) {
        for (const std::string& p : cfg.freeze)
            if (name.rfind(p, 0) == 0) return true;
        return false;
    };
    bool any_trainable = false;
    for (const auto& [name, arr] : ps.values)
        if (!frozen(name)) any_trainable = true;
    if (!any_trainable) throw ConfigError("every parameter is frozen; nothing to finetune");

    int64_t target_frames = enc.min_input_frames;
    for (const auto& s : specs) target_frames = std::max(target_frames, s.n_frames);
    if (enc.kind == "vit")
        target_frames = (target_frames + enc.patch - 1) / enc.patch * enc.patch;
    std::vector<dsp::Spectrogram> padded;
    padded.reserve(specs.size());
    for (const auto& s : specs)
        padded.push_back(s.n_frames < target_frames ? dsp::pad(s, target_frames, task.pad_policy)
                                                    : s);

    const ad::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(Rng::mix(cfg.seed, 300 + static_cast<uint64_t>(epoch)));
        const std::vector<size_t> idx = shuffled_indices(specs.size(), order_rng);
        for (size_t lo = 0; lo < idx.size(); lo += static_cast<size_t>(cfg.batch_size)) {
            const size_t hi = std::min(idx.size(), lo + static_cast<size_t>(cfg.batch_size));
            std::vector<const dsp::Spectrogram*> ptrs;
            for (size_t r = lo; r < hi; ++r) ptrs.push_back(&padded[idx[r]]);
            Tape<float> tape;
            Tensor<float> emb =
                models::encode_batch(tape, ps, enc, tape.constant(models::stack_batch<float>(ptrs)));
            Tensor<float> w = tape.param(ps, "ft.w");
            Tensor<float> b = tape.param(ps, "ft.b");
            Tensor<float> logits = ad::add(ad::matmul(emb, w), b);
            Tensor<float> loss;
            if (classify) {
                std::vector<int64_t> t(hi - lo);
                for (size_t r = lo; r < hi; ++r) t[r - lo] = targets[idx[r]];
                loss = ad::cross_entropy_logits(logits, t);
            } else {
                Array<float> t = Array<float>::zeros({static_cast<int64_t>(hi - lo), 1});
                for (size_t r = lo; r < hi; ++r) t.v[r - lo] = static_cast<float>(y[idx[r]]);
                Tensor<float> diff = ad::sub(logits, tape.constant(t));
                loss = ad::mean_all(ad::add(ad::relu(diff), ad::relu(ad::scale(diff, -1.0f))));
            }
            if (cfg.l2 > 0.0)
                loss = ad::add(loss, ad::scale(ad::sum_all(ad::mul(w, w)), static_cast<float>(cfg.l2)));
            tape.backward(loss);
            std::map<std::string, Array<float>> grads = tape.param_grads();
            for (auto it = grads.begin(); it != grads.end();)
                it = frozen(it->first) ? grads.erase(it) : std::next(it);
            ad::adam_step(ps, grads, adam);
        }
    }
}

// ---------------------------------------------------------------- metrics

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("auroc needs one score per label");
    const size_t n = scores.size();
    if (n < 2) throw InvalidInputError("auroc needs at least two examples");
    int64_t n_pos = 0, n_neg = 0;
    for (size_t i = 0; i < n; ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw InvalidInputError("auroc labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw InvalidInputError("auroc scores must be finite");
        (labels[i] == 1 ? n_pos : n_neg) += 1;
    }
    if (n_pos == 0 || n_neg == 0)
        throw InvalidInputError("auroc needs both classes present");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t lo = 0;
    while (lo < n) {
        size_t hi = lo;
        while (hi < n && scores[order[hi]] == scores[order[lo]]) ++hi;
        const double avg_rank = static_cast<double>(lo + hi + 1) / 2.0;  // 1-based
        for (size_t k = lo; k < hi; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        lo = hi;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double multiclass_auroc(const std::vector<double>& scores, int n_classes,
                        const std::vector<int>& labels) {
    if (n_classes < 2) throw ConfigError("multiclass auroc needs n_classes >= 2");
    const size_t n = labels.size();
    if (scores.size() != n * static_cast<size_t>(n_classes))
        throw ShapeError("multiclass auroc needs an [n, n_classes] score matrix");
    for (int l : labels)
        if (l < 0 || l >= n_classes)
            throw InvalidInputError("multiclass auroc label outside [0, n_classes)");

    double total = 0.0;
    int contributing = 0;
    for (int k = 0; k < n_classes; ++k) {
        std::vector<int> binary(n);
        int64_t pos = 0;
        for (size_t i = 0; i < n; ++i) {
            binary[i] = labels[i] == k ? 1 : 0;
            pos += binary[i];
        }
        if (pos == 0 || pos == static_cast<int64_t>(n)) continue;
        std::vector<double> col(n);
        for (size_t i = 0; i < n; ++i)
            col[i] = scores[i * static_cast<size_t>(n_classes) + static_cast<size_t>(k)];
        total += auroc(col, binary);
        ++contributing;
    }
    if (contributing == 0)
        throw InvalidInputError("multiclass auroc needs at least one class with both outcomes");
    return total / static_cast<double>(contributing);
}

double mae(const std::vector<double>& pred, const std::vector<double>& y) {
    if (pred.size() != y.size()) throw ShapeError("mae needs one prediction per target");
    if (pred.empty()) throw InvalidInputError("mae needs at least one example");
    double total = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) total += std::abs(pred[i] - y[i]);
    return total / static_cast<double>(pred.size());
}

double mape(const std::vector<double>& pred, const std::vector<double>& y) {
    if (pred.size() != y.size()) throw ShapeError("mape needs one prediction per target");
    if (pred.empty()) throw InvalidInputError("mape needs at least one example");
    double total = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (y[i] == 0.0)
            throw InvalidInputError("mape is undefined when a target is zero");
        total += std::abs(pred[i] - y[i]) / std::abs(y[i]);
    }
    return total / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------- welch

namespace {

// continued fraction for the regularized incomplete beta, modified Lentz
double beta_cf(double a, double b, double x) {
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 1e-12;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 500; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    throw ContractError("incomplete beta continued fraction did not converge");
}

double beta_inc(double a, double b, double x) {
    if (a <= 0.0 || b <= 0.0) throw InvalidInputError("incomplete beta needs a, b > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cf(a, b, x) / a;
    return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace

WelchResult welch_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw InvalidInputError("welch t-test needs at least two values per sample");
    const auto stats = [](const std::vector<double>& v) {
        const double n = static_cast<double>(v.size());
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::pair<double, double>(m, ss / (n - 1.0));
    };
    const auto [ma, va] = stats(a);
    const auto [mb, vb] = stats(b);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());

    WelchResult r;
    if (va == 0.0 && vb == 0.0) {
        // degenerate: both samples constant
        r.df = na + nb - 2.0;
        if (ma == mb) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = ma > mb ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    const double sa = va / na, sb = vb / nb;
    r.t = (ma - mb) / std::sqrt(sa + sb);
    r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p = beta_inc(r.df / 2.0, 0.5, r.df / (r.df + r.t * r.t));
    return r;
}

// ---------------------------------------------------------------- mrr

void MethodTable::add(const std::string& task, const std::string& method, double value,
                      bool task_higher_better, const std::string& group_name) {
    if (!std::isfinite(value))
        throw InvalidInputError("table value for (" + task + ", " + method + ") must be finite");
    const auto key = std::make_pair(task, method);
    if (values.count(key))
        throw InvalidInputError("duplicate table entry for task '" + task + "', method '" +
                                method + "'");
    const auto dir = higher_better.find(task);
    if (dir != higher_better.end() && dir->second != task_higher_better)
        throw InvalidInputError("conflicting direction for task '" + task + "'");
    const auto grp = group.find(task);
    if (grp != group.end() && grp->second != group_name)
        throw InvalidInputError("conflicting group for task '" + task + "'");
    if (dir == higher_better.end()) tasks.push_back(task);
    if (std::find(methods.begin(), methods.end(), method) == methods.end())
        methods.push_back(method);
    values[key] = value;
    higher_better[task] = task_higher_better;
    group[task] = group_name;
}

double MethodTable::at(const std::string& task, const std::string& method) const {
    const auto it = values.find(std::make_pair(task, method));
    if (it == values.end())
        throw CompletenessError("no value for task '" + task + "', method '" + method + "'");
    return it->second;
}

std::map<std::string, double> mean_reciprocal_rank(const MethodTable& table,
                                                   const std::vector<std::string>& tasks,
                                                   const std::vector<std::string>& methods) {
    if (tasks.empty()) throw InvalidInputError("mean reciprocal rank needs at least one task");
    if (methods.empty()) throw InvalidInputError("mean reciprocal rank needs at least one method");
    std::map<std::string, double> out;
    for (const std::string& m : methods) {
        double sum = 0.0;
        for (const std::string& t : tasks) {
            const bool higher = table.higher_better.at(t);
            const double mine = table.at(t, m);
            int rank = 1;  // competition ranking: ties share the best rank
            for (const std::string& other : methods) {
                if (other == m) continue;
                const double theirs = table.at(t, other);
                if (higher ? theirs > mine : theirs < mine) ++rank;
            }
            sum += 1.0 / static_cast<double>(rank);
        }
        out[m] = sum / static_cast<double>(tasks.size());
    }
    return out;
}

namespace {

struct PublishedMrr {
    const char* method;
    double all, health, lung;
};

// summary numbers the fixture must reproduce
constexpr PublishedMrr kPublishedMrr[] = {
    {"opensmile", 0.2912, 0.2190, 0.4150}, {"vggish", 0.2289, 0.1714, 0.3276},
    {"audiomae", 0.2489, 0.2058, 0.3228},  {"clap", 0.3435, 0.4319, 0.1918},
    {"opera-ct", 0.5632, 0.6944, 0.3381},  {"opera-ce", 0.4412, 0.4153, 0.4857},
    {"opera-gt", 0.5298, 0.4569, 0.6548},
};
constexpr double kMrrTolerance = 5e-4;

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

}  // namespace

std::string MrrReport::to_text() const {
    std::ostringstream out;
    for (const char* g : {"all", "health", "lung"}) {
        const auto git = values.find(g);
        if (git == values.end()) continue;
        for (const std::string& m : methods) {
            const auto mit = git->second.find(m);
            if (mit == git->second.end()) continue;
            out << g << " " << m << " " << fmt("%.4f", mit->second) << "\n";
        }
    }
    return out.str();
}

MrrReport reproduce_mrr_fixture(const std::string& fixture_path) {
    const std::string text = read_file(fixture_path);
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line))
        throw InvalidInputError("fixture '" + fixture_path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "task_id,group,direction,method,value")
        throw InvalidInputError("fixture header must be task_id,group,direction,method,value");

    MethodTable table;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != 5)
            throw InvalidInputError("fixture line " + std::to_string(line_no) +
                                    ": expected 5 comma-separated fields");
        const std::string& direction = cells[2];
        if (direction != "higher" && direction != "lower")
            throw InvalidInputError("fixture line " + std::to_string(line_no) +
                                    ": direction must be higher or lower");
        double value = 0.0;
        size_t used = 0;
        try {
            value = std::stod(cells[4], &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != cells[4].size() || cells[4].empty())
            throw InvalidInputError("fixture line " + std::to_string(line_no) +
                                    ": value is not a number");
        table.add(cells[0], cells[3], value, direction == "higher", cells[1]);
    }
    if (table.tasks.empty()) throw InvalidInputError("fixture has no data rows");

    std::vector<std::string> health_tasks, lung_tasks;
    for (const std::string& t : table.tasks) {
        if (table.group.at(t) == "health") health_tasks.push_back(t);
        if (table.group.at(t) == "lung") lung_tasks.push_back(t);
    }

    MrrReport report;
    report.methods = table.methods;
    report.values["all"] = mean_reciprocal_rank(table, table.tasks, table.methods);
    if (!health_tasks.empty())
        report.values["health"] = mean_reciprocal_rank(table, health_tasks, table.methods);
    if (!lung_tasks.empty())
        report.values["lung"] = mean_reciprocal_rank(table, lung_tasks, table.methods);

    for (const PublishedMrr& row : kPublishedMrr) {
        const struct {
            const char* group;
            double want;
        } checks[] = {{"all", row.all}, {"health", row.health}, {"lung", row.lung}};
        for (const auto& chk : checks) {
            const auto git = report.values.find(chk.group);
            const auto mit = git == report.values.end() ? std::map<std::string, double>::iterator{}
                                                        : git->second.find(row.method);
            if (git == report.values.end() || mit == git->second.end()) {
                report.mismatches.push_back(std::string(chk.group) + "/" + row.method +
                                            ": missing from fixture");
                continue;
            }
            if (std::abs(mit->second - chk.want) > kMrrTolerance)
                report.mismatches.push_back(std::string(chk.group) + "/" + row.method +
                                            ": computed " + fmt("%.4f", mit->second) +
                                            " expected " + fmt("%.4f", chk.want));
        }
    }
    return report;
}

// ---------------------------------------------------------------- benchmark

std::string results_to_csv(const std::vector<ResultRecord>& records) {
    std::string out = "task_id,method,metric,mean,std,n_units\n";
    for (const ResultRecord& r : records) {
        if (!r.error.empty()) continue;
        out += r.task_id + "," + r.method + "," + r.metric + "," + fmt("%.8g", r.mean) + "," +
               fmt("%.8g", r.stddev) + "," + std::to_string(r.per_unit.size()) + "\n";
    }
    return out;
}

std::string results_to_markdown(const std::vector<ResultRecord>& records) {
    std::string out = "# Benchmark results\n\n";
    out += "| task | method | metric | mean | std | units |\n";
    out += "|---|---|---|---|---|---|\n";
    bool any_failed = false;
    for (const ResultRecord& r : records) {
        if (!r.error.empty()) {
            any_failed = true;
            continue;
        }
        out += "| " + r.task_id + " | " + r.method + " | " + r.metric + " | " +
               fmt("%.4f", r.mean) + " | " + fmt("%.4f", r.stddev) + " | " +
               std::to_string(r.per_unit.size()) + " |\n";
    }
    if (any_failed) {
        out += "\n## Failures\n\n";
        for (const ResultRecord& r : records)
            if (!r.error.empty()) out += "- " + r.task_id + ": " + r.error + "\n";
    }
    return out;
}

namespace {

struct LabeledIds {
    std::vector<std::string> ids;
    std::vector<double> labels;  // aligned with ids
};

LabeledIds collect_labeled(const data::Manifest& m, const std::string& label_key) {
    LabeledIds out;
    for (const data::ClipRecord& rec : m.records) {
        const auto it = rec.labels.find(label_key);
        if (it == rec.labels.end()) continue;
        if (it->second.kind != data::LabelValue::Kind::number)
            throw InvalidInputError("label '" + label_key + "' on clip '" + rec.id +
                                    "' must be numeric");
        out.ids.push_back(rec.id);
        out.labels.push_back(it->second.num);
    }
    if (out.ids.empty())
        throw InvalidInputError("no clip carries the label '" + label_key + "'");
    return out;
}

struct PartitionedIds {
    std::vector<std::string> train, val, test;
};

PartitionedIds official_partition(const data::Manifest& m, const LabeledIds& labeled) {
    PartitionedIds p;
    for (const std::string& id : labeled.ids) {
        const std::string& tag = m.by_id(id).split;
        if (tag == "train")
            p.train.push_back(id);
        else if (tag == "val")
            p.val.push_back(id);
        else if (tag == "test")
            p.test.push_back(id);
        else
            throw InvalidInputError("clip '" + id + "' has no official split tag");
    }
    if (p.train.empty() || p.test.empty())
        throw InvalidInputError("official split needs nonempty train and test partitions");
    return p;
}

void check_no_subject_leakage(const data::Manifest& m, const PartitionedIds& p) {
    const auto subjects = [&](const std::vector<std::string>& ids) {
        std::set<std::string> s;
        for (const std::string& id : ids) s.insert(m.by_id(id).subject_id);
        return s;
    };
    const std::set<std::string> tr = subjects(p.train), va = subjects(p.val),
                                te = subjects(p.test);
    const auto overlap = [](const std::set<std::string>& a, const std::set<std::string>& b) {
        for (const std::string& s : a)
            if (b.count(s)) return true;
        return false;
    };
    if (overlap(tr, te) || overlap(tr, va) || overlap(va, te))
        throw ContractError("subject appears in more than one partition");
}

struct Gathered {
    Array<float> x;
    std::vector<double> y;
};

Gathered gather(const FeatureMatrix& feats, const std::map<std::string, size_t>& row_of,
                const std::map<std::string, double>& label_of,
                const std::vector<std::string>& ids) {
    Gathered g;
    const int64_t d = feats.dim();
    g.x = Array<float>::zeros({static_cast<int64_t>(ids.size()), d});
    g.y.reserve(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        const size_t row = row_of.at(ids[i]);
        std::copy_n(feats.x.v.begin() + static_cast<int64_t>(row) * d, d,
                    g.x.v.begin() + static_cast<int64_t>(i) * d);
        g.y.push_back(label_of.at(ids[i]));
    }
    return g;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    if (v.size() < 2) return {m, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / (n - 1.0))};
}

}  // namespace

ResultRecord run_task(const data::Manifest& m, const FeatureMatrix& feats, const TaskSpec& task,
                      const std::string& method_name, uint64_t seed, uint64_t task_salt) {
    task.validate();
    ResultRecord rec;
    rec.task_id = task.task_id;
    rec.method = method_name;
    rec.metric = task.metric;

    const LabeledIds labeled = collect_labeled(m, task.label_key);
    std::map<std::string, double> label_of;
    for (size_t i = 0; i < labeled.ids.size(); ++i) label_of[labeled.ids[i]] = labeled.labels[i];

    std::map<std::string, size_t> row_of;
    for (size_t i = 0; i < feats.ids.size(); ++i) row_of[feats.ids[i]] = i;
    for (const std::string& id : labeled.ids)
        if (!row_of.count(id))
            throw IndexError("no feature row for clip '" + id + "'");

    data::Manifest fm;
    fm.norm_mean = m.norm_mean;
    fm.norm_std = m.norm_std;
    fm.provenance = m.provenance;
    for (const std::string& id : labeled.ids) fm.records.push_back(m.by_id(id));

    if (task.split == "loso") {
        const std::vector<data::SplitPlan> folds = data::loso_splits(fm);
        for (size_t fi = 0; fi < folds.size(); ++fi) {
            const Gathered train = gather(feats, row_of, label_of, folds[fi].train_ids);
            const Gathered test = gather(feats, row_of, label_of, folds[fi].test_ids);
            ProbeConfig pc;
            pc.l2 = task.l2;
            pc.seed = Rng::mix(seed, 700 + static_cast<uint64_t>(fi));
            const ProbeModel probe = train_probe(train.x, train.y, task, pc);
            rec.per_unit.push_back(evaluate_probe(probe, test.x, test.y, task));
        }
    } else {
        PartitionedIds parts;
        if (task.split == "official") {
            parts = official_partition(fm, labeled);
        } else {
            const data::SplitPlan plan = data::split_participant_independent(
                fm, {0.6, 0.2, 0.2}, Rng::mix(seed, 40000 + task_salt));
            parts = {plan.train_ids, plan.val_ids, plan.test_ids};
        }
        check_no_subject_leakage(fm, parts);
        const Gathered train = gather(feats, row_of, label_of, parts.train);
        const Gathered test = gather(feats, row_of, label_of, parts.test);
        const bool has_val = !parts.val.empty();
        const Gathered val = has_val ? gather(feats, row_of, label_of, parts.val) : Gathered{};
        for (int run = 0; run < task.n_runs; ++run) {
            ProbeConfig pc;
            pc.l2 = task.l2;
            pc.seed = Rng::mix(seed, 500 + static_cast<uint64_t>(run));
            const ProbeModel probe = train_probe(train.x, train.y, task, pc,
                                                 has_val ? &val.x : nullptr,
                                                 has_val ? &val.y : nullptr);
            rec.per_unit.push_back(evaluate_probe(probe, test.x, test.y, task));
        }
    }
    std::tie(rec.mean, rec.stddev) = mean_std(rec.per_unit);
    return rec;
}

std::vector<ResultRecord> run_benchmark(const data::Manifest& m, ParamStore<float>& enc_ps,
                                        const models::EncoderConfig& enc,
                                        const std::string& method_name,
                                        const std::vector<TaskSpec>& tasks,
                                        const dsp::DspConfig& dcfg, uint64_t seed,
                                        const std::string& out_dir) {
    if (tasks.empty()) throw ConfigError("benchmark needs at least one task");
    std::vector<ResultRecord> records;

    for (size_t ti = 0; ti < tasks.size(); ++ti) {
        const TaskSpec& task = tasks[ti];
        ResultRecord rec;
        rec.task_id = task.task_id;
        rec.method = method_name;
        rec.metric = task.metric;
        try {
            task.validate();
            const LabeledIds labeled = collect_labeled(m, task.label_key);
            const FeatureMatrix feats =
                extract_features(enc_ps, enc, m, labeled.ids, dcfg, task.pad_policy);
            rec = run_task(m, feats, task, method_name, seed, static_cast<uint64_t>(ti));
        } catch (const Error& e) {
            rec.error = e.what();
            rec.per_unit.clear();
        }
        records.push_back(std::move(rec));
    }

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file((fs::path(out_dir) / "results.csv").string(), results_to_csv(records));
        write_file((fs::path(out_dir) / "report.md").string(), results_to_markdown(records));
    }
    return records;
}

}  // namespace opera::bench

#include "opera/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "json.hpp"
#include "opera/wav.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace opera::data {

bool is_known_modality(const std::string& m) {
    return m == "breath" || m == "cough" || m == "lung" || m == "snore" || m == "vowel";
}

const ClipRecord& Manifest::by_id(const std::string& id) const {
    for (const ClipRecord& r : records)
        if (r.id == id) return r;
    throw IndexError("no clip with id '" + id + "' in manifest");
}

namespace {

[[noreturn]] void line_error(size_t lineno, const std::string& what) {
    throw InvalidInputError("manifest line " + std::to_string(lineno) + ": " + what);
}

json labels_to_json(const std::map<std::string, LabelValue>& labels) {
    json j = json::object();
    for (const auto& [name, v] : labels) {
        if (v.kind == LabelValue::Kind::number) j[name] = v.num;
        else j[name] = v.cat;
    }
    return j;
}

std::map<std::string, LabelValue> labels_from_json(const json& j, size_t lineno) {
    if (!j.is_object()) line_error(lineno, "labels must be an object");
    std::map<std::string, LabelValue> out;
    for (const auto& [name, v] : j.items()) {
        if (v.is_number()) out[name] = LabelValue::number(v.get<double>());
        else if (v.is_string()) out[name] = LabelValue::category(v.get<std::string>());
        else line_error(lineno, "label '" + name + "' must be a number or a string");
    }
    return out;
}

const std::set<std::string> kRecordKeys{"id",       "path",       "subject_id", "source",
                                        "modality", "duration_s", "labels",     "split"};

ClipRecord record_from_json(const json& j, size_t lineno) {
    if (!j.is_object()) line_error(lineno, "record is not an object");
    for (const auto& [key, _] : j.items())
        if (!kRecordKeys.count(key)) line_error(lineno, "unknown record key '" + key + "'");
    ClipRecord r;
    auto need_string = [&](const char* key) {
        if (!j.contains(key) || !j.at(key).is_string() || j.at(key).get<std::string>().empty())
            line_error(lineno, std::string("missing or empty string field '") + key + "'");
        return j.at(key).get<std::string>();
    };
    r.id = need_string("id");
    r.path = need_string("path");
    r.subject_id = need_string("subject_id");
    r.source = need_string("source");
    r.modality = need_string("modality");
    if (!is_known_modality(r.modality))
        line_error(lineno, "unknown modality '" + r.modality + "'");
    if (!j.contains("duration_s") || !j.at("duration_s").is_number())
        line_error(lineno, "missing numeric field 'duration_s'");
    r.duration_s = j.at("duration_s").get<double>();
    if (!(r.duration_s >= 0.0) || !std::isfinite(r.duration_s))
        line_error(lineno, "duration_s must be finite and non-negative");
    if (j.contains("labels")) r.labels = labels_from_json(j.at("labels"), lineno);
    if (j.contains("split")) {
        if (!j.at("split").is_string()) line_error(lineno, "split must be a string");
        r.split = j.at("split").get<std::string>();
    }
    return r;
}

json record_to_json(const ClipRecord& r) {
    json j;
    j["id"] = r.id;
    j["path"] = r.path;
    j["subject_id"] = r.subject_id;
    j["source"] = r.source;
    j["modality"] = r.modality;
    j["duration_s"] = r.duration_s;
    j["labels"] = labels_to_json(r.labels);
    if (!r.split.empty()) j["split"] = r.split;
    return j;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

}  // namespace

Manifest load_manifest(const std::string& path) {
    const std::string text = read_file(path);
    const std::vector<std::string> lines = split_lines(text);

    Manifest m;
    bool any_content = false;
    for (const std::string& l : lines)
        if (!l.empty()) any_content = true;
    if (!any_content) {
        std::fprintf(stderr, "warning: manifest %s is empty\n", path.c_str());
        return m;
    }

    json header;
    try {
        header = json::parse(lines[0]);
    } catch (const json::parse_error& e) {
        line_error(1, std::string("malformed header: ") + e.what());
    }
    if (!header.is_object() || header.value("type", "") != "manifest")
        line_error(1, "header must be an object with type \"manifest\"");
    m.norm_mean = header.value("norm_mean", 0.0);
    m.norm_std = header.value("norm_std", 1.0);
    m.provenance = header.value("provenance", "");
    if (!std::isfinite(m.norm_mean) || !std::isfinite(m.norm_std) || !(m.norm_std > 0.0))
        line_error(1, "normalization constants must be finite with std > 0");

    const fs::path base = fs::path(path).parent_path();
    std::set<std::string> seen;
    for (size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const size_t lineno = i + 1;
        json j;
        try {
            j = json::parse(lines[i]);
        } catch (const json::parse_error& e) {
            line_error(lineno, std::string("malformed record: ") + e.what());
        }
        ClipRecord r = record_from_json(j, lineno);
        if (!seen.insert(r.id).second)
            line_error(lineno, "duplicate clip id '" + r.id + "'");
        fs::path p(r.path);
        if (p.is_relative()) p = base / p;
        if (!fs::exists(p))
            throw IoError("manifest line " + std::to_string(lineno) +
                          ": audio file not found: " + p.string());
        r.path = p.string();
        m.records.push_back(std::move(r));
    }
    return m;
}

void write_manifest(const Manifest& m, const std::string& path) {
    if (!std::isfinite(m.norm_mean) || !std::isfinite(m.norm_std) || !(m.norm_std > 0.0))
        throw InvalidInputError("manifest normalization constants must be finite with std > 0");
    json header;
    header["type"] = "manifest";
    header["norm_mean"] = m.norm_mean;
    header["norm_std"] = m.norm_std;
    header["provenance"] = m.provenance;
    std::string out = header.dump() + "\n";
    for (const ClipRecord& r : m.records) out += record_to_json(r).dump() + "\n";
    write_file(path, out);
}

int64_t CropTable::at(const std::string& source, const std::string& modality) const {
    auto it = frames.find({source, modality});
    if (it == frames.end())
        throw ConfigError("crop table has no entry for (" + source + ", " + modality + ")");
    if (it->second < 1) throw ConfigError("crop table entries must be positive");
    return it->second;
}

namespace {

constexpr uint64_t kGroupShuffleBase = 100;
constexpr uint64_t kBatchShuffleStream = 3;
constexpr uint64_t kClipCropBase = uint64_t{1} << 30;

template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
}

}  // namespace

std::vector<std::vector<size_t>> plan_pretrain_batches(const Manifest& m, int batch_size,
                                                       const CropTable& crops, uint64_t seed) {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    std::map<std::pair<std::string, std::string>, std::vector<size_t>> groups;
    for (size_t i = 0; i < m.records.size(); ++i)
        groups[{m.records[i].source, m.records[i].modality}].push_back(i);

    std::vector<std::vector<size_t>> batches;
    uint64_t group_idx = 0;
    for (auto& [key, ids] : groups) {
        crops.at(key.first, key.second);  // completeness check up front
        Rng rng(Rng::mix(seed, kGroupShuffleBase + group_idx++));
        seeded_shuffle(ids, rng);
        const size_t full = ids.size() / static_cast<size_t>(batch_size);
        for (size_t b = 0; b < full; ++b)
            batches.emplace_back(ids.begin() + static_cast<int64_t>(b) * batch_size,
                                 ids.begin() + static_cast<int64_t>(b + 1) * batch_size);
    }
    Rng rng(Rng::mix(seed, kBatchShuffleStream));
    seeded_shuffle(batches, rng);
    return batches;
}

std::vector<ssl::SpecBatch> build_pretrain_batches(const Manifest& m, const dsp::DspConfig& dcfg,
                                                   int batch_size, const CropTable& crops,
                                                   uint64_t seed) {
    dsp::DspConfig cfg = dcfg;
    cfg.norm_mean = m.norm_mean;
    cfg.norm_std = m.norm_std;
    cfg.validate();

    std::vector<std::vector<size_t>> plan = plan_pretrain_batches(m, batch_size, crops, seed);
    std::vector<ssl::SpecBatch> out;
    out.reserve(plan.size());
    for (const std::vector<size_t>& ids : plan) {
        const ClipRecord& first = m.records[ids[0]];
        const int64_t target = crops.at(first.source, first.modality);
        ssl::SpecBatch sb;
        sb.source = first.source;
        sb.modality = first.modality;
        sb.crop_frames = target;
        for (size_t idx : ids) {
            const ClipRecord& r = m.records[idx];
            dsp::WaveForm w = dsp::read_wav(r.path);
            w = dsp::mix_mono(w);
            w = dsp::resample(w, cfg.target_rate);
            dsp::Spectrogram spec = dsp::log_mel(w, cfg);
            spec.source_id = r.id;
            if (spec.n_frames < target) {
                spec = dsp::pad(spec, target, dsp::PadPolicy::repeat);
            } else if (spec.n_frames > target) {
                Rng crop_rng(Rng::mix(seed, kClipCropBase + static_cast<uint64_t>(idx)));
                spec = dsp::random_crop(spec, target, crop_rng);
            }
            sb.specs.push_back(std::move(spec));
        }
        out.push_back(std::move(sb));
    }
    return out;
}

SplitPlan split_participant_independent(const Manifest& m, const std::vector<double>& ratios,
                                        uint64_t seed) {
    if (ratios.size() != 3)
        throw ConfigError("expected three ratios (train, val, test)");
    double sum = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw ConfigError("split ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

    std::set<std::string> subject_set;
    for (const ClipRecord& r : m.records) subject_set.insert(r.subject_id);
    std::vector<std::string> subjects(subject_set.begin(), subject_set.end());
    size_t nonempty = 0;
    for (double r : ratios)
        if (r > 0.0) ++nonempty;
    if (subjects.size() < nonempty)
        throw InvalidInputError("need at least " + std::to_string(nonempty) +
                                " subjects for this split, have " +
                                std::to_string(subjects.size()));

    Rng rng(Rng::mix(seed, 11));
    seeded_shuffle(subjects, rng);

    // largest-remainder apportionment keeps counts matching the ratios
    const double n = static_cast<double>(subjects.size());
    std::vector<size_t> counts(3);
    std::vector<std::pair<double, size_t>> frac;
    size_t assigned = 0;
    for (size_t i = 0; i < 3; ++i) {
        const double target = ratios[i] * n;
        counts[i] = static_cast<size_t>(std::floor(target));
        assigned += counts[i];
        frac.push_back({target - std::floor(target), i});
    }
    std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (size_t k = 0; assigned < subjects.size(); ++k, ++assigned) ++counts[frac[k % 3].second];

    std::vector<std::set<std::string>> parts(3);
    size_t pos = 0;
    for (size_t i = 0; i < 3; ++i)
        for (size_t k = 0; k < counts[i]; ++k) parts[i].insert(subjects[pos++]);

    SplitPlan plan;
    plan.strategy = "participant-independent";
    for (const ClipRecord& r : m.records) {
        if (parts[0].count(r.subject_id)) plan.train_ids.push_back(r.id);
        else if (parts[1].count(r.subject_id)) plan.val_ids.push_back(r.id);
        else plan.test_ids.push_back(r.id);
    }
    return plan;
}

std::vector<SplitPlan> loso_splits(const Manifest& m) {
    std::set<std::string> subject_set;
    for (const ClipRecord& r : m.records) subject_set.insert(r.subject_id);
    if (subject_set.size() < 2)
        throw InvalidInputError("leave-one-subject-out needs at least two subjects");

    std::vector<SplitPlan> folds;
    for (const std::string& held : subject_set) {
        SplitPlan plan;
        plan.strategy = "loso:" + held;
        for (const ClipRecord& r : m.records) {
            if (r.subject_id == held) plan.test_ids.push_back(r.id);
            else plan.train_ids.push_back(r.id);
        }
        folds.push_back(std::move(plan));
    }
    return folds;
}

// ---- synthetic corpus ----

void SynthConfig::validate() const {
    if (n_subjects < 1) throw ConfigError("n_subjects must be positive");
    if (clips_per_subject < 1) throw ConfigError("clips_per_subject must be positive");
    if (!(duration_s > 0.0)) throw ConfigError("duration_s must be positive");
    if (!(rate_min > 0.0) || rate_max < rate_min)
        throw ConfigError("breath rate range must be positive and ordered");
    if (wheeze_probability < 0.0 || wheeze_probability > 1.0)
        throw ConfigError("wheeze_probability must lie in [0, 1]");
    if (!(band_center_hz > 0.0) || band_spread_hz < 0.0 || !(band_width_hz > 0.0))
        throw ConfigError("band-pass parameters must be positive");
    if (!(wheeze_center_hz > 0.0) || wheeze_spread_hz < 0.0)
        throw ConfigError("wheeze tone parameters must be positive");
    if (sample_rate < 1000) throw ConfigError("sample_rate too low");
    if (band_center_hz + band_spread_hz >= sample_rate / 2.0 ||
        wheeze_center_hz + wheeze_spread_hz >= sample_rate / 2.0)
        throw ConfigError("band placement exceeds the Nyquist limit");
}

std::vector<float> breath_envelope(double rate_bpm, double duration_s, int sample_rate) {
    const double period_s = 60.0 / rate_bpm;
    const auto n = static_cast<int64_t>(std::llround(duration_s * sample_rate));
    std::vector<float> env(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        env[static_cast<size_t>(i)] =
            static_cast<float>(0.5 * (1.0 - std::cos(2.0 * 3.14159265358979324 * t / period_s)));
    }
    return env;
}

namespace {

constexpr double kTau = 6.283185307179586;
constexpr uint64_t kSubjectStreamBase = 1000000;

// RBJ band-pass with 0 dB peak gain
struct Biquad {
    double b0, b1, b2, a1, a2;
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

    static Biquad bandpass(double center_hz, double width_hz, int sample_rate) {
        const double w0 = kTau * center_hz / sample_rate;
        const double q = center_hz / width_hz;
        const double alpha = std::sin(w0) / (2.0 * q);
        const double a0 = 1.0 + alpha;
        return {alpha / a0, 0.0, -alpha / a0, -2.0 * std::cos(w0) / a0, (1.0 - alpha) / a0};
    }
    double step(double x) {
        const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        return y;
    }
};

struct SubjectTimbre {
    double band_center;
};

SubjectTimbre subject_timbre(const SynthConfig& cfg, int subject) {
    Rng rng(Rng::mix(cfg.seed, kSubjectStreamBase + static_cast<uint64_t>(subject)));
    SubjectTimbre t;
    t.band_center = cfg.band_center_hz + rng.uniform(-cfg.band_spread_hz, cfg.band_spread_hz);
    return t;
}

dsp::WaveForm synth_clip(const SynthConfig& cfg, const SubjectTimbre& timbre, double rate_bpm,
                         bool wheeze, Rng& rng) {
    const auto n = static_cast<int64_t>(std::llround(cfg.duration_s * cfg.sample_rate));
    const double period_s = 60.0 / rate_bpm;
    // episode properties, not part of the subject's timbre
    const double wheeze_hz =
        cfg.wheeze_center_hz + rng.uniform(-cfg.wheeze_spread_hz, cfg.wheeze_spread_hz);
    const double tone_phase = rng.uniform(0.0, kTau);
    const double depth = rng.uniform(0.55, 1.0);  // breathing effort varies per episode

    Biquad bp = Biquad::bandpass(timbre.band_center, cfg.band_width_hz, cfg.sample_rate);
    std::vector<float> sig(static_cast<size_t>(n));
    double peak = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / cfg.sample_rate;
        const double env = (1.0 - depth) + depth * 0.5 * (1.0 - std::cos(kTau * t / period_s));
        double v = bp.step(rng.uniform(-1.0, 1.0)) * env;
        if (wheeze) {
            // tone burst spanning most of each inhalation (the rising half-cycle)
            const double u = std::fmod(t, period_s) / period_s;
            if (u >= 0.08 && u < 0.5) {
                const double burst = 0.5 * (1.0 - std::cos(kTau * (u - 0.08) / 0.42));
                v += 0.5 * burst * std::sin(kTau * wheeze_hz * t + tone_phase);
            }
        }
        sig[static_cast<size_t>(i)] = static_cast<float>(v);
        peak = std::max(peak, std::abs(v));
    }
    if (peak > 0.0) {
        const float scale = static_cast<float>(0.9 / peak);
        for (float& v : sig) v *= scale;
    }
    dsp::WaveForm w;
    w.samples = std::move(sig);
    w.sample_rate = cfg.sample_rate;
    w.channels = 1;
    return w;
}

}  // namespace

Manifest synth_corpus(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create directory " + out_dir + ": " + ec.message());

    Manifest m;
    char name[64];
    uint64_t clip_index = 0;
    for (int s = 0; s < cfg.n_subjects; ++s) {
        const SubjectTimbre timbre = subject_timbre(cfg, s);
        for (int c = 0; c < cfg.clips_per_subject; ++c, ++clip_index) {
            Rng rng(Rng::mix(cfg.seed, clip_index));
            const double rate = rng.uniform(cfg.rate_min, cfg.rate_max);
            const bool wheeze = rng.uniform() < cfg.wheeze_probability;
            dsp::WaveForm w = synth_clip(cfg, timbre, rate, wheeze, rng);

            std::snprintf(name, sizeof(name), "s%03d_c%03d.wav", s, c);
            dsp::write_wav_pcm16(out_dir + "/" + name, w);

            ClipRecord r;
            r.id = std::string(name, std::strlen(name) - 4);
            r.path = name;  // relative: the manifest lives beside the audio
            std::snprintf(name, sizeof(name), "s%03d", s);
            r.subject_id = name;
            r.source = "synth";
            r.modality = "breath";
            r.duration_s = cfg.duration_s;
            r.labels["rate"] = LabelValue::number(rate);
            r.labels["wheeze"] = LabelValue::number(wheeze ? 1.0 : 0.0);
            m.records.push_back(std::move(r));
        }
    }

    // corpus-level log-mel statistics, computed once at curation time
    dsp::DspConfig dcfg;
    double sum = 0.0, sumsq = 0.0;
    int64_t count = 0;
    for (const ClipRecord& r : m.records) {
        dsp::WaveForm w = dsp::read_wav(out_dir + "/" + r.path);
        dsp::Spectrogram spec = dsp::log_mel(dsp::resample(w, dcfg.target_rate), dcfg);
        for (float v : spec.values) {
            sum += v;
            sumsq += static_cast<double>(v) * v;
        }
        count += static_cast<int64_t>(spec.values.size());
    }
    m.norm_mean = sum / static_cast<double>(count);
    m.norm_std = std::sqrt(std::max(1e-12, sumsq / static_cast<double>(count) -
                                                m.norm_mean * m.norm_mean));
    m.provenance = "synth-corpus seed=" + std::to_string(cfg.seed) +
                   " subjects=" + std::to_string(cfg.n_subjects) +
                   " clips_per_subject=" + std::to_string(cfg.clips_per_subject);

    write_manifest(m, out_dir + "/manifest.jsonl");
    for (ClipRecord& r : m.records) r.path = out_dir + "/" + r.path;
    return m;
}

}  // namespace opera::data

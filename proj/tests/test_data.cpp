#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "opera/data.hpp"
#include "opera/wav.hpp"

using namespace opera;
using namespace opera::data;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& stem) {
    const std::string dir = "/tmp/opera_data_" + stem;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void touch_wav(const std::string& path) {
    dsp::WaveForm w;
    w.sample_rate = 16000;
    w.channels = 1;
    w.samples.assign(1600, 0.1f);
    dsp::write_wav_pcm16(path, w);
}

ClipRecord rec(const std::string& id, const std::string& path, const std::string& subject,
               const std::string& source = "synth", const std::string& modality = "breath") {
    ClipRecord r;
    r.id = id;
    r.path = path;
    r.subject_id = subject;
    r.source = source;
    r.modality = modality;
    r.duration_s = 0.1;
    return r;
}

// manifest with n_clips fabricated records (no files; for planning-only tests)
Manifest fake_manifest(int n_clips, const std::string& source, const std::string& modality,
                       int subjects = 10) {
    Manifest m;
    for (int i = 0; i < n_clips; ++i) {
        ClipRecord r = rec(source + "_" + std::to_string(i), "unused.wav",
                           "s" + std::to_string(i % subjects), source, modality);
        m.records.push_back(std::move(r));
    }
    return m;
}

// moving-RMS envelope of a waveform, 10 ms hop / 50 ms window
std::vector<double> rms_envelope(const std::vector<float>& x, int sample_rate) {
    const int64_t win = sample_rate / 20, hop = sample_rate / 100;
    std::vector<double> env;
    for (int64_t start = 0; start + win <= static_cast<int64_t>(x.size()); start += hop) {
        double acc = 0.0;
        for (int64_t i = start; i < start + win; ++i)
            acc += static_cast<double>(x[static_cast<size_t>(i)]) * x[static_cast<size_t>(i)];
        env.push_back(std::sqrt(acc / static_cast<double>(win)));
    }
    return env;
}

// lag (seconds) of the autocorrelation peak within [lo, hi] seconds
double autocorr_peak_lag(const std::vector<double>& env, double hop_s, double lo, double hi) {
    double mean = 0.0;
    for (double v : env) mean += v;
    mean /= static_cast<double>(env.size());
    const auto lag_lo = static_cast<int64_t>(lo / hop_s), lag_hi = static_cast<int64_t>(hi / hop_s);
    double best = -1e300;
    int64_t best_lag = lag_lo;
    for (int64_t lag = lag_lo; lag <= lag_hi; ++lag) {
        double acc = 0.0;
        int64_t n = 0;
        for (size_t i = 0; i + static_cast<size_t>(lag) < env.size(); ++i, ++n)
            acc += (env[i] - mean) * (env[i + static_cast<size_t>(lag)] - mean);
        acc /= static_cast<double>(n);
        if (acc > best) {
            best = acc;
            best_lag = lag;
        }
    }
    return static_cast<double>(best_lag) * hop_s;
}

std::string slurp(const std::string& path) { return read_file(path); }

}  // namespace

TEST_CASE("manifest: write/load round-trip preserves everything") {
    const std::string dir = fresh_dir("roundtrip");
    touch_wav(dir + "/a.wav");
    touch_wav(dir + "/b.wav");

    Manifest m;
    m.norm_mean = -3.25;
    m.norm_std = 2.5;
    m.provenance = "unit fixture";
    ClipRecord a = rec("a", dir + "/a.wav", "s1");
    a.labels["rate"] = LabelValue::number(15.5);
    a.labels["severity"] = LabelValue::category("mild");
    a.duration_s = 4.0;
    a.split = "train";
    ClipRecord b = rec("b", dir + "/b.wav", "s2", "icbhi", "lung");
    b.labels["wheeze"] = LabelValue::number(0.0);
    m.records = {a, b};

    write_manifest(m, dir + "/manifest.jsonl");
    Manifest back = load_manifest(dir + "/manifest.jsonl");
    CHECK(back.norm_mean == m.norm_mean);
    CHECK(back.norm_std == m.norm_std);
    CHECK(back.provenance == m.provenance);
    REQUIRE(back.records.size() == 2);
    CHECK(back.records[0] == a);
    CHECK(back.records[1] == b);
    CHECK(back.by_id("b").modality == "lung");
    CHECK_THROWS_AS(back.by_id("zzz"), IndexError);

    // relative paths resolve against the manifest directory
    Manifest rel = m;
    rel.records[0].path = "a.wav";
    rel.records[1].path = "b.wav";
    write_manifest(rel, dir + "/rel.jsonl");
    Manifest rback = load_manifest(dir + "/rel.jsonl");
    CHECK(rback.records[0].path == dir + "/a.wav");
}

TEST_CASE("manifest: load errors carry line numbers") {
    const std::string dir = fresh_dir("errors");
    touch_wav(dir + "/a.wav");
    const std::string header =
        R"({"norm_mean":0.0,"norm_std":1.0,"provenance":"","type":"manifest"})";
    const std::string good =
        R"({"duration_s":1.0,"id":"a","labels":{},"modality":"breath","path":"a.wav","source":"x","subject_id":"s1"})";

    auto expect_message = [&](const std::string& content, const std::string& needle) {
        write_file(dir + "/m.jsonl", content);
        try {
            load_manifest(dir + "/m.jsonl");
            FAIL("expected a load error for: " << needle);
        } catch (const Error& e) {
            CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos,
                          "message was: " << e.what());
        }
    };

    // duplicate id on line 3
    expect_message(header + "\n" + good + "\n" + good + "\n", "line 3");
    expect_message(header + "\n" + good + "\n" + good + "\n", "duplicate clip id 'a'");
    // malformed JSON on line 2
    expect_message(header + "\n{oops\n", "line 2");
    // missing audio file cites path and line
    const std::string missing =
        R"({"duration_s":1.0,"id":"q","labels":{},"modality":"breath","path":"gone.wav","source":"x","subject_id":"s1"})";
    expect_message(header + "\n" + missing + "\n", "audio file not found");
    expect_message(header + "\n" + missing + "\n", "gone.wav");
    // unknown key and unknown modality
    const std::string extra =
        R"({"bogus":1,"duration_s":1.0,"id":"e","labels":{},"modality":"breath","path":"a.wav","source":"x","subject_id":"s1"})";
    expect_message(header + "\n" + extra + "\n", "unknown record key 'bogus'");
    const std::string badmod =
        R"({"duration_s":1.0,"id":"e","labels":{},"modality":"humming","path":"a.wav","source":"x","subject_id":"s1"})";
    expect_message(header + "\n" + badmod + "\n", "unknown modality");
    // bad header
    expect_message("{\"type\":\"other\"}\n", "line 1");
    expect_message(R"({"norm_std":0.0,"type":"manifest"})" "\n", "std > 0");

    // empty file loads as an empty manifest
    write_file(dir + "/empty.jsonl", "");
    Manifest empty = load_manifest(dir + "/empty.jsonl");
    CHECK(empty.records.empty());
}

TEST_CASE("batch planning: counts, homogeneity, seeded shuffle") {
    // 1005 clips of one source at batch 10: 100 batches, 5 dropped
    Manifest m = fake_manifest(1005, "covidA", "cough");
    CropTable crops;
    crops.set("covidA", "cough", 64);
    std::vector<std::vector<size_t>> plan = plan_pretrain_batches(m, 10, crops, 1);
    CHECK(plan.size() == 100);
    std::set<size_t> used;
    for (const auto& batch : plan) {
        CHECK(batch.size() == 10);
        for (size_t idx : batch) CHECK(used.insert(idx).second);  // no clip reused
    }
    CHECK(used.size() == 1000);

    // mixed manifest: batches stay single-(source, modality)
    Manifest mixed = fake_manifest(25, "covidA", "cough");
    Manifest other = fake_manifest(17, "icbhi", "lung");
    for (ClipRecord& r : other.records) mixed.records.push_back(r);
    crops.set("icbhi", "lung", 32);
    std::vector<std::vector<size_t>> mp = plan_pretrain_batches(mixed, 5, crops, 2);
    CHECK(mp.size() == 5 + 3);
    for (const auto& batch : mp) {
        const ClipRecord& first = mixed.records[batch[0]];
        for (size_t idx : batch) {
            CHECK(mixed.records[idx].source == first.source);
            CHECK(mixed.records[idx].modality == first.modality);
        }
    }

    // missing crop entry fails before any work
    CropTable incomplete;
    incomplete.set("covidA", "cough", 64);
    CHECK_THROWS_AS(plan_pretrain_batches(mixed, 5, incomplete, 2), ConfigError);
    CHECK_THROWS_AS(plan_pretrain_batches(m, 0, crops, 2), ConfigError);

    // deterministic per seed
    std::vector<std::vector<size_t>> p1 = plan_pretrain_batches(mixed, 5, crops, 7);
    std::vector<std::vector<size_t>> p2 = plan_pretrain_batches(mixed, 5, crops, 7);
    std::vector<std::vector<size_t>> p3 = plan_pretrain_batches(mixed, 5, crops, 8);
    CHECK(p1 == p2);
    CHECK(p1 != p3);
}

TEST_CASE("participant-independent split: subjects never straddle partitions") {
    // 10 subjects x 3 clips
    Manifest m;
    for (int s = 0; s < 10; ++s)
        for (int c = 0; c < 3; ++c)
            m.records.push_back(
                rec("s" + std::to_string(s) + "c" + std::to_string(c), "u.wav",
                    "subj" + std::to_string(s)));

    SplitPlan plan = split_participant_independent(m, {0.6, 0.2, 0.2}, 4);
    CHECK(plan.train_ids.size() == 18);  // 6 subjects
    CHECK(plan.val_ids.size() == 6);
    CHECK(plan.test_ids.size() == 6);

    auto subjects_of = [&](const std::vector<std::string>& ids) {
        std::set<std::string> subs;
        for (const std::string& id : ids) subs.insert(m.by_id(id).subject_id);
        return subs;
    };
    std::set<std::string> tr = subjects_of(plan.train_ids), va = subjects_of(plan.val_ids),
                          te = subjects_of(plan.test_ids);
    for (const std::string& s : tr) {
        CHECK_FALSE(va.count(s));
        CHECK_FALSE(te.count(s));
    }
    for (const std::string& s : va) CHECK_FALSE(te.count(s));
    CHECK(tr.size() + va.size() + te.size() == 10);

    // every clip lands somewhere, exactly once
    std::set<std::string> all;
    for (const auto* ids : {&plan.train_ids, &plan.val_ids, &plan.test_ids})
        for (const std::string& id : *ids) CHECK(all.insert(id).second);
    CHECK(all.size() == 30);

    // determinism and seed sensitivity
    SplitPlan p2 = split_participant_independent(m, {0.6, 0.2, 0.2}, 4);
    CHECK(p2.train_ids == plan.train_ids);
    CHECK(p2.test_ids == plan.test_ids);
    bool moved = false;
    for (uint64_t seed = 5; seed < 10 && !moved; ++seed)
        moved = split_participant_independent(m, {0.6, 0.2, 0.2}, seed).train_ids !=
                plan.train_ids;
    CHECK(moved);

    CHECK_THROWS_AS(split_participant_independent(m, {0.5, 0.2}, 1), ConfigError);
    CHECK_THROWS_AS(split_participant_independent(m, {0.5, 0.2, 0.2}, 1), ConfigError);

    // two subjects cannot fill three non-empty partitions
    Manifest two;
    two.records.push_back(rec("a", "u.wav", "s1"));
    two.records.push_back(rec("b", "u.wav", "s2"));
    CHECK_THROWS_AS(split_participant_independent(two, {0.4, 0.3, 0.3}, 1), InvalidInputError);
    SplitPlan tv = split_participant_independent(two, {0.5, 0.0, 0.5}, 1);
    CHECK(tv.train_ids.size() == 1);
    CHECK(tv.val_ids.empty());
    CHECK(tv.test_ids.size() == 1);
}

TEST_CASE("loso: one fold per subject, test folds tile the corpus") {
    Manifest m;
    for (int s = 0; s < 16; ++s)
        for (int c = 0; c < 2; ++c)
            m.records.push_back(rec("s" + std::to_string(s) + "c" + std::to_string(c), "u.wav",
                                    "subj" + std::to_string(s)));

    std::vector<SplitPlan> folds = loso_splits(m);
    CHECK(folds.size() == 16);
    std::set<std::string> seen;
    for (const SplitPlan& f : folds) {
        CHECK(f.test_ids.size() == 2);
        CHECK(f.train_ids.size() == 30);
        std::set<std::string> test_subjects;
        for (const std::string& id : f.test_ids) {
            test_subjects.insert(m.by_id(id).subject_id);
            CHECK(seen.insert(id).second);  // folds are pairwise disjoint
        }
        CHECK(test_subjects.size() == 1);
        // held-out subject absent from training
        for (const std::string& id : f.train_ids)
            CHECK(m.by_id(id).subject_id != *test_subjects.begin());
    }
    CHECK(seen.size() == m.records.size());

    Manifest solo;
    solo.records.push_back(rec("a", "u.wav", "only"));
    CHECK_THROWS_AS(loso_splits(solo), InvalidInputError);
}

TEST_CASE("synthetic corpus: labels, determinism, manifest round-trip") {
    SynthConfig cfg;
    cfg.n_subjects = 3;
    cfg.clips_per_subject = 2;
    cfg.duration_s = 2.0;
    cfg.seed = 9;

    const std::string d1 = fresh_dir("synth1");
    const std::string d2 = fresh_dir("synth2");
    Manifest m1 = synth_corpus(cfg, d1);
    Manifest m2 = synth_corpus(cfg, d2);

    CHECK(m1.records.size() == 6);
    CHECK(m1.norm_std > 0.0);
    for (const ClipRecord& r : m1.records) {
        CHECK(fs::exists(r.path));
        const double rate = r.labels.at("rate").num;
        CHECK(rate >= cfg.rate_min);
        CHECK(rate <= cfg.rate_max);
        const double wheeze = r.labels.at("wheeze").num;
        CHECK((wheeze == 0.0 || wheeze == 1.0));
        CHECK(r.modality == "breath");
        dsp::WaveForm w = dsp::read_wav(r.path);
        CHECK(w.sample_rate == 16000);
        CHECK(w.channels == 1);
        CHECK(w.frames() == 32000);
    }

    // same seed, different directory: byte-identical audio and manifest
    for (size_t i = 0; i < m1.records.size(); ++i) {
        const std::string rel = fs::path(m1.records[i].path).filename().string();
        CHECK(slurp(d1 + "/" + rel) == slurp(d2 + "/" + rel));
    }
    CHECK(slurp(d1 + "/manifest.jsonl") == slurp(d2 + "/manifest.jsonl"));

    // a different seed changes the audio
    SynthConfig other = cfg;
    other.seed = 10;
    const std::string d3 = fresh_dir("synth3");
    synth_corpus(other, d3);
    CHECK(slurp(d1 + "/s000_c000.wav") != slurp(d3 + "/s000_c000.wav"));

    // the manifest on disk loads back to the returned one
    Manifest loaded = load_manifest(d1 + "/manifest.jsonl");
    CHECK(loaded.records.size() == m1.records.size());
    CHECK(loaded.norm_mean == m1.norm_mean);
    CHECK(loaded.norm_std == m1.norm_std);
    for (size_t i = 0; i < loaded.records.size(); ++i) {
        CHECK(loaded.records[i].id == m1.records[i].id);
        CHECK(loaded.records[i].labels == m1.records[i].labels);
    }

    SynthConfig bad = cfg;
    bad.rate_min = -1.0;
    CHECK_THROWS_AS(synth_corpus(bad, d1), ConfigError);
    bad = cfg;
    bad.wheeze_probability = 1.5;
    CHECK_THROWS_AS(synth_corpus(bad, d1), ConfigError);
}

TEST_CASE("synthetic corpus: breathing period shows up in the envelope") {
    // 20 s at exactly 15 breaths/min: the envelope repeats every 4 s
    SynthConfig cfg;
    cfg.n_subjects = 1;
    cfg.clips_per_subject = 1;
    cfg.duration_s = 20.0;
    cfg.rate_min = 15.0;
    cfg.rate_max = 15.0;
    cfg.wheeze_probability = 0.0;
    cfg.seed = 123;

    const std::string dir = fresh_dir("synth_env");
    Manifest m = synth_corpus(cfg, dir);
    REQUIRE(m.records.size() == 1);
    CHECK(m.records[0].labels.at("rate").num == doctest::Approx(15.0));

    dsp::WaveForm w = dsp::read_wav(m.records[0].path);
    std::vector<double> env = rms_envelope(w.samples, w.sample_rate);
    const double lag = autocorr_peak_lag(env, 0.01, 2.0, 6.0);
    CHECK(lag == doctest::Approx(4.0).epsilon(0.025));  // 4.0 s +- 0.1 s

    // the generator's own envelope peaks at the same lag
    std::vector<float> ideal = breath_envelope(15.0, 20.0, 16000);
    std::vector<double> ideal_env(ideal.size());
    for (size_t i = 0; i < ideal.size(); ++i) ideal_env[i] = ideal[i];
    std::vector<double> coarse;
    for (size_t i = 0; i < ideal_env.size(); i += 160) coarse.push_back(ideal_env[i]);
    CHECK(autocorr_peak_lag(coarse, 0.01, 2.0, 6.0) == doctest::Approx(4.0).epsilon(0.025));
}

TEST_CASE("pretrain batches from audio: standardized lengths, ids carried") {
    SynthConfig cfg;
    cfg.n_subjects = 4;
    cfg.clips_per_subject = 3;
    cfg.duration_s = 2.0;
    cfg.seed = 31;
    const std::string dir = fresh_dir("batches");
    Manifest m = synth_corpus(cfg, dir);

    dsp::DspConfig dcfg;
    CropTable crops;
    crops.set("synth", "breath", 48);
    std::vector<ssl::SpecBatch> batches = build_pretrain_batches(m, dcfg, 4, crops, 5);
    CHECK(batches.size() == 3);  // 12 clips / 4
    std::set<std::string> ids;
    for (const ssl::SpecBatch& b : batches) {
        CHECK(b.source == "synth");
        CHECK(b.modality == "breath");
        CHECK(b.crop_frames == 48);
        CHECK(b.specs.size() == 4);
        for (const dsp::Spectrogram& s : b.specs) {
            CHECK(s.n_frames == 48);  // 2 s gives 63 frames, cropped down
            CHECK(s.n_mels == 64);
            CHECK(ids.insert(s.source_id).second);
            for (float v : s.values) CHECK(std::isfinite(v));
        }
    }
    CHECK(ids.size() == 12);

    // short clips get repeat-padded up instead
    CropTable longcrops;
    longcrops.set("synth", "breath", 80);
    std::vector<ssl::SpecBatch> padded = build_pretrain_batches(m, dcfg, 4, longcrops, 5);
    for (const ssl::SpecBatch& b : padded)
        for (const dsp::Spectrogram& s : b.specs) CHECK(s.n_frames == 80);

    // normalization constants flow from the manifest: cell stats are near 0/1
    double sum = 0.0, sumsq = 0.0;
    int64_t count = 0;
    for (const ssl::SpecBatch& b : padded)
        for (const dsp::Spectrogram& s : b.specs)
            for (float v : s.values) {
                sum += v;
                sumsq += static_cast<double>(v) * v;
                ++count;
            }
    const double mean = sum / static_cast<double>(count);
    CHECK(std::abs(mean) < 0.35);
    CHECK(std::sqrt(sumsq / static_cast<double>(count)) < 2.0);
}

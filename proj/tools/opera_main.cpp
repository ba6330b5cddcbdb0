#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "opera/bench.hpp"
#include "opera/checkpoint.hpp"
#include "opera/data.hpp"
#include "opera/dsp.hpp"
#include "opera/models.hpp"
#include "opera/ssl.hpp"
#include "opera/wav.hpp"

namespace fs = std::filesystem;
using namespace opera;

namespace {

// ------------------------------------------------------------- config file

// sectioned key = value text; '#' starts a comment
struct FileConfig {
    std::map<std::string, std::map<std::string, std::string>> sections;

    const std::string* get(const std::string& section, const std::string& key) const {
        const auto s = sections.find(section);
        if (s == sections.end()) return nullptr;
        const auto k = s->second.find(key);
        return k == s->second.end() ? nullptr : &k->second;
    }
};

const std::map<std::string, std::set<std::string>>& config_schema() {
    static const std::map<std::string, std::set<std::string>> schema{
        {"global", {"seed", "threads", "out"}},
        {"synth",
         {"n_subjects", "clips_per_subject", "duration_s", "rate_min", "rate_max",
          "wheeze_probability", "band_center_hz", "band_spread_hz", "band_width_hz",
          "wheeze_center_hz", "wheeze_spread_hz", "sample_rate"}},
        {"encoder",
         {"kind", "embed_dim", "depth", "heads", "patch", "max_positions", "min_input_frames",
          "proj_dim", "decoder_depth", "decoder_heads"}},
        {"pretrain",
         {"method", "epochs", "batch_size", "lr", "crop_frames", "mask_ratio", "val_fraction",
          "hybrid_weight", "symmetric"}},
        {"probe", {"method", "runs", "split"}},
        {"finetune", {"epochs", "batch_size", "lr"}},
        {"benchmark", {"method", "runs"}},
    };
    return schema;
}

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

FileConfig parse_config_file(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError& e) {
        throw ConfigError(std::string("--config: ") + e.what());
    }
    FileConfig fc;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(path + ":" + std::to_string(lineno) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            if (!config_schema().count(section))
                throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown section [" +
                                  section + "]");
            fc.sections[section];
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        if (section.empty())
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": key appears before any [section]");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key or value");
        if (!config_schema().at(section).count(key))
            throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                              "' in section [" + section + "]");
        if (fc.sections[section].count(key))
            throw ConfigError(path + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                              "'");
        fc.sections[section][key] = value;
    }
    return fc;
}

int64_t to_i64(const std::string& v, const std::string& where) {
    size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty())
        throw ConfigError(where + ": '" + v + "' is not an integer");
    return out;
}

double to_f64(const std::string& v, const std::string& where) {
    size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty())
        throw ConfigError(where + ": '" + v + "' is not a number");
    return out;
}

bool to_bool(const std::string& v, const std::string& where) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(where + ": '" + v + "' is not a boolean");
}

// flags > file > defaults: the bound variable already holds flag-or-default,
// so a file value applies only when the flag was not given
template <typename T, typename F>
void merge(const CLI::Option* opt, const FileConfig& fc, const std::string& section,
           const std::string& key, T& slot, F&& convert) {
    if (opt != nullptr && opt->count() > 0) return;
    if (const std::string* v = fc.get(section, key)) slot = convert(*v, section + "." + key);
}

// ------------------------------------------------------------- shared bits

struct Common {
    std::string config_path;
    uint64_t seed = 0;
    int threads = 0;
    std::string out;
    CLI::Option* o_config = nullptr;
    CLI::Option* o_seed = nullptr;
    CLI::Option* o_threads = nullptr;
    CLI::Option* o_out = nullptr;

    void attach(CLI::App* sub) {
        o_config = sub->add_option("--config", config_path, "sectioned key=value config file");
        o_seed = sub->add_option("--seed", seed, "master random seed")->capture_default_str();
        o_threads = sub->add_option("--threads", threads, "worker thread cap (1 = serial)");
        o_out = sub->add_option("--out", out, "output path (default under OPERA_FORGE_OUT)");
    }

    FileConfig load_file() const {
        FileConfig fc;
        if (o_config->count() > 0) fc = parse_config_file(config_path);
        merge(o_seed, fc, "global", "seed", const_cast<uint64_t&>(seed),
              [](const std::string& v, const std::string& w) {
                  return static_cast<uint64_t>(to_i64(v, w));
              });
        merge(o_threads, fc, "global", "threads", const_cast<int&>(threads),
              [](const std::string& v, const std::string& w) {
                  return static_cast<int>(to_i64(v, w));
              });
        return fc;
    }

    std::string resolve_out(const FileConfig& fc, const std::string& default_name) const {
        if (o_out->count() > 0) return out;
        if (const std::string* v = fc.get("global", "out")) return *v;
        const char* env = std::getenv("OPERA_FORGE_OUT");
        return (fs::path(env != nullptr ? env : ".") / default_name).string();
    }
};

models::EncoderConfig encoder_from(const FileConfig& fc, const CLI::Option* o_kind,
                                   const std::string& kind_flag) {
    std::string text;
    const auto sec = fc.sections.find("encoder");
    if (sec != fc.sections.end())
        for (const auto& [k, v] : sec->second) text += k + " = " + v + "\n";
    models::EncoderConfig enc =
        text.empty() ? models::EncoderConfig{} : models::EncoderConfig::from_text(text);
    if (o_kind != nullptr && o_kind->count() > 0) enc.kind = kind_flag;
    enc.validate();
    return enc;
}

bench::TaskSpec make_task(const std::string& name) {
    if (name == "wheeze") return bench::TaskSpec::classification("wheeze", "wheeze");
    if (name == "rate") {
        bench::TaskSpec t = bench::TaskSpec::regression("rate", "rate");
        t.split = "loso";
        return t;
    }
    throw ConfigError("unknown task '" + name + "' (known: wheeze, rate)");
}

dsp::Spectrogram clip_spectrogram(const data::ClipRecord& rec, const dsp::DspConfig& dcfg) {
    dsp::WaveForm w = dsp::read_wav(rec.path);
    w = dsp::mix_mono(w);
    w = dsp::resample(w, dcfg.target_rate);
    return dsp::log_mel(w, dcfg);
}

dsp::DspConfig dsp_for(const data::Manifest& m) {
    dsp::DspConfig dcfg;
    dcfg.norm_mean = m.norm_mean;
    dcfg.norm_std = m.norm_std;
    return dcfg;
}

std::map<std::string, std::string> checkpoint_meta(const models::EncoderConfig& enc,
                                                   const std::string& method) {
    return {{"encoder", enc.to_text()}, {"method", method}};
}

models::EncoderConfig encoder_from_meta(const std::map<std::string, std::string>& meta,
                                        const std::string& path) {
    const auto it = meta.find("encoder");
    if (it == meta.end())
        throw IoError("checkpoint '" + path + "' carries no encoder configuration");
    return models::EncoderConfig::from_text(it->second);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"opera: self-supervised respiratory-audio workbench"};
    app.require_subcommand(1);

    // synth
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic corpus + manifest");
    Common synth_c;
    synth_c.attach(synth);
    int synth_subjects = 20, synth_clips = 10;
    double synth_duration = 10.0;
    CLI::Option* o_subjects =
        synth->add_option("--subjects", synth_subjects, "number of subjects")->capture_default_str();
    CLI::Option* o_clips = synth->add_option("--clips", synth_clips, "clips per subject")
                               ->capture_default_str();
    CLI::Option* o_duration =
        synth->add_option("--duration", synth_duration, "clip length in seconds")
            ->capture_default_str();

    // preprocess
    CLI::App* preprocess =
        app.add_subcommand("preprocess", "render every manifest clip to a spectrogram cache");
    Common pre_c;
    pre_c.attach(preprocess);
    std::string pre_manifest;
    preprocess->add_option("--manifest", pre_manifest, "corpus manifest")->required();

    // pretrain
    CLI::App* pretrain = app.add_subcommand("pretrain", "self-supervised encoder pretraining");
    Common pt_c;
    pt_c.attach(pretrain);
    std::string pt_manifest, pt_method = "contrastive", pt_encoder = "vit";
    int pt_epochs = 30, pt_batch = 16;
    pretrain->add_option("--manifest", pt_manifest, "corpus manifest")->required();
    CLI::Option* o_pt_method =
        pretrain->add_option("--method", pt_method, "contrastive | generative | hybrid")
            ->capture_default_str();
    CLI::Option* o_pt_epochs =
        pretrain->add_option("--epochs", pt_epochs, "training epochs")->capture_default_str();
    CLI::Option* o_pt_batch = pretrain->add_option("--batch-size", pt_batch, "clips per batch")
                                  ->capture_default_str();
    CLI::Option* o_pt_encoder =
        pretrain->add_option("--encoder", pt_encoder, "encoder kind: vit | cnn")
            ->capture_default_str();

    // extract
    CLI::App* extract = app.add_subcommand("extract", "embed every clip with a frozen encoder");
    Common ex_c;
    ex_c.attach(extract);
    std::string ex_checkpoint, ex_manifest, ex_pad = "repeat";
    extract->add_option("--checkpoint", ex_checkpoint, "encoder checkpoint")->required();
    extract->add_option("--manifest", ex_manifest, "corpus manifest")->required();
    extract->add_option("--pad", ex_pad, "short-clip padding: repeat | zero")
        ->capture_default_str();

    // probe
    CLI::App* probe = app.add_subcommand("probe", "train and score a linear probe on features");
    Common pr_c;
    pr_c.attach(probe);
    std::string pr_features, pr_manifest, pr_task, pr_split, pr_method = "opera";
    int pr_runs = 5;
    probe->add_option("--features", pr_features, "feature archive from extract")->required();
    probe->add_option("--manifest", pr_manifest, "corpus manifest")->required();
    probe->add_option("--task", pr_task, "task name: wheeze | rate")->required();
    CLI::Option* o_pr_split = probe->add_option(
        "--split", pr_split, "override split: official | participant_independent | loso");
    CLI::Option* o_pr_runs =
        probe->add_option("--runs", pr_runs, "independent runs on fixed splits")
            ->capture_default_str();
    CLI::Option* o_pr_method =
        probe->add_option("--method", pr_method, "method label for the report")
            ->capture_default_str();

    // finetune
    CLI::App* finetune_cmd =
        app.add_subcommand("finetune", "jointly train encoder + head on a labeled task");
    Common ft_c;
    ft_c.attach(finetune_cmd);
    std::string ft_checkpoint, ft_manifest, ft_task;
    int ft_epochs = 4, ft_batch = 8;
    double ft_lr = 1e-4;
    std::vector<std::string> ft_freeze;
    finetune_cmd->add_option("--checkpoint", ft_checkpoint, "encoder checkpoint")->required();
    finetune_cmd->add_option("--manifest", ft_manifest, "corpus manifest")->required();
    finetune_cmd->add_option("--task", ft_task, "task name: wheeze | rate")->required();
    CLI::Option* o_ft_epochs =
        finetune_cmd->add_option("--epochs", ft_epochs, "training epochs")->capture_default_str();
    CLI::Option* o_ft_batch =
        finetune_cmd->add_option("--batch-size", ft_batch, "clips per batch")
            ->capture_default_str();
    finetune_cmd->add_option("--freeze", ft_freeze,
                             "parameter-name prefix to freeze (repeatable)");

    // benchmark
    CLI::App* benchmark =
        app.add_subcommand("benchmark", "run the downstream task suite on a checkpoint");
    Common bm_c;
    bm_c.attach(benchmark);
    std::string bm_checkpoint, bm_manifest, bm_method = "opera";
    int bm_runs = 5;
    benchmark->add_option("--checkpoint", bm_checkpoint, "encoder checkpoint")->required();
    benchmark->add_option("--manifest", bm_manifest, "corpus manifest")->required();
    CLI::Option* o_bm_method =
        benchmark->add_option("--method", bm_method, "method label for the report")
            ->capture_default_str();
    CLI::Option* o_bm_runs =
        benchmark->add_option("--runs", bm_runs, "independent runs on fixed splits")
            ->capture_default_str();

    // mrr-fixture
    CLI::App* mrr = app.add_subcommand(
        "mrr-fixture", "recompute mean reciprocal ranks from the published results table");
    Common mrr_c;
    mrr_c.attach(mrr);
    std::string mrr_path = "fixtures/paper_tables.csv";
    mrr->add_option("--fixture", mrr_path, "per-task results table (csv)")
        ->capture_default_str();

    // saliency
    CLI::App* saliency_cmd =
        app.add_subcommand("saliency", "input-gradient map of one clip through the encoder");
    Common sal_c;
    sal_c.attach(saliency_cmd);
    std::string sal_checkpoint, sal_clip, sal_manifest;
    saliency_cmd->add_option("--checkpoint", sal_checkpoint, "encoder checkpoint")->required();
    saliency_cmd->add_option("--clip", sal_clip, "input wav file")->required();
    saliency_cmd->add_option("--manifest", sal_manifest,
                             "manifest supplying normalization constants");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(synth)) {
            const FileConfig fc = synth_c.load_file();
            data::SynthConfig sc;
            merge(o_subjects, fc, "synth", "n_subjects", sc.n_subjects,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            if (o_subjects->count() > 0) sc.n_subjects = synth_subjects;
            merge(o_clips, fc, "synth", "clips_per_subject", sc.clips_per_subject,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            if (o_clips->count() > 0) sc.clips_per_subject = synth_clips;
            merge(o_duration, fc, "synth", "duration_s", sc.duration_s, to_f64);
            if (o_duration->count() > 0) sc.duration_s = synth_duration;
            merge(nullptr, fc, "synth", "rate_min", sc.rate_min, to_f64);
            merge(nullptr, fc, "synth", "rate_max", sc.rate_max, to_f64);
            merge(nullptr, fc, "synth", "wheeze_probability", sc.wheeze_probability, to_f64);
            merge(nullptr, fc, "synth", "band_center_hz", sc.band_center_hz, to_f64);
            merge(nullptr, fc, "synth", "band_spread_hz", sc.band_spread_hz, to_f64);
            merge(nullptr, fc, "synth", "band_width_hz", sc.band_width_hz, to_f64);
            merge(nullptr, fc, "synth", "wheeze_center_hz", sc.wheeze_center_hz, to_f64);
            merge(nullptr, fc, "synth", "wheeze_spread_hz", sc.wheeze_spread_hz, to_f64);
            merge(nullptr, fc, "synth", "sample_rate", sc.sample_rate,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            sc.seed = synth_c.seed;
            if (synth_c.threads > 0) set_thread_budget(synth_c.threads);
            const std::string out = synth_c.resolve_out(fc, "corpus");
            const data::Manifest m = data::synth_corpus(sc, out);
            std::cout << "wrote " << m.records.size() << " clips under " << out << "\n";
            std::cout << (fs::path(out) / "manifest.jsonl").string() << "\n";
            return 0;
        }

        if (app.got_subcommand(preprocess)) {
            const FileConfig fc = pre_c.load_file();
            if (pre_c.threads > 0) set_thread_budget(pre_c.threads);
            const data::Manifest m = data::load_manifest(pre_manifest);
            const dsp::DspConfig dcfg = dsp_for(m);
            const std::string out = pre_c.resolve_out(fc, "spectrograms");
            fs::create_directories(out);
            for (const data::ClipRecord& rec : m.records) {
                const dsp::Spectrogram spec = clip_spectrogram(rec, dcfg);
                dsp::save_spectrogram((fs::path(out) / (rec.id + ".opsg")).string(), spec);
            }
            std::cout << "cached " << m.records.size() << " spectrograms under " << out << "\n";
            return 0;
        }

        if (app.got_subcommand(pretrain)) {
            const FileConfig fc = pt_c.load_file();
            if (pt_c.threads > 0) set_thread_budget(pt_c.threads);
            const data::Manifest m = data::load_manifest(pt_manifest);

            const models::EncoderConfig enc = encoder_from(fc, o_pt_encoder, pt_encoder);
            ssl::PretrainConfig pc;
            pc.method = pt_method;
            merge(o_pt_method, fc, "pretrain", "method", pc.method,
                  [](const std::string& v, const std::string&) { return v; });
            pc.epochs = pt_epochs;
            merge(o_pt_epochs, fc, "pretrain", "epochs", pc.epochs,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            pc.batch_size = pt_batch;
            merge(o_pt_batch, fc, "pretrain", "batch_size", pc.batch_size,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            merge(nullptr, fc, "pretrain", "lr", pc.lr, to_f64);
            merge(nullptr, fc, "pretrain", "crop_frames", pc.crop_frames,
                  [](const std::string& v, const std::string& w) { return to_i64(v, w); });
            merge(nullptr, fc, "pretrain", "mask_ratio", pc.mask_ratio, to_f64);
            merge(nullptr, fc, "pretrain", "val_fraction", pc.val_fraction, to_f64);
            merge(nullptr, fc, "pretrain", "hybrid_weight", pc.hybrid_weight, to_f64);
            merge(nullptr, fc, "pretrain", "symmetric", pc.symmetric, to_bool);
            pc.seed = pt_c.seed;
            pc.validate();

            data::CropTable crops;
            std::set<std::pair<std::string, std::string>> groups;
            for (const data::ClipRecord& rec : m.records)
                groups.insert({rec.source, rec.modality});
            for (const auto& [source, modality] : groups)
                crops.set(source, modality, 2 * pc.crop_frames);

            const std::vector<ssl::SpecBatch> batches = data::build_pretrain_batches(
                m, dsp::DspConfig{}, pc.batch_size, crops, pc.seed);
            ad::ParamStore<float> ps;
            Rng init(Rng::mix(pc.seed, 11));
            ssl::init_pretrain_params(ps, enc, pc, init);
            const ssl::TrainHistory hist = ssl::pretrain(batches, enc, pc, ps);

            const std::string out = pt_c.resolve_out(fc, "pretrain");
            fs::create_directories(out);
            const std::string ck = (fs::path(out) / "encoder.opck").string();
            ad::save_checkpoint(ck, ps, checkpoint_meta(enc, pc.method));
            write_file((fs::path(out) / "history.csv").string(), hist.to_csv());
            std::cout << "best epoch " << hist.best_epoch << " val loss " << hist.best_val_loss
                      << " after " << hist.update_count << " updates\n"
                      << ck << "\n";
            return 0;
        }

        if (app.got_subcommand(extract)) {
            const FileConfig fc = ex_c.load_file();
            if (ex_c.threads > 0) set_thread_budget(ex_c.threads);
            if (ex_pad != "repeat" && ex_pad != "zero")
                throw ConfigError("--pad must be repeat or zero");
            const data::Manifest m = data::load_manifest(ex_manifest);
            std::map<std::string, std::string> meta;
            ad::ParamStore<float> ps = ad::load_checkpoint(ex_checkpoint, &meta);
            const models::EncoderConfig enc = encoder_from_meta(meta, ex_checkpoint);
            std::vector<std::string> ids;
            for (const data::ClipRecord& rec : m.records) ids.push_back(rec.id);
            const bench::FeatureMatrix feats = bench::extract_features(
                ps, enc, m, ids, dsp::DspConfig{},
                ex_pad == "zero" ? dsp::PadPolicy::zero : dsp::PadPolicy::repeat);
            const std::string out = ex_c.resolve_out(fc, "features.opft");
            if (!fs::path(out).parent_path().empty())
                fs::create_directories(fs::path(out).parent_path());
            bench::save_features(out, feats);
            std::cout << feats.n() << " x " << feats.dim() << " features\n" << out << "\n";
            return 0;
        }

        if (app.got_subcommand(probe)) {
            const FileConfig fc = pr_c.load_file();
            if (pr_c.threads > 0) set_thread_budget(pr_c.threads);
            const data::Manifest m = data::load_manifest(pr_manifest);
            const bench::FeatureMatrix feats = bench::load_features(pr_features);
            bench::TaskSpec task = make_task(pr_task);
            merge(o_pr_split, fc, "probe", "split", task.split,
                  [](const std::string& v, const std::string&) { return v; });
            if (o_pr_split->count() > 0) task.split = pr_split;
            task.n_runs = pr_runs;
            merge(o_pr_runs, fc, "probe", "runs", task.n_runs,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            merge(o_pr_method, fc, "probe", "method", pr_method,
                  [](const std::string& v, const std::string&) { return v; });
            const bench::ResultRecord rec =
                bench::run_task(m, feats, task, pr_method, pr_c.seed);
            const std::string csv = bench::results_to_csv({rec});
            std::cout << csv;
            if (pr_c.o_out->count() > 0 || fc.get("global", "out") != nullptr)
                write_file(pr_c.resolve_out(fc, "probe.csv"), csv);
            return 0;
        }

        if (app.got_subcommand(finetune_cmd)) {
            const FileConfig fc = ft_c.load_file();
            if (ft_c.threads > 0) set_thread_budget(ft_c.threads);
            const data::Manifest m = data::load_manifest(ft_manifest);
            std::map<std::string, std::string> meta;
            ad::ParamStore<float> ps = ad::load_checkpoint(ft_checkpoint, &meta);
            const models::EncoderConfig enc = encoder_from_meta(meta, ft_checkpoint);
            const bench::TaskSpec task = make_task(ft_task);

            bench::FinetuneConfig cfg;
            cfg.epochs = ft_epochs;
            merge(o_ft_epochs, fc, "finetune", "epochs", cfg.epochs,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            cfg.batch_size = ft_batch;
            merge(o_ft_batch, fc, "finetune", "batch_size", cfg.batch_size,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            cfg.lr = ft_lr;
            merge(nullptr, fc, "finetune", "lr", cfg.lr, to_f64);
            cfg.seed = ft_c.seed;
            cfg.freeze = ft_freeze;

            // same split stream as run_task so probe and finetune see one split
            data::Manifest fm;
            fm.norm_mean = m.norm_mean;
            fm.norm_std = m.norm_std;
            fm.provenance = m.provenance;
            std::map<std::string, double> label_of;
            for (const data::ClipRecord& rec : m.records) {
                const auto it = rec.labels.find(task.label_key);
                if (it == rec.labels.end()) continue;
                if (it->second.kind != data::LabelValue::Kind::number)
                    throw InvalidInputError("label '" + task.label_key + "' on clip '" + rec.id +
                                            "' must be numeric");
                fm.records.push_back(rec);
                label_of[rec.id] = it->second.num;
            }
            const data::SplitPlan plan = data::split_participant_independent(
                fm, {0.6, 0.2, 0.2}, Rng::mix(ft_c.seed, 40000));

            const dsp::DspConfig dcfg = dsp_for(m);
            std::vector<dsp::Spectrogram> train_specs;
            std::vector<double> train_y;
            for (const std::string& id : plan.train_ids) {
                train_specs.push_back(clip_spectrogram(m.by_id(id), dcfg));
                train_y.push_back(label_of.at(id));
            }
            bench::finetune(ps, enc, train_specs, train_y, task, cfg);

            const std::string out = ft_c.resolve_out(fc, "finetune");
            fs::create_directories(out);
            const std::string ck = (fs::path(out) / "encoder_ft.opck").string();
            ad::save_checkpoint(ck, ps, checkpoint_meta(enc, "finetune:" + ft_task));

            bench::ProbeModel head;
            head.kind = task.kind;
            head.n_classes = task.n_classes;
            head.w = ps.at("ft.w");
            head.b = ps.at("ft.b");
            const bench::FeatureMatrix test_feats = bench::extract_features(
                ps, enc, m, plan.test_ids, dsp::DspConfig{}, task.pad_policy);
            std::vector<double> test_y;
            for (const std::string& id : plan.test_ids) test_y.push_back(label_of.at(id));
            const double value = bench::evaluate_probe(head, test_feats.x, test_y, task);
            std::cout << task.task_id << "," << task.metric << "," << value << "\n" << ck << "\n";
            return 0;
        }

        if (app.got_subcommand(benchmark)) {
            const FileConfig fc = bm_c.load_file();
            if (bm_c.threads > 0) set_thread_budget(bm_c.threads);
            const data::Manifest m = data::load_manifest(bm_manifest);
            std::map<std::string, std::string> meta;
            ad::ParamStore<float> ps = ad::load_checkpoint(bm_checkpoint, &meta);
            const models::EncoderConfig enc = encoder_from_meta(meta, bm_checkpoint);

            merge(o_bm_method, fc, "benchmark", "method", bm_method,
                  [](const std::string& v, const std::string&) { return v; });
            merge(o_bm_runs, fc, "benchmark", "runs", bm_runs,
                  [](const std::string& v, const std::string& w) {
                      return static_cast<int>(to_i64(v, w));
                  });
            std::vector<bench::TaskSpec> tasks{make_task("wheeze"), make_task("rate")};
            for (bench::TaskSpec& t : tasks) t.n_runs = bm_runs;

            const std::string out = bm_c.resolve_out(fc, "benchmark");
            const std::vector<bench::ResultRecord> records = bench::run_benchmark(
                m, ps, enc, bm_method, tasks, dsp::DspConfig{}, bm_c.seed, out);
            std::cout << bench::results_to_csv(records);
            bool failed = false;
            for (const bench::ResultRecord& r : records)
                if (!r.error.empty()) {
                    failed = true;
                    std::cerr << r.task_id << " failed: " << r.error << "\n";
                }
            return failed ? 1 : 0;
        }

        if (app.got_subcommand(mrr)) {
            mrr_c.load_file();
            const bench::MrrReport report = bench::reproduce_mrr_fixture(mrr_path);
            std::cout << report.to_text();
            if (!report.ok()) {
                for (const std::string& m : report.mismatches) std::cerr << m << "\n";
                return 1;
            }
            return 0;
        }

        if (app.got_subcommand(saliency_cmd)) {
            const FileConfig fc = sal_c.load_file();
            if (sal_c.threads > 0) set_thread_budget(sal_c.threads);
            std::map<std::string, std::string> meta;
            ad::ParamStore<float> ps = ad::load_checkpoint(sal_checkpoint, &meta);
            const models::EncoderConfig enc = encoder_from_meta(meta, sal_checkpoint);

            dsp::DspConfig dcfg;
            if (!sal_manifest.empty()) {
                const data::Manifest m = data::load_manifest(sal_manifest);
                dcfg.norm_mean = m.norm_mean;
                dcfg.norm_std = m.norm_std;
            }
            dsp::WaveForm w = dsp::read_wav(sal_clip);
            w = dsp::mix_mono(w);
            w = dsp::resample(w, dcfg.target_rate);
            dsp::Spectrogram spec = dsp::log_mel(w, dcfg);
            int64_t target = std::max<int64_t>(spec.n_frames, enc.min_input_frames);
            if (enc.kind == "vit") target = (target + enc.patch - 1) / enc.patch * enc.patch;
            if (target > spec.n_frames) spec = dsp::pad(spec, target, dsp::PadPolicy::repeat);

            ad::Array<float> cells = ad::Array<float>::zeros({spec.n_frames, spec.n_mels});
            for (size_t i = 0; i < spec.values.size(); ++i) cells.v[i] = spec.values[i];
            const ad::Array<float> g = models::saliency(
                [&](ad::Tape<float>& tp, ad::Tensor<float> leaf) {
                    ad::Tensor<float> batched =
                        ad::reshape(leaf, {1, spec.n_frames, static_cast<int64_t>(spec.n_mels)});
                    return ad::mean_all(models::encode_batch(tp, ps, enc, batched));
                },
                cells);

            dsp::Spectrogram out_map = spec;
            for (size_t i = 0; i < out_map.values.size(); ++i) out_map.values[i] = g.v[i];
            out_map.source_id = "saliency:" + fs::path(sal_clip).filename().string();
            const std::string out = sal_c.resolve_out(fc, "saliency.opsg");
            if (!fs::path(out).parent_path().empty())
                fs::create_directories(fs::path(out).parent_path());
            dsp::save_spectrogram(out, out_map);
            std::cout << out << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

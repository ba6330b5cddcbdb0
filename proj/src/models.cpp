#include "opera/models.hpp"

#include <algorithm>
#include <sstream>

namespace opera::models {

void EncoderConfig::validate() const {
    if (kind != "vit" && kind != "cnn")
        throw ConfigError("encoder kind must be \"vit\" or \"cnn\", got \"" + kind + "\"");
    if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
    if (depth < 1) throw ConfigError("depth must be positive");
    if (heads < 1 || embed_dim % heads != 0)
        throw ConfigError("heads must be positive and divide embed_dim");
    if (patch < 1) throw ConfigError("patch must be positive");
    if (max_positions < 1) throw ConfigError("max_positions must be positive");
    if (min_input_frames < patch)
        throw ConfigError("min_input_frames must be at least one patch");
    if (proj_dim < 1) throw ConfigError("proj_dim must be positive");
    if (decoder_depth < 1) throw ConfigError("decoder_depth must be positive");
    if (decoder_heads < 1 || embed_dim % decoder_heads != 0)
        throw ConfigError("decoder_heads must be positive and divide embed_dim");
    if (kind == "cnn" && embed_dim % 4 != 0)
        throw ConfigError("cnn encoder needs embed_dim divisible by 4");
}

std::string EncoderConfig::to_text() const {
    std::ostringstream os;
    os << "kind=" << kind << '\n'
       << "embed_dim=" << embed_dim << '\n'
       << "depth=" << depth << '\n'
       << "heads=" << heads << '\n'
       << "patch=" << patch << '\n'
       << "max_positions=" << max_positions << '\n'
       << "min_input_frames=" << min_input_frames << '\n'
       << "proj_dim=" << proj_dim << '\n'
       << "decoder_depth=" << decoder_depth << '\n'
       << "decoder_heads=" << decoder_heads << '\n';
    return os.str();
}

EncoderConfig EncoderConfig::from_text(const std::string& text) {
    EncoderConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("encoder config line " + std::to_string(lineno) +
                              " is not key=value: \"" + line + "\"");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        auto as_int = [&](int& slot) {
            size_t used = 0;
            int parsed = 0;
            try {
                parsed = std::stoi(val, &used);
            } catch (const std::exception&) {
                throw ConfigError("encoder config key \"" + key + "\" has non-integer value \"" +
                                  val + "\"");
            }
            if (used != val.size())
                throw ConfigError("encoder config key \"" + key + "\" has non-integer value \"" +
                                  val + "\"");
            slot = parsed;
        };
        if (key == "kind") cfg.kind = val;
        else if (key == "embed_dim") as_int(cfg.embed_dim);
        else if (key == "depth") as_int(cfg.depth);
        else if (key == "heads") as_int(cfg.heads);
        else if (key == "patch") as_int(cfg.patch);
        else if (key == "max_positions") as_int(cfg.max_positions);
        else if (key == "min_input_frames") as_int(cfg.min_input_frames);
        else if (key == "proj_dim") as_int(cfg.proj_dim);
        else if (key == "decoder_depth") as_int(cfg.decoder_depth);
        else if (key == "decoder_heads") as_int(cfg.decoder_heads);
        else throw ConfigError("unknown encoder config key \"" + key + "\"");
    }
    cfg.validate();
    return cfg;
}

int64_t pad_to_multiple(int64_t frames, int patch) {
    if (frames < 1) throw InvalidInputError("frame count must be positive");
    if (patch < 1) throw ConfigError("patch must be positive");
    const int64_t rem = frames % patch;
    return rem == 0 ? frames : frames + (patch - rem);
}

PatchGrid patch_grid(int64_t padded_frames, int n_mels, int patch) {
    if (padded_frames % patch != 0)
        throw ContractError("frame count " + std::to_string(padded_frames) +
                            " is not a multiple of patch " + std::to_string(patch));
    if (n_mels % patch != 0)
        throw ConfigError("mel count " + std::to_string(n_mels) +
                          " is not a multiple of patch " + std::to_string(patch));
    PatchGrid g;
    g.rows = padded_frames / patch;
    g.cols = n_mels / patch;
    return g;
}

dsp::Spectrogram pad_to_patch(const dsp::Spectrogram& spec, int patch) {
    return dsp::pad(spec, pad_to_multiple(spec.n_frames, patch), dsp::PadPolicy::repeat);
}

MaskPlan sample_mask(int64_t n_tokens, double ratio, Rng& rng) {
    if (n_tokens < 1) throw InvalidInputError("mask needs at least one token");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ConfigError("mask ratio must lie strictly between 0 and 1");
    // round half up so 0.5 of 3 masks 2
    int64_t k = static_cast<int64_t>(std::floor(ratio * static_cast<double>(n_tokens) + 0.5));
    k = std::clamp<int64_t>(k, 1, n_tokens - 1);
    std::vector<int64_t> pool(static_cast<size_t>(n_tokens));
    for (size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int64_t>(i);
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + rng.uniform_int(n_tokens - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    MaskPlan plan;
    plan.n_tokens = n_tokens;
    plan.ratio = ratio;
    plan.masked.assign(pool.begin(), pool.begin() + static_cast<size_t>(k));
    std::sort(plan.masked.begin(), plan.masked.end());
    return plan;
}

std::vector<int64_t> visible_indices(const MaskPlan& plan) {
    std::vector<int64_t> vis;
    vis.reserve(static_cast<size_t>(plan.n_tokens - static_cast<int64_t>(plan.masked.size())));
    size_t m = 0;
    for (int64_t t = 0; t < plan.n_tokens; ++t) {
        if (m < plan.masked.size() && plan.masked[m] == t) {
            ++m;
        } else {
            vis.push_back(t);
        }
    }
    return vis;
}

}  // namespace opera::models

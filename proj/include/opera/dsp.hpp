#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "opera/common.hpp"

namespace opera::dsp {

// Raw audio clip; samples interleaved when channels > 1.
struct WaveForm {
    std::vector<float> samples;
    int sample_rate = 0;
    int channels = 1;

    int64_t frames() const {
        return channels > 0 ? static_cast<int64_t>(samples.size()) / channels : 0;
    }
    void validate() const;
};

struct DspConfig {
    int target_rate = 16000;
    int n_mels = 64;
    int window_ms = 64;
    int hop_ms = 32;
    double fmin = 0.0;
    double fmax = 8000.0;
    double log_offset = 1e-6;
    double norm_mean = 0.0;
    double norm_std = 1.0;

    int n_fft() const { return target_rate / 1000 * window_ms; }
    int hop() const { return target_rate / 1000 * hop_ms; }
    void validate() const;
    // normalized value a log-mel cell takes on digital silence
    float silence_value() const {
        return static_cast<float>((std::log(log_offset) - norm_mean) / norm_std);
    }
};

struct Spectrogram {
    std::vector<float> values;  // row-major n_frames x n_mels
    int64_t n_frames = 0;
    int n_mels = 0;
    std::string source_id;
    float silence_value = 0.0f;

    float at(int64_t frame, int mel) const {
        return values[static_cast<size_t>(frame * n_mels + mel)];
    }
};

struct MelFilterbank {
    std::vector<float> weights;  // row-major n_mels x n_bins
    int n_mels = 0;
    int n_bins = 0;  // n_fft/2 + 1
};

enum class PadPolicy { repeat, zero };

WaveForm resample(const WaveForm& wave, int target_rate, int taps = 32);
WaveForm mix_mono(const WaveForm& wave);

struct TrimResult {
    WaveForm wave;
    int64_t start = 0;  // [start, end) kept, in sample indices
    int64_t end = 0;
    bool empty() const { return end <= start; }
};
TrimResult trim_silence(const WaveForm& wave, double floor_db = 40.0);

MelFilterbank build_filterbank(const DspConfig& cfg);
Spectrogram log_mel(const WaveForm& wave, const DspConfig& cfg);

WaveForm pad(const WaveForm& wave, int64_t target_len, PadPolicy policy);
Spectrogram pad(const Spectrogram& spec, int64_t target_frames, PadPolicy policy);

Spectrogram random_crop(const Spectrogram& spec, int64_t len_frames, Rng& rng);
std::vector<Spectrogram> segment_frames(const Spectrogram& spec, int64_t frame_len, int64_t hop);

// binary cache: magic "OPSG", u32 version=1, u32 n_frames, u32 n_mels,
// then n_frames*n_mels little-endian f32 row-major
void save_spectrogram(const std::string& path, const Spectrogram& spec);
Spectrogram load_spectrogram(const std::string& path, float silence_value = 0.0f);

}  // namespace opera::dsp

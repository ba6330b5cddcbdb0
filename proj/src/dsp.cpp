#include "opera/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>

namespace opera::dsp {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

double sinc(double x) {
    if (std::abs(x) < 1e-12) return 1.0;
    return std::sin(kPi * x) / (kPi * x);
}

// modified Bessel I0 by power series
double bessel_i0(double x) {
    double sum = 1.0, term = 1.0;
    const double hx = 0.5 * x;
    for (int k = 1; k < 64; ++k) {
        term *= (hx / k) * (hx / k);
        sum += term;
        if (term < 1e-16 * sum) break;
    }
    return sum;
}

double kaiser(double r, double beta) {  // r in [-1, 1]
    const double t = 1.0 - r * r;
    if (t < 0.0) return 0.0;
    return bessel_i0(beta * std::sqrt(t)) / bessel_i0(beta);
}

int64_t reflect_index(int64_t i, int64_t n) {
    if (n == 1) return 0;
    const int64_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

void fft_pow2(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// power spectrum bins 0..n/2 of a real frame
void power_spectrum(const std::vector<double>& frame, std::vector<double>& out) {
    const size_t n = frame.size();
    const size_t nb = n / 2 + 1;
    out.resize(nb);
    if (is_pow2(n)) {
        std::vector<std::complex<double>> a(n);
        for (size_t i = 0; i < n; ++i) a[i] = {frame[i], 0.0};
        fft_pow2(a);
        for (size_t k = 0; k < nb; ++k) out[k] = std::norm(a[k]);
    } else {
        // direct transform fallback for non power-of-two windows
        for (size_t k = 0; k < nb; ++k) {
            double re = 0.0, im = 0.0;
            const double w = -2.0 * kPi * static_cast<double>(k) / static_cast<double>(n);
            for (size_t i = 0; i < n; ++i) {
                const double ph = w * static_cast<double>(i);
                re += frame[i] * std::cos(ph);
                im += frame[i] * std::sin(ph);
            }
            out[k] = re * re + im * im;
        }
    }
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

void WaveForm::validate() const {
    if (sample_rate <= 0) throw InvalidInputError("waveform sample_rate must be positive");
    if (channels < 1) throw InvalidInputError("waveform needs at least one channel");
    if (samples.size() % static_cast<size_t>(channels) != 0)
        throw InvalidInputError("waveform length not divisible by channel count");
    for (float s : samples)
        if (!std::isfinite(s)) throw InvalidInputError("waveform contains non-finite samples");
}

void DspConfig::validate() const {
    if (target_rate <= 0) throw ConfigError("target_rate must be positive");
    if (n_mels < 1) throw ConfigError("n_mels must be >= 1");
    if (window_ms < 1 || hop_ms < 1) throw ConfigError("window_ms and hop_ms must be >= 1");
    if (hop_ms > window_ms) throw ConfigError("hop_ms must not exceed window_ms");
    if (!(fmin >= 0.0) || !(fmin < fmax) || !(fmax <= target_rate / 2.0))
        throw ConfigError("need 0 <= fmin < fmax <= target_rate/2");
    if (!(log_offset > 0.0)) throw ConfigError("log_offset must be positive");
    if (!(norm_std > 0.0)) throw ConfigError("norm_std must be positive");
    if (target_rate % 1000 != 0)
        throw ConfigError("target_rate must be a whole number of kHz so window sizes are exact");
}

WaveForm resample(const WaveForm& wave, int target_rate, int taps) {
    wave.validate();
    if (target_rate <= 0) throw InvalidInputError("resample target_rate must be positive");
    if (taps < 4) throw ConfigError("resample taps must be >= 4");
    if (target_rate == wave.sample_rate) return wave;

    const int64_t in_frames = wave.frames();
    const int64_t out_frames = static_cast<int64_t>(
        std::llround(static_cast<double>(in_frames) * target_rate / wave.sample_rate));
    const double ratio = static_cast<double>(target_rate) / wave.sample_rate;
    const double scale = std::min(1.0, ratio);  // cutoff shrinks when downsampling
    const double half_width = static_cast<double>(taps) / scale;
    const double beta = 8.6;

    WaveForm out;
    out.sample_rate = target_rate;
    out.channels = wave.channels;
    out.samples.assign(static_cast<size_t>(out_frames * wave.channels), 0.0f);

    const int ch = wave.channels;
    parallel_for(out_frames, [&](int64_t n) {
        const double t = static_cast<double>(n) / ratio;
        const int64_t lo = static_cast<int64_t>(std::ceil(t - half_width));
        const int64_t hi = static_cast<int64_t>(std::floor(t + half_width));
        for (int c = 0; c < ch; ++c) {
            double acc = 0.0;
            for (int64_t m = std::max<int64_t>(0, lo); m <= std::min(in_frames - 1, hi); ++m) {
                const double u = (t - static_cast<double>(m)) * scale;
                const double w = sinc(u) * kaiser(u / taps, beta);
                acc += static_cast<double>(wave.samples[static_cast<size_t>(m * ch + c)]) * w;
            }
            out.samples[static_cast<size_t>(n * ch + c)] = static_cast<float>(acc * scale);
        }
    });
    return out;
}

WaveForm mix_mono(const WaveForm& wave) {
    wave.validate();
    if (wave.channels == 1) return wave;
    WaveForm out;
    out.sample_rate = wave.sample_rate;
    out.channels = 1;
    const int64_t n = wave.frames();
    out.samples.resize(static_cast<size_t>(n));
    const int ch = wave.channels;
    for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int c = 0; c < ch; ++c) acc += wave.samples[static_cast<size_t>(i * ch + c)];
        out.samples[static_cast<size_t>(i)] = static_cast<float>(acc / ch);
    }
    return out;
}

TrimResult trim_silence(const WaveForm& wave, double floor_db) {
    wave.validate();
    if (wave.channels != 1) throw ContractError("trim_silence expects a mono waveform");
    const int64_t n = static_cast<int64_t>(wave.samples.size());
    const int64_t win = std::max<int64_t>(1, wave.sample_rate * 25 / 1000);
    const int64_t n_win = (n + win - 1) / win;

    std::vector<double> rms(static_cast<size_t>(n_win), 0.0);
    double peak = 0.0;
    for (int64_t w = 0; w < n_win; ++w) {
        const int64_t lo = w * win, hi = std::min(n, lo + win);
        double acc = 0.0;
        for (int64_t i = lo; i < hi; ++i) {
            const double s = wave.samples[static_cast<size_t>(i)];
            acc += s * s;
        }
        rms[static_cast<size_t>(w)] = std::sqrt(acc / static_cast<double>(hi - lo));
        peak = std::max(peak, rms[static_cast<size_t>(w)]);
    }
    const double threshold = peak * std::pow(10.0, -floor_db / 20.0);

    int64_t first = -1, last = -1;
    for (int64_t w = 0; w < n_win; ++w) {
        if (rms[static_cast<size_t>(w)] > threshold) {
            if (first < 0) first = w;
            last = w;
        }
    }
    TrimResult r;
    r.wave.sample_rate = wave.sample_rate;
    r.wave.channels = 1;
    if (first < 0) return r;  // fully silent
    r.start = first * win;
    r.end = std::min(n, (last + 1) * win);
    r.wave.samples.assign(wave.samples.begin() + static_cast<int64_t>(r.start),
                          wave.samples.begin() + static_cast<int64_t>(r.end));
    return r;
}

MelFilterbank build_filterbank(const DspConfig& cfg) {
    cfg.validate();
    const int n_fft = cfg.n_fft();
    const int n_bins = n_fft / 2 + 1;
    const double mel_lo = hz_to_mel(cfg.fmin);
    const double mel_hi = hz_to_mel(cfg.fmax);

    std::vector<double> hz(static_cast<size_t>(cfg.n_mels) + 2);
    for (int i = 0; i < cfg.n_mels + 2; ++i)
        hz[static_cast<size_t>(i)] =
            mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));

    MelFilterbank fb;
    fb.n_mels = cfg.n_mels;
    fb.n_bins = n_bins;
    fb.weights.assign(static_cast<size_t>(cfg.n_mels) * n_bins, 0.0f);
    const double bin_hz = static_cast<double>(cfg.target_rate) / n_fft;

    for (int m = 0; m < cfg.n_mels; ++m) {
        const double lo = hz[static_cast<size_t>(m)];
        const double c = hz[static_cast<size_t>(m) + 1];
        const double hi = hz[static_cast<size_t>(m) + 2];
        double row_max = 0.0;
        std::vector<double> row(static_cast<size_t>(n_bins), 0.0);
        for (int k = 0; k < n_bins; ++k) {
            const double f = k * bin_hz;
            double w = 0.0;
            if (f >= lo && f <= c && c > lo) w = (f - lo) / (c - lo);          // rising
            else if (f > c && f <= hi && hi > c) w = (hi - f) / (hi - c);      // falling
            row[static_cast<size_t>(k)] = w;
            row_max = std::max(row_max, w);
        }
        if (row_max <= 0.0)
            throw ConfigError("mel filter " + std::to_string(m) +
                              " has empty support; lower n_mels or raise n_fft");
        for (int k = 0; k < n_bins; ++k)
            fb.weights[static_cast<size_t>(m) * n_bins + k] =
                static_cast<float>(row[static_cast<size_t>(k)] / row_max);
    }
    return fb;
}

Spectrogram log_mel(const WaveForm& wave, const DspConfig& cfg) {
    wave.validate();
    cfg.validate();
    if (wave.channels != 1) throw ContractError("log_mel expects a mono waveform");
    if (wave.sample_rate != cfg.target_rate)
        throw ContractError("log_mel expects audio already at target_rate");
    const int64_t n = static_cast<int64_t>(wave.samples.size());
    const int64_t hop = cfg.hop();
    const int64_t n_fft = cfg.n_fft();
    if (n < hop) throw InvalidInputError("clip shorter than one hop");

    const MelFilterbank fb = build_filterbank(cfg);
    const int64_t n_frames = n / hop + 1;

    std::vector<double> window(static_cast<size_t>(n_fft));
    for (int64_t i = 0; i < n_fft; ++i)  // periodic Hann
        window[static_cast<size_t>(i)] =
            0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n_fft));

    Spectrogram spec;
    spec.n_frames = n_frames;
    spec.n_mels = cfg.n_mels;
    spec.silence_value = cfg.silence_value();
    spec.values.assign(static_cast<size_t>(n_frames * cfg.n_mels), 0.0f);

    parallel_for(n_frames, [&](int64_t t) {
        std::vector<double> frame(static_cast<size_t>(n_fft));
        const int64_t start = t * hop - n_fft / 2;  // center convention
        for (int64_t i = 0; i < n_fft; ++i) {
            const int64_t j = reflect_index(start + i, n);
            frame[static_cast<size_t>(i)] =
                static_cast<double>(wave.samples[static_cast<size_t>(j)]) *
                window[static_cast<size_t>(i)];
        }
        std::vector<double> power;
        power_spectrum(frame, power);
        for (int m = 0; m < cfg.n_mels; ++m) {
            double acc = 0.0;
            const float* w = fb.weights.data() + static_cast<size_t>(m) * fb.n_bins;
            for (int k = 0; k < fb.n_bins; ++k)
                acc += static_cast<double>(w[k]) * power[static_cast<size_t>(k)];
            const double v = (std::log(acc + cfg.log_offset) - cfg.norm_mean) / cfg.norm_std;
            spec.values[static_cast<size_t>(t * cfg.n_mels + m)] = static_cast<float>(v);
        }
    });
    return spec;
}

WaveForm pad(const WaveForm& wave, int64_t target_len, PadPolicy policy) {
    wave.validate();
    if (target_len < 1) throw InvalidInputError("pad target length must be >= 1");
    const int64_t n = wave.frames();
    if (n >= target_len) return wave;
    if (n == 0) throw InvalidInputError("cannot pad an empty waveform");
    WaveForm out = wave;
    out.samples.resize(static_cast<size_t>(target_len * wave.channels));
    for (int64_t i = n; i < target_len; ++i)
        for (int c = 0; c < wave.channels; ++c)
            out.samples[static_cast<size_t>(i * wave.channels + c)] =
                policy == PadPolicy::repeat
                    ? wave.samples[static_cast<size_t>((i % n) * wave.channels + c)]
                    : 0.0f;
    return out;
}

Spectrogram pad(const Spectrogram& spec, int64_t target_frames, PadPolicy policy) {
    if (target_frames < 1) throw InvalidInputError("pad target length must be >= 1");
    if (spec.n_frames >= target_frames) return spec;
    if (spec.n_frames == 0) throw InvalidInputError("cannot pad an empty spectrogram");
    Spectrogram out = spec;
    out.n_frames = target_frames;
    out.values.resize(static_cast<size_t>(target_frames * spec.n_mels));
    for (int64_t i = spec.n_frames; i < target_frames; ++i)
        for (int m = 0; m < spec.n_mels; ++m)
            out.values[static_cast<size_t>(i * spec.n_mels + m)] =
                policy == PadPolicy::repeat ? spec.at(i % spec.n_frames, m) : spec.silence_value;
    return out;
}

Spectrogram random_crop(const Spectrogram& spec, int64_t len_frames, Rng& rng) {
    if (len_frames < 1) throw InvalidInputError("crop length must be >= 1");
    if (len_frames > spec.n_frames)
        throw ContractError("crop length exceeds spectrogram; pad first");
    const int64_t start = rng.uniform_int(spec.n_frames - len_frames + 1);
    Spectrogram out = spec;
    out.n_frames = len_frames;
    out.values.assign(spec.values.begin() + start * spec.n_mels,
                      spec.values.begin() + (start + len_frames) * spec.n_mels);
    return out;
}

std::vector<Spectrogram> segment_frames(const Spectrogram& spec, int64_t frame_len, int64_t hop) {
    if (frame_len < 1 || hop < 1) throw InvalidInputError("segment frame_len and hop must be >= 1");
    std::vector<Spectrogram> out;
    if (spec.n_frames < frame_len) {
        out.push_back(pad(spec, frame_len, PadPolicy::repeat));
        return out;
    }
    auto slice = [&](int64_t start) {
        Spectrogram s = spec;
        s.n_frames = frame_len;
        s.values.assign(spec.values.begin() + start * spec.n_mels,
                        spec.values.begin() + (start + frame_len) * spec.n_mels);
        return s;
    };
    int64_t last_end = 0;
    for (int64_t start = 0; start + frame_len <= spec.n_frames; start += hop) {
        out.push_back(slice(start));
        last_end = start + frame_len;
    }
    if (last_end < spec.n_frames) out.push_back(slice(spec.n_frames - frame_len));
    return out;
}

void save_spectrogram(const std::string& path, const Spectrogram& spec) {
    std::string buf;
    buf.reserve(16 + spec.values.size() * 4);
    buf += "OPSG";
    le::write<uint32_t>(buf, 1);
    le::write<uint32_t>(buf, static_cast<uint32_t>(spec.n_frames));
    le::write<uint32_t>(buf, static_cast<uint32_t>(spec.n_mels));
    for (float v : spec.values) le::write<float>(buf, v);
    write_file(path, buf);
}

Spectrogram load_spectrogram(const std::string& path, float silence_value) {
    const std::string buf = read_file(path);
    if (buf.size() < 16 || buf.compare(0, 4, "OPSG") != 0)
        throw IoError("not a spectrogram cache file: " + path);
    size_t off = 4;
    const uint32_t version = le::read<uint32_t>(buf, off);
    if (version != 1) throw IoError("unsupported spectrogram cache version in " + path);
    const uint32_t n_frames = le::read<uint32_t>(buf, off);
    const uint32_t n_mels = le::read<uint32_t>(buf, off);
    const size_t need = static_cast<size_t>(n_frames) * n_mels;
    if (buf.size() != 16 + need * 4) throw IoError("truncated spectrogram cache: " + path);
    Spectrogram spec;
    spec.n_frames = n_frames;
    spec.n_mels = static_cast<int>(n_mels);
    spec.silence_value = silence_value;
    spec.values.resize(need);
    for (size_t i = 0; i < need; ++i) spec.values[i] = le::read<float>(buf, off);
    return spec;
}

}  // namespace opera::dsp

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "opera/dsp.hpp"
#include "opera/wav.hpp"

using namespace opera;
using namespace opera::dsp;

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

WaveForm tone(double freq, int rate, double seconds, double amp = 0.5) {
    WaveForm w;
    w.sample_rate = rate;
    w.channels = 1;
    const int64_t n = static_cast<int64_t>(std::llround(seconds * rate));
    w.samples.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        w.samples[static_cast<size_t>(i)] =
            static_cast<float>(amp * std::sin(2.0 * kPi * freq * i / rate));
    return w;
}

double goertzel_power(const std::vector<float>& x, int rate, double freq) {
    const double w = 2.0 * kPi * freq / rate;
    const double c = 2.0 * std::cos(w);
    double s0 = 0, s1 = 0, s2 = 0;
    for (float v : x) {
        s0 = v + c * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    return s1 * s1 + s2 * s2 - c * s1 * s2;
}

// peak of a goertzel scan around an expected tone frequency
double dominant_freq_near(const std::vector<float>& x, int rate, double f0) {
    double best_f = f0 - 5.0, best_p = -1.0;
    for (double f = f0 - 5.0; f <= f0 + 5.0; f += 0.1) {
        const double p = goertzel_power(x, rate, f);
        if (p > best_p) {
            best_p = p;
            best_f = f;
        }
    }
    return best_f;
}

double correlation(const std::vector<float>& a, const std::vector<float>& b, size_t skip) {
    const size_t n = std::min(a.size(), b.size());
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = skip; i + skip < n; ++i) {
        sab += double(a[i]) * b[i];
        saa += double(a[i]) * a[i];
        sbb += double(b[i]) * b[i];
    }
    return sab / std::sqrt(saa * sbb);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("log_mel shapes: 4 s gives 126 frames, 2 s gives 63") {
    DspConfig cfg;
    CHECK(cfg.n_fft() == 1024);
    CHECK(cfg.hop() == 512);

    Spectrogram s4 = log_mel(tone(440.0, 16000, 4.0), cfg);
    CHECK(s4.n_frames == 126);
    CHECK(s4.n_mels == 64);

    Spectrogram s2 = log_mel(tone(440.0, 16000, 2.0), cfg);
    CHECK(s2.n_frames == 63);
    CHECK(s2.n_mels == 64);
}

TEST_CASE("frame-count law over random lengths") {
    DspConfig cfg;
    Rng rng(Rng::mix(101, 0));
    for (int trial = 0; trial < 30; ++trial) {
        const int64_t len = 512 + rng.uniform_int(64000);
        WaveForm w;
        w.sample_rate = 16000;
        w.channels = 1;
        w.samples.resize(static_cast<size_t>(len));
        for (auto& s : w.samples) s = static_cast<float>(rng.uniform(-0.5, 0.5));
        CHECK(log_mel(w, cfg).n_frames == len / 512 + 1);
    }
    WaveForm tiny;
    tiny.sample_rate = 16000;
    tiny.channels = 1;
    tiny.samples.resize(511, 0.1f);
    CHECK_THROWS_AS(log_mel(tiny, cfg), InvalidInputError);
}

TEST_CASE("log_mel of silence is the normalized log offset") {
    DspConfig cfg;
    cfg.norm_mean = -3.0;
    cfg.norm_std = 2.5;
    WaveForm w;
    w.sample_rate = 16000;
    w.channels = 1;
    w.samples.assign(16000, 0.0f);
    Spectrogram s = log_mel(w, cfg);
    const float want = static_cast<float>((std::log(1e-6) - cfg.norm_mean) / cfg.norm_std);
    CHECK(s.silence_value == want);
    for (float v : s.values) CHECK(v == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("log_mel is deterministic across runs and thread budgets") {
    DspConfig cfg;
    WaveForm w = tone(620.0, 16000, 1.5);
    Spectrogram a = log_mel(w, cfg);
    Spectrogram b = log_mel(w, cfg);
    CHECK(a.values == b.values);
    set_thread_budget(4);
    Spectrogram c = log_mel(w, cfg);
    set_thread_budget(1);
    CHECK(a.values == c.values);
}

TEST_CASE("mel filterbank geometry") {
    DspConfig cfg;
    MelFilterbank fb = build_filterbank(cfg);
    CHECK(fb.n_mels == 64);
    CHECK(fb.n_bins == 513);

    for (int m = 0; m < fb.n_mels; ++m) {
        float mx = 0.0f;
        int support_lo = -1, support_hi = -1;
        for (int k = 0; k < fb.n_bins; ++k) {
            const float v = fb.weights[static_cast<size_t>(m) * fb.n_bins + k];
            CHECK(v >= 0.0f);
            mx = std::max(mx, v);
            if (v > 0.0f) {
                if (support_lo < 0) support_lo = k;
                support_hi = k;
            }
        }
        CHECK(mx == 1.0f);
        // contiguous support: no interior zeros
        for (int k = support_lo; k <= support_hi; ++k)
            CHECK(fb.weights[static_cast<size_t>(m) * fb.n_bins + k] > 0.0f);
    }

    // coverage: every bin strictly inside (fmin, fmax) has weight somewhere
    const double bin_hz = 16000.0 / 1024.0;
    for (int k = 0; k < fb.n_bins; ++k) {
        const double f = k * bin_hz;
        if (f <= cfg.fmin || f >= cfg.fmax) continue;
        double col = 0.0;
        for (int m = 0; m < fb.n_mels; ++m)
            col += fb.weights[static_cast<size_t>(m) * fb.n_bins + k];
        CHECK(col > 0.0);
    }

    DspConfig narrow;
    narrow.window_ms = 4;  // 64 samples -> 33 bins, too few for 64 filters
    narrow.hop_ms = 4;
    CHECK_THROWS_AS(build_filterbank(narrow), ConfigError);
}

TEST_CASE("resample identity, length law, and tone fidelity") {
    WaveForm a = tone(400.0, 8000, 1.0);
    WaveForm same = resample(a, 8000);
    CHECK(same.samples == a.samples);

    WaveForm up = resample(a, 16000);
    CHECK(up.sample_rate == 16000);
    CHECK(up.samples.size() == 16000);

    // oracle: direct synthesis at the target rate
    WaveForm direct = tone(400.0, 16000, 1.0);
    CHECK(correlation(up.samples, direct.samples, 200) > 0.99);
    CHECK(dominant_freq_near(up.samples, 16000, 400.0) == doctest::Approx(400.0).epsilon(0.0025));

    // downsampling keeps tones below 0.4x Nyquist within 1 Hz
    WaveForm hi = tone(1000.0, 44100, 1.0);
    WaveForm down = resample(hi, 16000);
    CHECK(down.samples.size() == 16000);
    WaveForm ref = tone(1000.0, 16000, 1.0);
    CHECK(correlation(down.samples, ref.samples, 200) > 0.99);
    CHECK(std::abs(dominant_freq_near(down.samples, 16000, 1000.0) - 1000.0) < 1.0);

    WaveForm bad = a;
    bad.samples[5] = std::nanf("");
    CHECK_THROWS_AS(resample(bad, 16000), InvalidInputError);
}

TEST_CASE("mix_mono") {
    WaveForm st;
    st.sample_rate = 8000;
    st.channels = 2;
    st.samples = {0.5f, 0.5f, -0.25f, -0.25f};
    WaveForm m = mix_mono(st);
    CHECK(m.channels == 1);
    CHECK(m.samples == std::vector<float>{0.5f, -0.25f});

    WaveForm opp;
    opp.sample_rate = 8000;
    opp.channels = 2;
    opp.samples = {1.0f, -1.0f, 1.0f, -1.0f};
    CHECK(mix_mono(opp).samples == std::vector<float>{0.0f, 0.0f});

    WaveForm mono = tone(100.0, 8000, 0.01);
    CHECK(mix_mono(mono).samples == mono.samples);
}

TEST_CASE("trim_silence removes silent edges and is idempotent") {
    WaveForm t = tone(500.0, 16000, 1.0);
    WaveForm padded;
    padded.sample_rate = 16000;
    padded.channels = 1;
    padded.samples.assign(16000, 0.0f);
    padded.samples.insert(padded.samples.end(), t.samples.begin(), t.samples.end());
    padded.samples.insert(padded.samples.end(), 16000, 0.0f);

    TrimResult r = trim_silence(padded);
    CHECK(r.start == 16000);
    CHECK(r.end == 32000);
    CHECK(r.wave.samples.size() == t.samples.size());
    CHECK(r.wave.samples == t.samples);

    TrimResult again = trim_silence(r.wave);
    CHECK(again.start == 0);
    CHECK(again.end == static_cast<int64_t>(r.wave.samples.size()));
    CHECK(again.wave.samples == r.wave.samples);

    WaveForm loud = tone(500.0, 16000, 0.5);
    TrimResult keep = trim_silence(loud);
    CHECK(keep.wave.samples == loud.samples);

    WaveForm zero;
    zero.sample_rate = 16000;
    zero.channels = 1;
    zero.samples.assign(8000, 0.0f);
    CHECK(trim_silence(zero).empty());
}

TEST_CASE("pad waveforms and spectrograms") {
    WaveForm w;
    w.sample_rate = 16000;
    w.channels = 1;
    w.samples = {1, 2, 3};
    CHECK(pad(w, 5, PadPolicy::repeat).samples == std::vector<float>{1, 2, 3, 1, 2});
    CHECK(pad(w, 5, PadPolicy::zero).samples == std::vector<float>{1, 2, 3, 0, 0});
    CHECK(pad(w, 2, PadPolicy::repeat).samples == w.samples);

    Spectrogram s;
    s.n_frames = 3;
    s.n_mels = 2;
    s.silence_value = -7.5f;
    s.values = {1, 2, 3, 4, 5, 6};
    Spectrogram rp = pad(s, 7, PadPolicy::repeat);
    CHECK(rp.n_frames == 7);
    for (int64_t i = 0; i < 7; ++i)
        for (int m = 0; m < 2; ++m) CHECK(rp.at(i, m) == s.at(i % 3, m));
    Spectrogram zp = pad(s, 5, PadPolicy::zero);
    CHECK(zp.at(3, 0) == -7.5f);
    CHECK(zp.at(4, 1) == -7.5f);
}

TEST_CASE("random_crop windows") {
    Spectrogram s;
    s.n_frames = 10;
    s.n_mels = 3;
    s.values.resize(30);
    for (size_t i = 0; i < 30; ++i) s.values[i] = static_cast<float>(i);

    Rng rng(7);
    Spectrogram whole = random_crop(s, 10, rng);
    CHECK(whole.values == s.values);

    Rng r1(99), r2(99);
    Spectrogram c1 = random_crop(s, 4, r1);
    Spectrogram c2 = random_crop(s, 4, r2);
    CHECK(c1.values == c2.values);
    CHECK(c1.n_frames == 4);

    // contiguity: the crop appears verbatim at its start offset
    const int64_t start = static_cast<int64_t>(c1.values[0]) / 3;
    for (int64_t i = 0; i < 4; ++i)
        for (int m = 0; m < 3; ++m) CHECK(c1.at(i, m) == s.at(start + i, m));

    CHECK_THROWS_AS(random_crop(s, 11, rng), ContractError);
}

TEST_CASE("segment_frames start positions") {
    Spectrogram s;
    s.n_frames = 10;
    s.n_mels = 1;
    s.values = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};

    auto segs = segment_frames(s, 4, 2);
    REQUIRE(segs.size() == 4);
    for (size_t k = 0; k < 4; ++k)
        for (int64_t i = 0; i < 4; ++i)
            CHECK(segs[k].at(i, 0) == s.at(static_cast<int64_t>(k) * 2 + i, 0));

    auto seg3 = segment_frames(s, 4, 3);
    REQUIRE(seg3.size() == 3);
    CHECK(seg3[2].at(0, 0) == 6.0f);

    // when the hop leaves a tail, one right-aligned segment covers it
    auto seg4 = segment_frames(s, 4, 4);
    REQUIRE(seg4.size() == 3);
    CHECK(seg4[2].at(0, 0) == 6.0f);
    CHECK(seg4[2].at(3, 0) == 9.0f);

    Spectrogram tiny;
    tiny.n_frames = 3;
    tiny.n_mels = 1;
    tiny.values = {5, 6, 7};
    auto one = segment_frames(tiny, 4, 2);
    REQUIRE(one.size() == 1);
    CHECK(one[0].values == std::vector<float>{5, 6, 7, 5});
}

TEST_CASE("spectrogram cache round-trip") {
    DspConfig cfg;
    Spectrogram s = log_mel(tone(440.0, 16000, 1.0), cfg);
    const std::string path = temp_path("opera_test_cache.opsg");
    save_spectrogram(path, s);
    Spectrogram back = load_spectrogram(path, s.silence_value);
    CHECK(back.n_frames == s.n_frames);
    CHECK(back.n_mels == s.n_mels);
    CHECK(back.values == s.values);
    CHECK(back.silence_value == s.silence_value);

    std::string bytes = read_file(path);
    bytes[0] = 'X';
    write_file(path, bytes);
    CHECK_THROWS_AS(load_spectrogram(path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("wav io round-trip and encodings") {
    WaveForm w = tone(440.0, 16000, 0.25);
    const std::string path = temp_path("opera_test_tone.wav");
    write_wav_pcm16(path, w);
    WaveForm back = read_wav(path);
    CHECK(back.sample_rate == 16000);
    CHECK(back.channels == 1);
    REQUIRE(back.samples.size() == w.samples.size());
    for (size_t i = 0; i < w.samples.size(); ++i)
        CHECK(back.samples[i] == doctest::Approx(w.samples[i]).epsilon(1.0 / 16384));

    // byte-identical rewrite
    write_wav_pcm16(path + ".b", back);
    write_wav_pcm16(path + ".c", back);
    CHECK(read_file(path + ".b") == read_file(path + ".c"));

    // hand-built float32 WAV
    {
        std::string buf;
        buf += "RIFF";
        le::write<uint32_t>(buf, 36 + 12);
        buf += "WAVEfmt ";
        le::write<uint32_t>(buf, 16);
        le::write<uint16_t>(buf, 3);  // IEEE float
        le::write<uint16_t>(buf, 1);
        le::write<uint32_t>(buf, 8000);
        le::write<uint32_t>(buf, 32000);
        le::write<uint16_t>(buf, 4);
        le::write<uint16_t>(buf, 32);
        buf += "data";
        le::write<uint32_t>(buf, 12);
        le::write<float>(buf, 0.5f);
        le::write<float>(buf, -0.5f);
        le::write<float>(buf, 0.125f);
        write_file(path + ".f32", buf);
        WaveForm f = read_wav(path + ".f32");
        CHECK(f.samples == std::vector<float>{0.5f, -0.5f, 0.125f});
        CHECK(f.sample_rate == 8000);
    }

    // hand-built 24-bit PCM WAV: value 0x400000 is half scale
    {
        std::string buf;
        buf += "RIFF";
        le::write<uint32_t>(buf, 36 + 6);
        buf += "WAVEfmt ";
        le::write<uint32_t>(buf, 16);
        le::write<uint16_t>(buf, 1);
        le::write<uint16_t>(buf, 1);
        le::write<uint32_t>(buf, 8000);
        le::write<uint32_t>(buf, 24000);
        le::write<uint16_t>(buf, 3);
        le::write<uint16_t>(buf, 24);
        buf += "data";
        le::write<uint32_t>(buf, 6);
        buf += std::string("\x00\x00\x40", 3);  // +0.5
        buf += std::string("\x00\x00\xC0", 3);  // -0.5
        write_file(path + ".i24", buf);
        WaveForm q = read_wav(path + ".i24");
        REQUIRE(q.samples.size() == 2);
        CHECK(q.samples[0] == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(q.samples[1] == doctest::Approx(-0.5).epsilon(1e-6));
    }

    write_file(path + ".bad", "not a wav at all");
    CHECK_THROWS_AS(read_wav(path + ".bad"), IoError);
    for (const char* ext : {"", ".b", ".c", ".f32", ".i24", ".bad"})
        std::remove((path + ext).c_str());
}

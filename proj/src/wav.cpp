#include "opera/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace opera::dsp {

namespace {

constexpr uint16_t kFmtPcm = 1;
constexpr uint16_t kFmtFloat = 3;
constexpr uint16_t kFmtExtensible = 0xFFFE;

int32_t read_i24(const char* p) {
    // sign-extend a little-endian 24-bit value
    const uint32_t u = static_cast<uint8_t>(p[0]) | (static_cast<uint8_t>(p[1]) << 8) |
                       (static_cast<uint8_t>(p[2]) << 16);
    return static_cast<int32_t>(u << 8) >> 8;
}

}  // namespace

WaveForm read_wav(const std::string& path) {
    const std::string buf = read_file(path);
    if (buf.size() < 12 || buf.compare(0, 4, "RIFF") != 0 || buf.compare(8, 4, "WAVE") != 0)
        throw IoError("not a WAV file: " + path);

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    size_t data_off = 0, data_len = 0;
    bool have_fmt = false;

    size_t off = 12;
    while (off + 8 <= buf.size()) {
        const std::string id = buf.substr(off, 4);
        size_t p = off + 4;
        const uint32_t len = le::read<uint32_t>(buf, p);
        const size_t body = off + 8;
        if (body + len > buf.size()) throw IoError("truncated WAV chunk in " + path);
        if (id == "fmt ") {
            if (len < 16) throw IoError("malformed fmt chunk in " + path);
            size_t q = body;
            format = le::read<uint16_t>(buf, q);
            channels = le::read<uint16_t>(buf, q);
            rate = le::read<uint32_t>(buf, q);
            le::read<uint32_t>(buf, q);  // byte rate
            le::read<uint16_t>(buf, q);  // block align
            bits = le::read<uint16_t>(buf, q);
            if (format == kFmtExtensible) {
                if (len < 40) throw IoError("malformed extensible fmt chunk in " + path);
                q = body + 24;  // first two bytes of the subformat GUID
                format = le::read<uint16_t>(buf, q);
            }
            have_fmt = true;
        } else if (id == "data") {
            data_off = body;
            data_len = len;
        }
        off = body + len + (len & 1);  // chunks are word-aligned
    }
    if (!have_fmt || data_off == 0) throw IoError("WAV missing fmt or data chunk: " + path);
    if (channels < 1 || rate == 0) throw IoError("WAV has invalid fmt fields: " + path);

    WaveForm w;
    w.sample_rate = static_cast<int>(rate);
    w.channels = channels;
    const char* d = buf.data() + data_off;

    if (format == kFmtPcm && bits == 16) {
        const size_t n = data_len / 2;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            int16_t v;
            std::memcpy(&v, d + 2 * i, 2);
            w.samples[i] = static_cast<float>(v) / 32768.0f;
        }
    } else if (format == kFmtPcm && bits == 24) {
        const size_t n = data_len / 3;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i)
            w.samples[i] = static_cast<float>(read_i24(d + 3 * i)) / 8388608.0f;
    } else if (format == kFmtPcm && bits == 32) {
        const size_t n = data_len / 4;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            int32_t v;
            std::memcpy(&v, d + 4 * i, 4);
            w.samples[i] = static_cast<float>(static_cast<double>(v) / 2147483648.0);
        }
    } else if (format == kFmtFloat && bits == 32) {
        const size_t n = data_len / 4;
        w.samples.resize(n);
        std::memcpy(w.samples.data(), d, n * 4);
    } else {
        throw IoError("unsupported WAV encoding (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits) in " + path);
    }
    w.samples.resize(w.samples.size() - w.samples.size() % channels);
    w.validate();
    return w;
}

void write_wav_pcm16(const std::string& path, const WaveForm& wave) {
    wave.validate();
    const uint32_t data_len = static_cast<uint32_t>(wave.samples.size() * 2);
    std::string buf;
    buf.reserve(44 + data_len);
    buf += "RIFF";
    le::write<uint32_t>(buf, 36 + data_len);
    buf += "WAVEfmt ";
    le::write<uint32_t>(buf, 16);
    le::write<uint16_t>(buf, kFmtPcm);
    le::write<uint16_t>(buf, static_cast<uint16_t>(wave.channels));
    le::write<uint32_t>(buf, static_cast<uint32_t>(wave.sample_rate));
    le::write<uint32_t>(buf, static_cast<uint32_t>(wave.sample_rate * wave.channels * 2));
    le::write<uint16_t>(buf, static_cast<uint16_t>(wave.channels * 2));
    le::write<uint16_t>(buf, 16);
    buf += "data";
    le::write<uint32_t>(buf, data_len);
    for (float s : wave.samples) {
        const double x = std::clamp(static_cast<double>(s), -1.0, 1.0);
        const int16_t v = static_cast<int16_t>(std::lrint(x * 32767.0));
        le::write<int16_t>(buf, v);
    }
    write_file(path, buf);
}

}  // namespace opera::dsp

#pragma once

#include <string>

#include "opera/dsp.hpp"

namespace opera::dsp {

// PCM 16/24/32-bit integer and 32-bit float, any rate and channel count
WaveForm read_wav(const std::string& path);

// mono or interleaved multichannel PCM-16
void write_wav_pcm16(const std::string& path, const WaveForm& wave);

}  // namespace opera::dsp

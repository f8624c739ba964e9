// Copyright 2026 The dmel authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Mono PCM audio I/O. The reader accepts RIFF/WAVE with 16-bit signed PCM
// or 32-bit IEEE float samples, mono or multi-channel (channels are
// averaged down to mono). The writer always emits 16-bit PCM mono.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dmel/errors.hpp"

namespace dmel {

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate_hz = 0;

  double duration_s() const {
    return sample_rate_hz > 0 ? static_cast<double>(samples.size()) / sample_rate_hz : 0.0;
  }
};

namespace wav_detail {

inline uint32_t read_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint16_t read_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
}

}  // namespace wav_detail

// Decodes a WAV image held in memory. Shared by read_wav and the tests,
// which synthesize byte-exact fixtures.
inline Waveform decode_wav(const std::vector<uint8_t>& bytes, const std::string& origin = "<memory>") {
  using namespace wav_detail;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(origin + ": not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits_per_sample = 0;
  uint32_t sample_rate = 0;
  size_t data_off = 0, data_len = 0;
  bool have_data = false;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const uint32_t size = read_u32(bytes.data() + pos + 4);
    const size_t body = pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (size < 16 || body + 16 > bytes.size()) throw FormatError(origin + ": malformed fmt chunk");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      sample_rate = read_u32(bytes.data() + body + 4);
      bits_per_sample = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = body;
      data_len = size;
      have_data = true;
    }
    pos = body + size + (size & 1);  // chunks are word-aligned
  }

  if (!have_fmt) throw FormatError(origin + ": missing fmt chunk");
  if (!have_data) throw FormatError(origin + ": missing data chunk");
  if (channels == 0 || sample_rate == 0) throw FormatError(origin + ": malformed fmt chunk");
  if (data_off + data_len > bytes.size()) throw FormatError(origin + ": truncated data chunk");

  const bool pcm16 = (format == 1 && bits_per_sample == 16);
  const bool f32 = (format == 3 && bits_per_sample == 32);
  if (!pcm16 && !f32) {
    throw UnsupportedCodecError(origin + ": unsupported codec (format tag " + std::to_string(format) +
                                ", " + std::to_string(bits_per_sample) + " bits)");
  }

  const size_t bytes_per_sample = pcm16 ? 2 : 4;
  const size_t frame_bytes = bytes_per_sample * channels;
  const size_t n_frames = frame_bytes > 0 ? data_len / frame_bytes : 0;

  Waveform w;
  w.sample_rate_hz = static_cast<int>(sample_rate);
  w.samples.resize(n_frames);
  const uint8_t* d = bytes.data() + data_off;
  for (size_t i = 0; i < n_frames; ++i) {
    double acc = 0.0;
    for (size_t c = 0; c < channels; ++c) {
      const uint8_t* s = d + i * frame_bytes + c * bytes_per_sample;
      if (pcm16) {
        const int16_t raw = static_cast<int16_t>(read_u16(s));
        acc += static_cast<double>(raw) / 32768.0;
      } else {
        float f;
        uint32_t u = read_u32(s);
        std::memcpy(&f, &u, 4);
        if (!std::isfinite(f)) throw FormatError(origin + ": non-finite float sample");
        acc += f < -1.0f ? -1.0 : (f > 1.0f ? 1.0 : static_cast<double>(f));
      }
    }
    w.samples[i] = acc / channels;
  }
  return w;
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path);
}

// Encodes a waveform as a 16-bit PCM mono WAV image. Samples outside
// [-1, 1] are clipped. The quantizer scales by 32768 and clamps the top
// code, so read(write(w)) differs from w by at most 2^-15 per sample.
inline std::vector<uint8_t> encode_wav(const Waveform& w) {
  using namespace wav_detail;
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  const uint32_t data_bytes = n * 2;
  std::vector<uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E'});
  out.insert(out.end(), {'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<uint32_t>(w.sample_rate_hz));
  put_u32(out, static_cast<uint32_t>(w.sample_rate_hz) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);
  for (const double x : w.samples) {
    long q = std::lround(x * 32768.0);
    if (q > 32767) q = 32767;
    if (q < -32768) q = -32768;
    put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
  }
  return out;
}

inline void write_wav(const Waveform& w, const std::string& path) {
  const std::vector<uint8_t> bytes = encode_wav(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace dmel

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
// Linear scalar quantizer over log mel values: a codebook of 2^bits evenly
// spaced codes shared by all channels, fit from corpus-global extrema.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dmel/dsp.hpp"
#include "dmel/errors.hpp"

namespace dmel {

struct Codebook {
  double min_val = 0.0;
  double max_val = 0.0;
  int bits = 0;
  int n_mels = 0;
  FrontendConfig frontend;

  int n_codes() const { return 1 << bits; }
  double delta() const { return (max_val - min_val) / n_codes(); }
  double code(int j) const { return min_val + j * delta(); }

  void validate() const {
    if (bits < 1 || bits > 16) throw ConfigError("codebook: bits must be in [1, 16]");
    if (!(max_val > min_val)) throw ConfigError("codebook: max_val must exceed min_val");
    if (n_mels < 1) throw ConfigError("codebook: n_mels must be >= 1");
  }
};

struct TokenGrid {
  int64_t n_frames = 0;
  int n_mels = 0;
  int bits = 0;
  int frame_rate_hz = 0;
  std::vector<uint16_t> bins;  // row-major [n_frames][n_mels], each < 2^bits

  uint16_t& at(int64_t t, int c) { return bins[static_cast<size_t>(t) * n_mels + c]; }
  uint16_t at(int64_t t, int c) const { return bins[static_cast<size_t>(t) * n_mels + c]; }
};

// Streaming extrema accumulator; add() spectrograms in any order or
// chunking, then finish() builds the codebook from the global min/max.
class CodebookFitter {
 public:
  void add(const MelSpectrogram& m) {
    if (n_mels_ == 0) {
      n_mels_ = m.n_mels;
    } else if (m.n_mels != n_mels_) {
      throw ArgumentError("fit_codebook: spectrograms disagree on channel count");
    }
    for (const double v : m.values) {
      lo_ = std::min(lo_, v);
      hi_ = std::max(hi_, v);
    }
    count_ += static_cast<int64_t>(m.values.size());
  }

  Codebook finish(int bits, const FrontendConfig& frontend) const {
    if (count_ == 0) throw DataError("fit_codebook: corpus contains no frames");
    if (lo_ == hi_) throw DataError("fit_codebook: corpus is constant, no range to quantize");
    Codebook cb;
    cb.min_val = lo_;
    cb.max_val = hi_;
    cb.bits = bits;
    cb.n_mels = n_mels_;
    cb.frontend = frontend;
    cb.validate();
    return cb;
  }

 private:
  double lo_ = std::numeric_limits<double>::infinity();
  double hi_ = -std::numeric_limits<double>::infinity();
  int64_t count_ = 0;
  int n_mels_ = 0;
};

inline Codebook fit_codebook(const std::vector<MelSpectrogram>& corpus, int bits,
                             const FrontendConfig& frontend) {
  CodebookFitter fitter;
  for (const auto& m : corpus) fitter.add(m);
  return fitter.finish(bits, frontend);
}

namespace codec_detail {

// Nearest code index for one value. A closed-form estimate narrows the
// search to three candidates, then the decision is made on the actual
// |v - code(j)| distances so results agree with an exhaustive argmin even
// when the division rounds awkwardly at midpoints. Ties take the lower
// index; out-of-range values clamp to the end codes.
inline uint16_t nearest_bin(double v, const Codebook& cb) {
  const int top = cb.n_codes() - 1;
  if (v <= cb.min_val) return 0;
  if (v >= cb.code(top)) return static_cast<uint16_t>(top);
  const double u = (v - cb.min_val) / cb.delta();
  int64_t guess = static_cast<int64_t>(std::ceil(u - 0.5));
  guess = std::clamp<int64_t>(guess, 0, top);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int64_t j = std::max<int64_t>(0, guess - 1); j <= std::min<int64_t>(top, guess + 1); ++j) {
    const double d = std::abs(v - cb.code(static_cast<int>(j)));
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(j);
    }
  }
  return static_cast<uint16_t>(best);
}

}  // namespace codec_detail

inline TokenGrid tokenize(const MelSpectrogram& m, const Codebook& cb) {
  cb.validate();
  if (m.n_mels != cb.n_mels) {
    throw ArgumentError("tokenize: spectrogram has " + std::to_string(m.n_mels) +
                        " channels, codebook expects " + std::to_string(cb.n_mels));
  }
  TokenGrid g;
  g.n_frames = m.n_frames;
  g.n_mels = m.n_mels;
  g.bits = cb.bits;
  g.frame_rate_hz = m.frame_rate_hz;
  g.bins.resize(m.values.size());
  for (size_t i = 0; i < m.values.size(); ++i) g.bins[i] = codec_detail::nearest_bin(m.values[i], cb);
  return g;
}

inline MelSpectrogram detokenize(const TokenGrid& t, const Codebook& cb) {
  cb.validate();
  if (t.bits != cb.bits) throw ArgumentError("detokenize: grid bit width does not match codebook");
  if (t.n_mels != cb.n_mels) throw ArgumentError("detokenize: grid channel count does not match codebook");
  MelSpectrogram m;
  m.n_frames = t.n_frames;
  m.n_mels = t.n_mels;
  m.frame_rate_hz = t.frame_rate_hz;
  m.values.resize(t.bins.size());
  const int n_codes = cb.n_codes();
  for (size_t i = 0; i < t.bins.size(); ++i) {
    if (t.bins[i] >= n_codes) {
      throw DataError("detokenize: bin " + std::to_string(t.bins[i]) + " out of range for " +
                      std::to_string(cb.bits) + "-bit codebook");
    }
    m.values[i] = cb.code(t.bins[i]);
  }
  return m;
}

// Token stream rate in bits per second: frames/s times channels times
// bits per channel.
inline int64_t token_bitrate_bps(int frame_rate_hz, int n_mels, int bits) {
  return static_cast<int64_t>(frame_rate_hz) * n_mels * bits;
}

inline int64_t token_bitrate_bps(const Codebook& cb) {
  return token_bitrate_bps(cb.frontend.frame_rate_hz, cb.n_mels, cb.bits);
}

}  // namespace dmel

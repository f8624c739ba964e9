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
// Evaluation metrics: word/character error rates with pinned text
// normalization, quantization SNR, and log-spectral distance.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dmel/codec.hpp"
#include "dmel/dsp.hpp"
#include "dmel/errors.hpp"

namespace dmel {

// Uppercases, keeps only [A-Z'] and spaces, collapses whitespace runs to a
// single space, and trims the ends. Pinned so error rates are reproducible.
inline std::string normalize_text(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (const char raw : s) {
    const unsigned char u = static_cast<unsigned char>(raw);
    char c = 0;
    if (std::isalpha(u)) {
      c = static_cast<char>(std::toupper(u));
    } else if (raw == '\'') {
      c = '\'';
    } else if (std::isspace(u)) {
      pending_space = true;
      continue;
    } else {
      continue;
    }
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

// Levenshtein distance with unit costs, two-row dynamic program.
template <class Seq>
int64_t edit_distance(const Seq& ref, const Seq& hyp) {
  const size_t n = ref.size(), m = hyp.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int64_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> words;
  std::string cur;
  for (const char c : s) {
    if (c == ' ') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

// Word error rate: Levenshtein over normalized words, divided by
// max(1, reference word count).
inline double word_error_rate(const std::string& ref, const std::string& hyp) {
  const std::vector<std::string> r = split_words(normalize_text(ref));
  const std::vector<std::string> h = split_words(normalize_text(hyp));
  return static_cast<double>(edit_distance(r, h)) / static_cast<double>(std::max<size_t>(1, r.size()));
}

// Character error rate over the normalized strings (spaces count).
inline double char_error_rate(const std::string& ref, const std::string& hyp) {
  const std::string r = normalize_text(ref);
  const std::string h = normalize_text(hyp);
  return static_cast<double>(edit_distance(r, h)) / static_cast<double>(std::max<size_t>(1, r.size()));
}

// 10*log10(signal variance sum / squared error sum), +inf at zero error.
inline double quantization_snr_db(const MelSpectrogram& orig, const MelSpectrogram& recon) {
  if (orig.n_frames != recon.n_frames || orig.n_mels != recon.n_mels) {
    throw ArgumentError("quantization_snr_db: spectrogram shapes differ");
  }
  if (orig.values.empty()) throw ArgumentError("quantization_snr_db: empty spectrograms");
  double mean = 0.0;
  for (const double v : orig.values) mean += v;
  mean /= static_cast<double>(orig.values.size());
  double signal = 0.0, noise = 0.0;
  for (size_t i = 0; i < orig.values.size(); ++i) {
    const double s = orig.values[i] - mean;
    const double e = orig.values[i] - recon.values[i];
    signal += s * s;
    noise += e * e;
  }
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / noise);
}

// Mean over frames of the RMS log-energy difference across channels.
inline double log_spectral_distance(const MelSpectrogram& orig, const MelSpectrogram& recon) {
  if (orig.n_frames != recon.n_frames || orig.n_mels != recon.n_mels) {
    throw ArgumentError("log_spectral_distance: spectrogram shapes differ");
  }
  if (orig.n_frames == 0) return 0.0;
  double total = 0.0;
  for (int64_t t = 0; t < orig.n_frames; ++t) {
    double sq = 0.0;
    for (int j = 0; j < orig.n_mels; ++j) {
      const double d = orig.at(t, j) - recon.at(t, j);
      sq += d * d;
    }
    total += std::sqrt(sq / orig.n_mels);
  }
  return total / static_cast<double>(orig.n_frames);
}

// Fraction of reference token positions the hypothesis reproduces exactly.
// Frames beyond the shorter grid count as mismatches; the denominator is
// the reference size.
inline double bin_match_fraction(const TokenGrid& ref, const TokenGrid& hyp) {
  if (ref.n_mels != hyp.n_mels || ref.bits != hyp.bits) {
    throw ArgumentError("bin_match_fraction: token grid geometries differ");
  }
  if (ref.n_frames == 0) return hyp.n_frames == 0 ? 1.0 : 0.0;
  const int64_t frames = std::min(ref.n_frames, hyp.n_frames);
  int64_t matches = 0;
  for (int64_t i = 0; i < frames * ref.n_mels; ++i) {
    if (ref.bins[static_cast<size_t>(i)] == hyp.bins[static_cast<size_t>(i)]) ++matches;
  }
  return static_cast<double>(matches) / static_cast<double>(ref.n_frames * ref.n_mels);
}

}  // namespace dmel

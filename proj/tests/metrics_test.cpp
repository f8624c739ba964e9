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

#include "dmel/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dmel/codec.hpp"
#include "dmel/errors.hpp"
#include "dmel/rng.hpp"

namespace dmel {
namespace {

// Full-matrix Levenshtein, written independently of the two-row version in
// the library so the tests do not share its bugs.
template <class Seq>
int64_t edit_distance_full_matrix(const Seq& a, const Seq& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<std::vector<int64_t>> d(n + 1, std::vector<int64_t>(m + 1, 0));
  for (size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int64_t>(i);
  for (size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      const int64_t del = d[i - 1][j] + 1;
      const int64_t ins = d[i][j - 1] + 1;
      const int64_t sub = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      d[i][j] = std::min({del, ins, sub});
    }
  }
  return d[n][m];
}

MelSpectrogram make_mel(int64_t frames, int mels, std::vector<double> values) {
  MelSpectrogram m;
  m.n_frames = frames;
  m.n_mels = mels;
  m.frame_rate_hz = 40;
  m.values = std::move(values);
  return m;
}

TEST(NormalizeTextTest, UppercasesAndStripsPunctuation) {
  EXPECT_EQ(normalize_text("Hello, world!"), "HELLO WORLD");
  EXPECT_EQ(normalize_text("don't stop"), "DON'T STOP");
  EXPECT_EQ(normalize_text("  a\t b\nc  "), "A B C");
  EXPECT_EQ(normalize_text("123 #$%"), "");
  EXPECT_EQ(normalize_text(""), "");
  EXPECT_EQ(normalize_text("...leading"), "LEADING");
}

TEST(ErrorRateTest, KnownWordErrorRates) {
  EXPECT_DOUBLE_EQ(word_error_rate("the cat sat", "the cat sat"), 0.0);
  // One insertion against a three-word reference.
  EXPECT_DOUBLE_EQ(word_error_rate("the cat sat", "the cat sat down"), 1.0 / 3.0);
  // One substitution.
  EXPECT_DOUBLE_EQ(word_error_rate("the cat sat", "the bat sat"), 1.0 / 3.0);
  // One deletion.
  EXPECT_DOUBLE_EQ(word_error_rate("the cat sat", "the sat"), 1.0 / 3.0);
  // Normalization applies before scoring.
  EXPECT_DOUBLE_EQ(word_error_rate("The  CAT sat.", "the cat sat"), 0.0);
  // Empty reference divides by one instead of zero.
  EXPECT_DOUBLE_EQ(word_error_rate("", "two words"), 2.0);
  EXPECT_DOUBLE_EQ(word_error_rate("", ""), 0.0);
}

TEST(ErrorRateTest, KnownCharErrorRates) {
  EXPECT_DOUBLE_EQ(char_error_rate("abc", "abc"), 0.0);
  EXPECT_DOUBLE_EQ(char_error_rate("abc", "abd"), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(char_error_rate("ab cd", "abcd"), 1.0 / 5.0);
  EXPECT_DOUBLE_EQ(char_error_rate("", "xy"), 2.0);
}

TEST(ErrorRateTest, RateIsAsymmetricInReferenceLength) {
  // Same distance, different denominators.
  const double a = word_error_rate("one two three four", "one two");
  const double b = word_error_rate("one two", "one two three four");
  EXPECT_DOUBLE_EQ(a, 0.5);
  EXPECT_DOUBLE_EQ(b, 1.0);
}

TEST(ErrorRateTest, MatchesFullMatrixOracleOnRandomPairs) {
  Rng rng = make_rng(21, "edit");
  const std::string alphabet = "ab c";
  for (int trial = 0; trial < 500; ++trial) {
    std::string ref, hyp;
    const int64_t rn = rng.uniform_int(12);
    const int64_t hn = rng.uniform_int(12);
    for (int64_t i = 0; i < rn; ++i) ref += alphabet[rng.uniform_int(alphabet.size())];
    for (int64_t i = 0; i < hn; ++i) hyp += alphabet[rng.uniform_int(alphabet.size())];
    const std::string nr = normalize_text(ref);
    const std::string nh = normalize_text(hyp);
    EXPECT_EQ(edit_distance(nr, nh), edit_distance_full_matrix(nr, nh)) << ref << " / " << hyp;
    const auto rw = split_words(nr);
    const auto hw = split_words(nh);
    const double expected_wer =
        static_cast<double>(edit_distance_full_matrix(rw, hw)) / std::max<size_t>(1, rw.size());
    EXPECT_DOUBLE_EQ(word_error_rate(ref, hyp), expected_wer);
  }
}

TEST(SnrTest, IdenticalSignalsGiveInfiniteSnr) {
  const MelSpectrogram m = make_mel(2, 2, {1.0, 2.0, 3.0, 4.0});
  EXPECT_TRUE(std::isinf(quantization_snr_db(m, m)));
  EXPECT_GT(quantization_snr_db(m, m), 0.0);
}

TEST(SnrTest, ConstantOffsetMatchesClosedForm) {
  const MelSpectrogram orig = make_mel(2, 2, {1.0, 2.0, 3.0, 4.0});
  MelSpectrogram recon = orig;
  const double c = 0.25;
  for (auto& v : recon.values) v += c;
  // mean = 2.5, centered sum of squares = 2.25+0.25+0.25+2.25 = 5.
  const double expected = 10.0 * std::log10(5.0 / (4.0 * c * c));
  EXPECT_NEAR(quantization_snr_db(orig, recon), expected, 1e-12);
}

TEST(SnrTest, SnrDecreasesWithNoiseAmplitude) {
  Rng rng = make_rng(30, "snr");
  MelSpectrogram orig = make_mel(10, 8, std::vector<double>(80));
  for (auto& v : orig.values) v = rng.uniform(-20.0, 2.0);
  std::vector<double> noise(orig.values.size());
  for (auto& v : noise) v = rng.uniform(-1.0, 1.0);
  double prev = std::numeric_limits<double>::infinity();
  for (const double amp : {0.01, 0.1, 1.0}) {
    MelSpectrogram recon = orig;
    for (size_t i = 0; i < noise.size(); ++i) recon.values[i] += amp * noise[i];
    const double snr = quantization_snr_db(orig, recon);
    EXPECT_LT(snr, prev);
    prev = snr;
  }
}

TEST(SnrTest, RejectsShapeMismatch) {
  const MelSpectrogram a = make_mel(2, 2, {1, 2, 3, 4});
  const MelSpectrogram b = make_mel(1, 4, {1, 2, 3, 4});
  EXPECT_THROW(quantization_snr_db(a, b), ArgumentError);
}

TEST(LsdTest, ZeroForIdenticalAndExactForKnownOffsets) {
  const MelSpectrogram m = make_mel(3, 4, std::vector<double>(12, -5.0));
  EXPECT_DOUBLE_EQ(log_spectral_distance(m, m), 0.0);

  MelSpectrogram shifted = m;
  for (auto& v : shifted.values) v += 0.75;
  EXPECT_NEAR(log_spectral_distance(m, shifted), 0.75, 1e-12);

  // Mean over frames of the per-frame channel RMS: frame 0 differs by
  // (3, 4) over two channels, frame 1 matches.
  const MelSpectrogram a = make_mel(2, 2, {0, 0, 0, 0});
  const MelSpectrogram b = make_mel(2, 2, {3, 4, 0, 0});
  EXPECT_NEAR(log_spectral_distance(a, b), std::sqrt(12.5) / 2.0, 1e-12);

  const MelSpectrogram c = make_mel(1, 4, {0, 0, 0, 0});
  EXPECT_THROW(log_spectral_distance(a, c), ArgumentError);
}

TEST(BinMatchTest, CountsMatchingCells) {
  TokenGrid ref;
  ref.n_frames = 2;
  ref.n_mels = 2;
  ref.bits = 4;
  ref.frame_rate_hz = 40;
  ref.bins = {1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(bin_match_fraction(ref, ref), 1.0);

  TokenGrid hyp = ref;
  hyp.bins = {1, 2, 3, 5};
  EXPECT_DOUBLE_EQ(bin_match_fraction(ref, hyp), 0.75);

  // A short hypothesis loses the missing frames entirely.
  TokenGrid short_hyp = ref;
  short_hyp.n_frames = 1;
  short_hyp.bins = {1, 2};
  EXPECT_DOUBLE_EQ(bin_match_fraction(ref, short_hyp), 0.5);

  TokenGrid other = ref;
  other.n_mels = 4;
  other.n_frames = 1;
  EXPECT_THROW(bin_match_fraction(ref, other), ArgumentError);

  TokenGrid empty = ref;
  empty.n_frames = 0;
  empty.bins.clear();
  EXPECT_DOUBLE_EQ(bin_match_fraction(empty, empty), 1.0);
  EXPECT_DOUBLE_EQ(bin_match_fraction(empty, ref), 0.0);
}

// Runs the codec end to end on random data and checks the reported SNR
// against a quantizer and SNR estimate written from scratch in the test.
TEST(SnrTest, AgreesWithIndependentQuantizerSimulation) {
  Rng rng = make_rng(31, "sim");
  for (int trial = 0; trial < 3; ++trial) {
    MelSpectrogram mel = make_mel(40, 16, std::vector<double>(640));
    for (auto& v : mel.values) v = rng.uniform(-23.0, 3.0);
    FrontendConfig frontend;
    frontend.n_mels = 16;
    const Codebook cb = fit_codebook({mel}, 4, frontend);
    const MelSpectrogram recon = detokenize(tokenize(mel, cb), cb);

    const double delta = (cb.max_val - cb.min_val) / 16.0;
    double mean = 0.0;
    for (const double v : mel.values) mean += v;
    mean /= static_cast<double>(mel.values.size());
    double sig = 0.0, err = 0.0;
    for (const double v : mel.values) {
      long long j = std::llround((v - cb.min_val) / delta);
      j = std::clamp<long long>(j, 0, 15);
      const double q = cb.min_val + static_cast<double>(j) * delta;
      sig += (v - mean) * (v - mean);
      err += (v - q) * (v - q);
    }
    const double expected = 10.0 * std::log10(sig / err);
    EXPECT_NEAR(quantization_snr_db(mel, recon), expected, 1e-9);
  }
}

}  // namespace
}  // namespace dmel

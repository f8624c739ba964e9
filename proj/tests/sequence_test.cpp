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

#include "dmel/sequence.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dmel/errors.hpp"
#include "dmel/rng.hpp"

namespace dmel {
namespace {

TokenGrid make_grid(int64_t frames, int mels, int bits) {
  TokenGrid g;
  g.n_frames = frames;
  g.n_mels = mels;
  g.bits = bits;
  g.frame_rate_hz = 40;
  g.bins.resize(static_cast<size_t>(frames) * mels);
  for (size_t i = 0; i < g.bins.size(); ++i) g.bins[i] = static_cast<uint16_t>(i % (1u << bits));
  return g;
}

TEST(VocabTest, SpecialsAndCharacterIds) {
  const TextVocab v = TextVocab::from_chars("abc");
  EXPECT_EQ(v.size(), 7);
  EXPECT_EQ(v.id_of('a'), 4);
  EXPECT_EQ(v.id_of('b'), 5);
  EXPECT_EQ(v.id_of('c'), 6);
  EXPECT_EQ(v.id_of('z'), TextVocab::kUnk);
  EXPECT_EQ(v.encode("cab"), (std::vector<int>{6, 4, 5}));
  EXPECT_EQ(v.decode({6, 4, 5}), "cab");
  // Specials and out-of-range ids vanish on decode.
  EXPECT_EQ(v.decode({TextVocab::kBos, 4, TextVocab::kEos, 99, 5}), "ab");
  EXPECT_EQ(v.encode("az"), (std::vector<int>{4, TextVocab::kUnk}));
  EXPECT_THROW(TextVocab::from_chars("aba"), ArgumentError);
}

TEST(VocabTest, FileRoundTripAndRejects) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "dmel_vocab_test";
  std::filesystem::create_directories(dir);
  const TextVocab v = TextVocab::from_chars("abc'xyz ");
  const std::string path = (dir / "vocab.txt").string();
  save_vocab(v, path);
  EXPECT_TRUE(load_vocab(path) == v);

  const std::string bad1 = (dir / "bad1.txt").string();
  std::ofstream(bad1) << "<bos>\n<eos>\n";
  EXPECT_THROW(load_vocab(bad1), FormatError);

  const std::string bad2 = (dir / "bad2.txt").string();
  std::ofstream(bad2) << "<bos>\n<eos>\n<pad>\n<unk>\nab\n";
  EXPECT_THROW(load_vocab(bad2), FormatError);

  EXPECT_THROW(load_vocab((dir / "missing.txt").string()), IoError);
  std::filesystem::remove_all(dir);
}

TEST(BuildAsrTest, LayoutPositionsAndSupervision) {
  const TokenGrid grid = make_grid(3, 2, 4);
  const std::vector<int> text = {4, 5};
  const SequenceBatch b = build_asr(grid, text);

  ASSERT_EQ(b.length(), 9);
  EXPECT_EQ(b.n_mels, 2);
  EXPECT_EQ(b.bits, 4);

  const std::vector<Modality> want = {
      Modality::bos_speech, Modality::speech,   Modality::speech,
      Modality::speech,     Modality::eos_speech, Modality::bos_text,
      Modality::text,       Modality::text,     Modality::eos_text,
  };
  for (size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(b.items[i].modality, want[i]) << "item " << i;
    EXPECT_EQ(b.items[i].position, static_cast<int>(i)) << "item " << i;
  }
  // Supervision sits on the text characters and the closing <eos_text>.
  for (size_t i = 0; i < want.size(); ++i) {
    const float expected = (i >= 6) ? 1.f : 0.f;
    EXPECT_EQ(b.items[i].loss_weight, expected) << "item " << i;
  }
  EXPECT_EQ(b.items[1].bins, (std::vector<uint16_t>{0, 1}));
  EXPECT_EQ(b.items[2].bins, (std::vector<uint16_t>{2, 3}));
  EXPECT_EQ(b.items[3].bins, (std::vector<uint16_t>{4, 5}));
  EXPECT_EQ(b.items[5].text_id, TextVocab::kBos);
  EXPECT_EQ(b.items[6].text_id, 4);
  EXPECT_EQ(b.items[7].text_id, 5);
  EXPECT_EQ(b.items[8].text_id, TextVocab::kEos);

  EXPECT_THROW(build_asr(make_grid(0, 2, 4), text), ArgumentError);
}

TEST(BuildTtsTest, LayoutPositionsAndSupervision) {
  const TokenGrid grid = make_grid(3, 2, 4);
  const std::vector<int> text = {4, 5};
  const std::vector<double> speaker(kSpeakerDim, 0.25);
  const SequenceBatch b = build_tts(speaker, text, grid);

  ASSERT_EQ(b.length(), 10);
  const std::vector<Modality> want = {
      Modality::speaker, Modality::bos_text, Modality::text,
      Modality::text,    Modality::eos_text, Modality::bos_speech,
      Modality::speech,  Modality::speech,   Modality::speech,
      Modality::eos_speech,
  };
  for (size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(b.items[i].modality, want[i]) << "item " << i;
    // The speaker vector occupies a rotary position of its own.
    EXPECT_EQ(b.items[i].position, static_cast<int>(i)) << "item " << i;
  }
  for (size_t i = 0; i < want.size(); ++i) {
    const float expected = (i >= 6) ? 1.f : 0.f;
    EXPECT_EQ(b.items[i].loss_weight, expected) << "item " << i;
  }
  EXPECT_EQ(b.items[0].speaker.size(), static_cast<size_t>(kSpeakerDim));
  EXPECT_EQ(b.items[6].bins, (std::vector<uint16_t>{0, 1}));

  EXPECT_THROW(build_tts(speaker, {}, grid), ArgumentError);
  EXPECT_THROW(build_tts(std::vector<double>(100, 0.0), text, grid), ArgumentError);
}

TEST(SpanMaskTest, GateAndCoverage) {
  Rng off = make_rng(5, "gate-off");
  const std::vector<bool> none = plan_span_mask(50, 0.0, 3, 0.5, off);
  EXPECT_EQ(none.size(), 50u);
  EXPECT_EQ(std::count(none.begin(), none.end(), true), 0);

  Rng on = make_rng(5, "gate-on");
  const std::vector<bool> some = plan_span_mask(100, 1.0, 3, 0.3, on);
  const int64_t n_masked = std::count(some.begin(), some.end(), true);
  EXPECT_GE(n_masked, 30);
  EXPECT_LE(n_masked, 100);

  Rng zero = make_rng(5, "empty");
  EXPECT_TRUE(plan_span_mask(0, 1.0, 3, 0.5, zero).empty());

  Rng a = make_rng(9, "det");
  Rng b = make_rng(9, "det");
  EXPECT_EQ(plan_span_mask(64, 0.7, 3, 0.5, a), plan_span_mask(64, 0.7, 3, 0.5, b));

  Rng bad = make_rng(5, "bad");
  EXPECT_THROW(plan_span_mask(10, 1.5, 3, 0.5, bad), ArgumentError);
  EXPECT_THROW(plan_span_mask(10, 0.5, 0, 0.5, bad), ArgumentError);
  EXPECT_THROW(plan_span_mask(10, 0.5, 3, -0.1, bad), ArgumentError);
}

TEST(SpanMaskTest, MeanMaskedFractionMatchesExpectation) {
  Rng rng = make_rng(6, "mask-mc");
  const int64_t n = 50;
  const int trials = 10000;
  int64_t total = 0;
  for (int t = 0; t < trials; ++t) {
    const std::vector<bool> m = plan_span_mask(n, 0.8, 3, 0.5, rng);
    total += std::count(m.begin(), m.end(), true);
  }
  const double mean_fraction = static_cast<double>(total) / static_cast<double>(trials * n);
  // Gate probability times target ratio; the span placer overshoots only
  // slightly, so the band is tight.
  EXPECT_NEAR(mean_fraction, 0.4, 0.02);
}

TEST(SpanMaskTest, UnitMeanSpansStillCover) {
  Rng rng = make_rng(7, "unit");
  const std::vector<bool> m = plan_span_mask(40, 1.0, 1, 0.5, rng);
  EXPECT_GE(std::count(m.begin(), m.end(), true), 20);
}

TEST(SpecAugmentTest, FillsMaskedCellsAndBoundsTimeWidth) {
  TokenGrid g = make_grid(10, 80, 4);
  // Use a fill bin no original cell holds.
  for (auto& b : g.bins) b = static_cast<uint16_t>(b % 7);
  const uint16_t fill = 9;
  Rng rng = make_rng(11, "augment");
  const TokenGrid out = spec_augment(g, fill, rng);

  EXPECT_EQ(out.n_frames, g.n_frames);
  EXPECT_EQ(out.n_mels, g.n_mels);
  EXPECT_EQ(out.bits, g.bits);
  int changed = 0;
  int full_frames = 0;
  for (int64_t t = 0; t < g.n_frames; ++t) {
    int row = 0;
    for (int c = 0; c < g.n_mels; ++c) {
      if (out.at(t, c) != g.at(t, c)) {
        EXPECT_EQ(out.at(t, c), fill);
        ++row;
      }
    }
    changed += row;
    if (row == g.n_mels) ++full_frames;
  }
  EXPECT_GT(changed, 0);
  // At 10 frames each time mask is at most one frame wide, and frequency
  // masks never blank a whole 80-channel frame.
  EXPECT_LE(full_frames, 10);

  Rng r1 = make_rng(11, "augment");
  Rng r2 = make_rng(11, "augment");
  EXPECT_EQ(spec_augment(g, fill, r1).bins, spec_augment(g, fill, r2).bins);
}

TEST(ManifestTest, RoundTripAndRelativeResolution) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "dmel_manifest_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "train.tsv").string();

  std::vector<ManifestEntry> entries;
  entries.push_back({(dir / "a.wav").string(), "hello there", "spk0"});
  entries.push_back({(dir / "b.wav").string(), "bye", "spk1"});
  save_manifest(entries, path);
  const std::vector<ManifestEntry> back = load_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].audio_path, entries[0].audio_path);
  EXPECT_EQ(back[0].transcript, "hello there");
  EXPECT_EQ(back[1].speaker_id, "spk1");

  // Relative paths resolve against the manifest directory.
  std::ofstream(path, std::ios::trunc) << "clips/c.wav\ttext here\tspk2\n\n";
  const std::vector<ManifestEntry> rel = load_manifest(path);
  ASSERT_EQ(rel.size(), 1u);
  EXPECT_EQ(rel[0].audio_path, (dir / "clips/c.wav").string());

  std::ofstream(path, std::ios::trunc) << "only\ttwo fields\n";
  EXPECT_THROW(load_manifest(path), FormatError);

  EXPECT_THROW(save_manifest({{"a\tb.wav", "t", "s"}}, path), ArgumentError);
  EXPECT_THROW(load_manifest((dir / "missing.tsv").string()), IoError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace dmel

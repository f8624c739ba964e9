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
// Sequence assembly for the multimodal decoder: character vocabulary,
// speech/text sequence layouts for recognition and synthesis, span
// masking, SpecAugment-style input corruption, and manifest/vocab files.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dmel/codec.hpp"
#include "dmel/errors.hpp"
#include "dmel/rng.hpp"

namespace dmel {

inline constexpr int kSpeakerDim = 512;

// Character vocabulary. Ids 0-3 are the specials <bos>, <eos>, <pad>,
// <unk>; characters start at id 4 in insertion order.
class TextVocab {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;
  static constexpr int kUnk = 3;
  static constexpr int kFirstChar = 4;

  TextVocab() { char_to_id_.fill(-1); }

  static TextVocab from_chars(const std::string& chars) {
    TextVocab v;
    for (const char c : chars) v.add_char(c);
    return v;
  }

  void add_char(char c) {
    const auto idx = static_cast<unsigned char>(c);
    if (char_to_id_[idx] >= 0) throw ArgumentError("vocab: duplicate character");
    char_to_id_[idx] = kFirstChar + static_cast<int>(chars_.size());
    chars_.push_back(c);
  }

  int size() const { return kFirstChar + static_cast<int>(chars_.size()); }
  const std::string& chars() const { return chars_; }

  int id_of(char c) const {
    const int id = char_to_id_[static_cast<unsigned char>(c)];
    return id >= 0 ? id : kUnk;
  }

  std::vector<int> encode(const std::string& s) const {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (const char c : s) ids.push_back(id_of(c));
    return ids;
  }

  // Drops special ids; unknown ids in [4, size) map back to their character.
  std::string decode(const std::vector<int>& ids) const {
    std::string s;
    for (const int id : ids) {
      if (id >= kFirstChar && id < size()) s.push_back(chars_[id - kFirstChar]);
    }
    return s;
  }

  bool operator==(const TextVocab& o) const { return chars_ == o.chars_; }

 private:
  std::string chars_;
  std::array<int, 256> char_to_id_;
};

enum class Modality : uint8_t {
  speaker,
  text,
  speech,
  bos_text,
  eos_text,
  bos_speech,
  eos_speech,
};

struct SequenceItem {
  Modality modality = Modality::text;
  int position = 0;        // global position, used for rotary angles
  float loss_weight = 0.f; // 1 when this position is a supervised target
  bool masked = false;     // input embedding replaced by the mask vector
  int text_id = -1;                // text / bos_text / eos_text payload
  std::vector<uint16_t> bins;      // speech frame payload, one bin per channel
  std::vector<double> speaker;     // speaker payload, kSpeakerDim floats
};

struct SequenceBatch {
  int n_mels = 0;
  int bits = 0;
  std::vector<SequenceItem> items;

  int64_t length() const { return static_cast<int64_t>(items.size()); }
};

// Recognition layout: <bos_speech>, speech frames, <eos_speech>,
// <bos_text>, text, <eos_text>. Supervision covers the text characters and
// the closing <eos_text> only.
inline SequenceBatch build_asr(const TokenGrid& grid, const std::vector<int>& text_ids) {
  if (grid.n_frames == 0) throw ArgumentError("build_asr: empty token grid");
  SequenceBatch b;
  b.n_mels = grid.n_mels;
  b.bits = grid.bits;
  b.items.reserve(static_cast<size_t>(grid.n_frames) + text_ids.size() + 4);
  int pos = 0;
  auto push = [&](SequenceItem item) {
    item.position = pos++;
    b.items.push_back(std::move(item));
  };
  push({.modality = Modality::bos_speech});
  for (int64_t t = 0; t < grid.n_frames; ++t) {
    SequenceItem it{.modality = Modality::speech};
    it.bins.assign(grid.bins.begin() + t * grid.n_mels, grid.bins.begin() + (t + 1) * grid.n_mels);
    push(std::move(it));
  }
  push({.modality = Modality::eos_speech});
  push({.modality = Modality::bos_text, .text_id = TextVocab::kBos});
  for (const int id : text_ids) {
    push({.modality = Modality::text, .loss_weight = 1.f, .text_id = id});
  }
  push({.modality = Modality::eos_text, .loss_weight = 1.f, .text_id = TextVocab::kEos});
  return b;
}

// Synthesis layout: speaker, <bos_text>, text, <eos_text>, <bos_speech>,
// speech frames, <eos_speech>. Supervision covers the speech frames and
// the closing <eos_speech> only.
inline SequenceBatch build_tts(const std::vector<double>& speaker, const std::vector<int>& text_ids,
                               const TokenGrid& grid) {
  if (text_ids.empty()) throw ArgumentError("build_tts: empty text");
  if (speaker.size() != kSpeakerDim) throw ArgumentError("build_tts: speaker vector must have 512 entries");
  SequenceBatch b;
  b.n_mels = grid.n_mels;
  b.bits = grid.bits;
  b.items.reserve(static_cast<size_t>(grid.n_frames) + text_ids.size() + 5);
  int pos = 0;
  auto push = [&](SequenceItem item) {
    item.position = pos++;
    b.items.push_back(std::move(item));
  };
  SequenceItem spk{.modality = Modality::speaker};
  spk.speaker = speaker;
  push(std::move(spk));
  push({.modality = Modality::bos_text, .text_id = TextVocab::kBos});
  for (const int id : text_ids) {
    push({.modality = Modality::text, .text_id = id});
  }
  push({.modality = Modality::eos_text, .text_id = TextVocab::kEos});
  push({.modality = Modality::bos_speech});
  for (int64_t t = 0; t < grid.n_frames; ++t) {
    SequenceItem it{.modality = Modality::speech, .loss_weight = 1.f};
    it.bins.assign(grid.bins.begin() + t * grid.n_mels, grid.bins.begin() + (t + 1) * grid.n_mels);
    push(std::move(it));
  }
  push({.modality = Modality::eos_speech, .loss_weight = 1.f});
  return b;
}

// Non-overlapping random spans totalling at least ratio*n positions. A
// single gate draw decides (with probability p_apply) whether any masking
// happens. Span lengths are geometric with the given mean, starts are
// uniform; spans are clipped at the right edge and rejected on overlap.
// Placement stops once the target is reached or after 100 consecutive
// rejections. Draw order is pinned: gate, then (length, start) per span.
inline std::vector<bool> plan_span_mask(int64_t n, double p_apply, int mean_span, double ratio, Rng& rng) {
  if (p_apply < 0.0 || p_apply > 1.0) throw ArgumentError("plan_span_mask: p_apply outside [0, 1]");
  if (ratio < 0.0 || ratio > 1.0) throw ArgumentError("plan_span_mask: ratio outside [0, 1]");
  if (mean_span < 1) throw ArgumentError("plan_span_mask: mean_span must be >= 1");
  std::vector<bool> mask(static_cast<size_t>(n), false);
  if (n == 0) return mask;
  if (rng.uniform() >= p_apply) return mask;

  const double target = ratio * static_cast<double>(n);
  int64_t masked = 0;
  int consecutive_failures = 0;
  while (masked < target && consecutive_failures < 100) {
    int64_t len = 1;
    if (mean_span > 1) {
      const double u = rng.uniform();
      len = 1 + static_cast<int64_t>(std::floor(std::log1p(-u) / std::log1p(-1.0 / mean_span)));
    } else {
      rng.uniform();  // keep the draw count independent of mean_span
    }
    const int64_t start = rng.uniform_int(n);
    len = std::min(len, n - start);
    bool overlaps = false;
    for (int64_t i = start; i < start + len; ++i) {
      if (mask[static_cast<size_t>(i)]) {
        overlaps = true;
        break;
      }
    }
    if (overlaps) {
      ++consecutive_failures;
      continue;
    }
    for (int64_t i = start; i < start + len; ++i) mask[static_cast<size_t>(i)] = true;
    masked += len;
    consecutive_failures = 0;
  }
  return mask;
}

struct SpecAugmentConfig {
  int n_freq_masks = 2;
  int max_freq_width = 30;
  int n_time_masks = 10;
  int max_time_width = 50;
  double time_ratio = 0.1;  // caps time-mask width at time_ratio * n_frames
};

// Frequency and time band corruption for recognition inputs: bands are
// overwritten with a fixed fill bin (the corpus mean). Widths are uniform
// in [0, max]; zero-width draws leave the grid untouched. Draw order is
// pinned: per mask, width then start; frequency masks before time masks.
inline TokenGrid spec_augment(const TokenGrid& g, uint16_t fill_bin, Rng& rng,
                              const SpecAugmentConfig& cfg = {}) {
  TokenGrid out = g;
  for (int i = 0; i < cfg.n_freq_masks; ++i) {
    const int64_t w = rng.uniform_int(std::min<int64_t>(cfg.max_freq_width, g.n_mels) + 1);
    const int64_t start = rng.uniform_int(g.n_mels - w + 1);
    for (int64_t t = 0; t < g.n_frames; ++t) {
      for (int64_t c = start; c < start + w; ++c) out.at(t, static_cast<int>(c)) = fill_bin;
    }
  }
  const int64_t time_cap =
      std::min<int64_t>(cfg.max_time_width, static_cast<int64_t>(cfg.time_ratio * static_cast<double>(g.n_frames)));
  for (int i = 0; i < cfg.n_time_masks; ++i) {
    if (g.n_frames == 0) break;
    const int64_t w = rng.uniform_int(time_cap + 1);
    const int64_t start = rng.uniform_int(g.n_frames - w + 1);
    for (int64_t t = start; t < start + w; ++t) {
      for (int c = 0; c < g.n_mels; ++c) out.at(t, c) = fill_bin;
    }
  }
  return out;
}

// --- Vocabulary and manifest files -------------------------------------------

// One line per entry: the four special names, then one character per line.
inline void save_vocab(const TextVocab& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << "<bos>\n<eos>\n<pad>\n<unk>\n";
  for (const char c : v.chars()) out << c << "\n";
  if (!out) throw IoError(path + ": write failed");
}

inline TextVocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  const std::array<std::string, 4> expected = {"<bos>", "<eos>", "<pad>", "<unk>"};
  std::string line;
  for (const auto& want : expected) {
    if (!std::getline(in, line)) throw FormatError(path + ": vocab file is missing special tokens");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != want) throw FormatError(path + ": expected special '" + want + "', found '" + line + "'");
  }
  TextVocab v;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() != 1) throw FormatError(path + ": vocab lines after the specials must hold one character");
    v.add_char(line[0]);
  }
  return v;
}

struct ManifestEntry {
  std::string audio_path;
  std::string transcript;
  std::string speaker_id;
};

// Tab-separated: audio path, transcript, speaker id. Relative audio paths
// are resolved against the manifest's own directory on load.
inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
    }
    ManifestEntry e;
    e.audio_path = line.substr(0, t1);
    e.transcript = line.substr(t1 + 1, t2 - t1 - 1);
    e.speaker_id = line.substr(t2 + 1);
    if (e.audio_path.empty()) throw FormatError(path + ":" + std::to_string(line_no) + ": empty audio path");
    std::filesystem::path ap(e.audio_path);
    if (ap.is_relative()) e.audio_path = (base / ap).string();
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  for (const auto& e : entries) {
    if (e.audio_path.find('\t') != std::string::npos || e.transcript.find('\t') != std::string::npos ||
        e.speaker_id.find('\t') != std::string::npos) {
      throw ArgumentError("save_manifest: fields must not contain tabs");
    }
    out << e.audio_path << "\t" << e.transcript << "\t" << e.speaker_id << "\n";
  }
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace dmel

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
// Training: Adam with warmup + cosine decay, span masking and SpecAugment
// on the fly, checkpoints that capture everything needed to resume
// bit-identically, and a small synthetic speech corpus for end-to-end runs.
// Randomness is rederived per step from (seed, purpose tag, step, slot), so
// a resumed run replays the exact draw sequence of an uninterrupted one.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "dmel/audio.hpp"
#include "dmel/codec.hpp"
#include "dmel/dsp.hpp"
#include "dmel/errors.hpp"
#include "dmel/model.hpp"
#include "dmel/rng.hpp"
#include "dmel/sequence.hpp"
#include "dmel/token_io.hpp"

namespace dmel {

enum class Task : uint8_t { asr, tts, joint };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::asr: return "asr";
    case Task::tts: return "tts";
    case Task::joint: return "joint";
  }
  return "asr";
}

inline Task parse_task(const std::string& s) {
  if (s == "asr") return Task::asr;
  if (s == "tts") return Task::tts;
  if (s == "joint") return Task::joint;
  throw ArgumentError("unknown task '" + s + "' (expected asr, tts, or joint)");
}

struct TrainConfig {
  Task task = Task::asr;
  double lr = 1e-3;
  int64_t warmup_steps = 4000;
  int64_t total_steps = 10000;
  double grad_clip = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;
  uint64_t seed = 0;
  // Span masking over speech frames (both tasks) and, optionally, text.
  double mask_p_apply = 0.8;
  int mask_mean_span = 3;
  double mask_ratio = 0.5;
  double text_mask_p_apply = 0.0;
  bool use_spec_augment = true;  // applied to ASR inputs only
  int64_t checkpoint_every = 500;

  bool operator==(const TrainConfig&) const = default;

  // Task-dependent defaults: TTS warms up longer and clips less tightly.
  static TrainConfig for_task(Task t) {
    TrainConfig c;
    c.task = t;
    c.warmup_steps = t == Task::tts ? 5000 : 4000;
    c.grad_clip = t == Task::tts ? 1.0 : 0.1;
    return c;
  }

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (warmup_steps < 0 || warmup_steps >= total_steps) {
      throw ConfigError("train: warmup_steps must be in [0, total_steps)");
    }
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
      throw ConfigError("train: adam betas must be in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
    if (mask_p_apply < 0.0 || mask_p_apply > 1.0 || text_mask_p_apply < 0.0 || text_mask_p_apply > 1.0) {
      throw ConfigError("train: mask probabilities must be in [0, 1]");
    }
    if (mask_mean_span < 1) throw ConfigError("train: mask_mean_span must be >= 1");
    if (mask_ratio < 0.0 || mask_ratio > 1.0) throw ConfigError("train: mask_ratio must be in [0, 1]");
    if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
  }
};

// Linear warmup from 0, cosine decay to 0 at total_steps, 0 afterwards.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ArgumentError("lr_at: step must be >= 0");
  if (step >= cfg.total_steps) return 0.0;
  if (step <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return cfg.lr;
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct AdamState {
  Parameters<float> m, v;
  int64_t step = 0;  // completed optimizer steps

  void init(const ModelConfig& cfg) {
    m.resize(cfg);
    v.resize(cfg);
    step = 0;
  }
};

namespace train_detail {

template <class T>
inline std::vector<Tensor<T>*> tensor_list(Parameters<T>& p) {
  std::vector<Tensor<T>*> out;
  p.for_each([&out](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

}  // namespace train_detail

inline double global_grad_norm(Parameters<float>& grads) {
  double sq = 0.0;
  grads.for_each([&sq](const std::string&, Tensor<float>& t) {
    for (const float g : t.v) sq += static_cast<double>(g) * static_cast<double>(g);
  });
  return std::sqrt(sq);
}

// Global-norm clip followed by one Adam step (bias-corrected, 1-based t).
inline void adam_update(Parameters<float>& params, Parameters<float>& grads, AdamState& state,
                        const TrainConfig& cfg, double lr) {
  const double norm = global_grad_norm(grads);
  if (!std::isfinite(norm)) throw DivergenceError("training diverged: non-finite gradient norm");
  if (norm > cfg.grad_clip) {
    const float scale = static_cast<float>(cfg.grad_clip / norm);
    grads.for_each([scale](const std::string&, Tensor<float>& t) {
      for (float& g : t.v) g *= scale;
    });
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
  const auto ps = train_detail::tensor_list(params);
  const auto gs = train_detail::tensor_list(grads);
  const auto ms = train_detail::tensor_list(state.m);
  const auto vs = train_detail::tensor_list(state.v);
  for (size_t i = 0; i < ps.size(); ++i) {
    float* p = ps[i]->data();
    const float* g = gs[i]->data();
    float* m = ms[i]->data();
    float* v = vs[i]->data();
    const int64_t n = ps[i]->numel();
    for (int64_t j = 0; j < n; ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg.adam_beta1 * static_cast<double>(m[j]) + (1.0 - cfg.adam_beta1) * gj;
      const double vj = cfg.adam_beta2 * static_cast<double>(v[j]) + (1.0 - cfg.adam_beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.adam_eps);
      p[j] = static_cast<float>(static_cast<double>(p[j]) - update);
    }
  }
}

// --- Checkpoints -------------------------------------------------------------
//
// Binary layout: "DMCK", version byte, u32 metadata length, key=value
// metadata text (configs, vocabulary, codebook, step), u32 tensor count,
// then per tensor: u16 name length + name, u8 rank, u32 dims, f32 data,
// all little-endian. Optimizer moments ride along as adam_m.* / adam_v.*.

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  TextVocab vocab;
  Codebook codebook;
  Parameters<float> params;
  AdamState opt;
  bool has_optimizer = true;
};

namespace ckpt_detail {

inline uint16_t get_u16le(const uint8_t* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }

inline uint32_t get_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) | (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

inline void put_f32le(std::vector<uint8_t>& out, float x) {
  uint32_t u;
  std::memcpy(&u, &x, 4);
  io_detail::put_u32le(out, u);
}

inline float get_f32le(const uint8_t* p) {
  const uint32_t u = get_u32le(p);
  float x;
  std::memcpy(&x, &u, 4);
  return x;
}

inline void append_tensor(std::vector<uint8_t>& out, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xffff) throw ArgumentError("checkpoint: tensor name too long");
  io_detail::put_u16le(out, static_cast<uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(static_cast<uint8_t>(t.shape.size()));
  for (const int64_t d : t.shape) {
    if (d < 0 || d > 0xffffffffLL) throw ArgumentError("checkpoint: tensor dimension out of range");
    io_detail::put_u32le(out, static_cast<uint32_t>(d));
  }
  for (const float x : t.v) put_f32le(out, x);
}

inline std::string encode_meta(const Checkpoint& c) {
  std::string s;
  auto kv = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
  auto kvi = [&kv](const std::string& k, int64_t v) { kv(k, std::to_string(v)); };
  auto kvd = [&kv](const std::string& k, double v) { kv(k, io_detail::format_double(v)); };
  kvi("format_version", kCheckpointFormatVersion);
  kvi("step", c.opt.step);
  kv("task", task_name(c.train.task));
  kvi("model.n_layers", c.model.n_layers);
  kvi("model.n_heads", c.model.n_heads);
  kvi("model.d_model", c.model.d_model);
  kvi("model.d_channel_embed", c.model.d_channel_embed);
  kvi("model.bits", c.model.bits);
  kvi("model.n_mels", c.model.n_mels);
  kvi("model.text_vocab", c.model.text_vocab);
  kvd("model.dropout_residual", c.model.dropout_residual);
  kvd("model.dropout_attention", c.model.dropout_attention);
  kvd("model.dropout_embedding", c.model.dropout_embedding);
  kvd("model.dropout_positional", c.model.dropout_positional);
  kvi("model.max_positions", c.model.max_positions);
  kvd("model.rope_base", c.model.rope_base);
  kvd("train.lr", c.train.lr);
  kvi("train.warmup_steps", c.train.warmup_steps);
  kvi("train.total_steps", c.train.total_steps);
  kvd("train.grad_clip", c.train.grad_clip);
  kvd("train.adam_beta1", c.train.adam_beta1);
  kvd("train.adam_beta2", c.train.adam_beta2);
  kvd("train.adam_eps", c.train.adam_eps);
  kvi("train.batch_size", c.train.batch_size);
  kvi("train.seed", static_cast<int64_t>(c.train.seed));
  kvd("train.mask_p_apply", c.train.mask_p_apply);
  kvi("train.mask_mean_span", c.train.mask_mean_span);
  kvd("train.mask_ratio", c.train.mask_ratio);
  kvd("train.text_mask_p_apply", c.train.text_mask_p_apply);
  kvi("train.use_spec_augment", c.train.use_spec_augment ? 1 : 0);
  kvi("train.checkpoint_every", c.train.checkpoint_every);
  kvi("has_optimizer", c.has_optimizer ? 1 : 0);
  // Vocabulary as decimal character codes, comma separated.
  std::string chars;
  for (const char ch : c.vocab.chars()) {
    if (!chars.empty()) chars += ',';
    chars += std::to_string(static_cast<int>(static_cast<unsigned char>(ch)));
  }
  kv("vocab_chars", chars);
  s += "codebook.begin\n";
  s += encode_codebook(c.codebook);
  s += "codebook.end\n";
  return s;
}

}  // namespace ckpt_detail

inline std::vector<uint8_t> encode_checkpoint(const Checkpoint& c) {
  c.model.validate();
  c.train.validate();
  c.codebook.validate();
  if (c.model.text_vocab != TextVocab::kFirstChar + static_cast<int>(c.vocab.chars().size())) {
    throw ArgumentError("checkpoint: vocabulary size does not match model.text_vocab");
  }
  std::vector<uint8_t> out;
  out.push_back('D');
  out.push_back('M');
  out.push_back('C');
  out.push_back('K');
  out.push_back(static_cast<uint8_t>(kCheckpointFormatVersion));
  const std::string meta = ckpt_detail::encode_meta(c);
  io_detail::put_u32le(out, static_cast<uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());

  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  c.params.for_each([&tensors](const std::string& n, const Tensor<float>& t) { tensors.emplace_back(n, &t); });
  if (c.has_optimizer) {
    c.opt.m.for_each([&tensors](const std::string& n, const Tensor<float>& t) {
      tensors.emplace_back("adam_m." + n, &t);
    });
    c.opt.v.for_each([&tensors](const std::string& n, const Tensor<float>& t) {
      tensors.emplace_back("adam_v." + n, &t);
    });
  }
  io_detail::put_u32le(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) ckpt_detail::append_tensor(out, name, *t);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes, const std::string& origin = "<memory>") {
  auto fail = [&origin](const std::string& msg) -> FormatError { return FormatError(origin + ": " + msg); };
  if (bytes.size() < 9) throw fail("truncated checkpoint header");
  if (std::memcmp(bytes.data(), "DMCK", 4) != 0) throw fail("not a checkpoint file (bad magic)");
  if (bytes[4] != kCheckpointFormatVersion) {
    throw fail("unsupported checkpoint version " + std::to_string(bytes[4]));
  }
  const uint32_t meta_len = ckpt_detail::get_u32le(bytes.data() + 5);
  size_t pos = 9;
  if (bytes.size() < pos + meta_len) throw fail("truncated metadata");
  const std::string meta(bytes.begin() + static_cast<int64_t>(pos), bytes.begin() + static_cast<int64_t>(pos + meta_len));
  pos += meta_len;

  // Split out the embedded codebook block, then parse the rest as key=value.
  std::map<std::string, std::string> kv;
  std::string codebook_text;
  {
    size_t line_start = 0;
    bool in_codebook = false;
    bool saw_codebook = false;
    while (line_start <= meta.size()) {
      size_t nl = meta.find('\n', line_start);
      if (nl == std::string::npos) nl = meta.size();
      std::string line = meta.substr(line_start, nl - line_start);
      line_start = nl + 1;
      if (line.empty()) {
        if (nl >= meta.size()) break;
        continue;
      }
      if (line == "codebook.begin") {
        in_codebook = true;
        saw_codebook = true;
        continue;
      }
      if (line == "codebook.end") {
        in_codebook = false;
        continue;
      }
      if (in_codebook) {
        codebook_text += line + "\n";
        continue;
      }
      const size_t eq = line.find('=');
      if (eq == std::string::npos) throw fail("malformed metadata line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    if (in_codebook || !saw_codebook) throw fail("missing embedded codebook");
  }
  auto need = [&kv, &fail](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw fail("missing required key '" + std::string(key) + "'");
    return it->second;
  };
  auto needi = [&need](const char* key) { return io_detail::parse_int(need(key), key); };
  auto needd = [&need](const char* key) { return io_detail::parse_double(need(key), key); };

  if (needi("format_version") != kCheckpointFormatVersion) throw fail("unsupported metadata format version");

  Checkpoint c;
  c.model.n_layers = static_cast<int>(needi("model.n_layers"));
  c.model.n_heads = static_cast<int>(needi("model.n_heads"));
  c.model.d_model = static_cast<int>(needi("model.d_model"));
  c.model.d_channel_embed = static_cast<int>(needi("model.d_channel_embed"));
  c.model.bits = static_cast<int>(needi("model.bits"));
  c.model.n_mels = static_cast<int>(needi("model.n_mels"));
  c.model.text_vocab = static_cast<int>(needi("model.text_vocab"));
  c.model.dropout_residual = needd("model.dropout_residual");
  c.model.dropout_attention = needd("model.dropout_attention");
  c.model.dropout_embedding = needd("model.dropout_embedding");
  c.model.dropout_positional = needd("model.dropout_positional");
  c.model.max_positions = static_cast<int>(needi("model.max_positions"));
  c.model.rope_base = needd("model.rope_base");
  try {
    c.train.task = parse_task(need("task"));
  } catch (const ArgumentError& e) {
    throw fail(e.what());
  }
  c.train.lr = needd("train.lr");
  c.train.warmup_steps = needi("train.warmup_steps");
  c.train.total_steps = needi("train.total_steps");
  c.train.grad_clip = needd("train.grad_clip");
  c.train.adam_beta1 = needd("train.adam_beta1");
  c.train.adam_beta2 = needd("train.adam_beta2");
  c.train.adam_eps = needd("train.adam_eps");
  c.train.batch_size = static_cast<int>(needi("train.batch_size"));
  c.train.seed = static_cast<uint64_t>(needi("train.seed"));
  c.train.mask_p_apply = needd("train.mask_p_apply");
  c.train.mask_mean_span = static_cast<int>(needi("train.mask_mean_span"));
  c.train.mask_ratio = needd("train.mask_ratio");
  c.train.text_mask_p_apply = needd("train.text_mask_p_apply");
  c.train.use_spec_augment = needi("train.use_spec_augment") != 0;
  c.train.checkpoint_every = needi("train.checkpoint_every");
  c.has_optimizer = needi("has_optimizer") != 0;

  {
    const std::string& chars = need("vocab_chars");
    std::string decoded;
    size_t start = 0;
    while (start < chars.size()) {
      size_t comma = chars.find(',', start);
      if (comma == std::string::npos) comma = chars.size();
      const int64_t code = io_detail::parse_int(chars.substr(start, comma - start), "vocab_chars");
      if (code < 1 || code > 255) throw fail("vocab character code out of range");
      decoded += static_cast<char>(code);
      start = comma + 1;
    }
    c.vocab = TextVocab::from_chars(decoded);
  }
  try {
    c.codebook = decode_codebook(codebook_text, origin + " (embedded codebook)");
    c.model.validate();
    c.train.validate();
  } catch (const ConfigError& e) {
    throw fail(e.what());
  }
  if (c.model.text_vocab != TextVocab::kFirstChar + static_cast<int>(c.vocab.chars().size())) {
    throw fail("vocabulary size does not match model.text_vocab");
  }

  c.params.resize(c.model);
  c.opt.init(c.model);
  c.opt.step = needi("step");
  if (c.opt.step < 0) throw fail("negative step");

  if (bytes.size() < pos + 4) throw fail("truncated tensor table");
  const uint32_t n_tensors = ckpt_detail::get_u32le(bytes.data() + pos);
  pos += 4;
  std::map<std::string, std::pair<std::vector<int64_t>, std::vector<float>>> loaded;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    if (bytes.size() < pos + 2) throw fail("truncated tensor name");
    const uint16_t name_len = ckpt_detail::get_u16le(bytes.data() + pos);
    pos += 2;
    if (bytes.size() < pos + name_len + 1) throw fail("truncated tensor header");
    const std::string name(bytes.begin() + static_cast<int64_t>(pos),
                           bytes.begin() + static_cast<int64_t>(pos + name_len));
    pos += name_len;
    const uint8_t ndim = bytes[pos++];
    if (bytes.size() < pos + 4ull * ndim) throw fail("truncated tensor dims");
    std::vector<int64_t> dims(ndim);
    int64_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      dims[static_cast<size_t>(d)] = ckpt_detail::get_u32le(bytes.data() + pos);
      pos += 4;
      numel *= dims[static_cast<size_t>(d)];
    }
    if (bytes.size() < pos + 4ull * static_cast<uint64_t>(numel)) throw fail("truncated tensor data");
    std::vector<float> data(static_cast<size_t>(numel));
    for (int64_t j = 0; j < numel; ++j) {
      data[static_cast<size_t>(j)] = ckpt_detail::get_f32le(bytes.data() + pos);
      pos += 4;
    }
    if (!loaded.emplace(name, std::make_pair(std::move(dims), std::move(data))).second) {
      throw fail("duplicate tensor '" + name + "'");
    }
  }
  if (pos != bytes.size()) throw fail("trailing bytes after tensor table");

  auto install = [&loaded, &fail](const std::string& name, Tensor<float>& t) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw fail("missing tensor '" + name + "'");
    if (it->second.first != t.shape) throw fail("tensor '" + name + "' has unexpected shape");
    t.v = std::move(it->second.second);
    loaded.erase(it);
  };
  c.params.for_each(install);
  if (c.has_optimizer) {
    c.opt.m.for_each([&install](const std::string& n, Tensor<float>& t) { install("adam_m." + n, t); });
    c.opt.v.for_each([&install](const std::string& n, Tensor<float>& t) { install("adam_v." + n, t); });
  }
  if (!loaded.empty()) throw fail("unexpected tensor '" + loaded.begin()->first + "'");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::vector<uint8_t> bytes = encode_checkpoint(c);
  io_detail::write_file(path, bytes.data(), bytes.size());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(io_detail::read_file(path), path);
}

// Directory layout: step-numbered files plus a "latest" pointer holding the
// current file name.
inline std::string checkpoint_file_name(int64_t step) {
  std::string n = std::to_string(step);
  if (n.size() < 8) n.insert(0, 8 - n.size(), '0');
  return "ckpt-" + n + ".dmck";
}

inline std::string save_checkpoint_dir(const Checkpoint& c, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string name = checkpoint_file_name(c.opt.step);
  const std::filesystem::path path = std::filesystem::path(dir) / name;
  save_checkpoint(c, path.string());
  const std::string pointer = name + "\n";
  io_detail::write_file((std::filesystem::path(dir) / "latest").string(), pointer.data(), pointer.size());
  return path.string();
}

inline Checkpoint load_latest_checkpoint(const std::string& dir) {
  const std::filesystem::path pointer = std::filesystem::path(dir) / "latest";
  const std::vector<uint8_t> bytes = io_detail::read_file(pointer.string());
  std::string name(bytes.begin(), bytes.end());
  while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
  if (name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos) {
    throw FormatError(pointer.string() + ": malformed checkpoint pointer");
  }
  return load_checkpoint((std::filesystem::path(dir) / name).string());
}

// --- Trainer ------------------------------------------------------------------

struct TrainItem {
  TokenGrid grid;
  std::vector<int> text_ids;
  std::vector<double> speaker;  // 512-entry vector
  int64_t speaker_id = 0;
  std::string transcript;
};

class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, TextVocab vocab, Codebook codebook,
          std::vector<TrainItem> items)
      : model_cfg_(model_cfg), train_cfg_(train_cfg), vocab_(std::move(vocab)), codebook_(std::move(codebook)),
        items_(std::move(items)) {
    model_cfg_.validate();
    train_cfg_.validate();
    check_items();
    Rng rng = make_rng(train_cfg_.seed, "init");
    params_.init(model_cfg_, rng);
    opt_.init(model_cfg_);
    grads_.resize(model_cfg_);
    prepare();
  }

  // Resumes from a checkpoint; training items must be supplied again (the
  // checkpoint stores no data), in the same order as the original run.
  Trainer(const Checkpoint& ckpt, std::vector<TrainItem> items)
      : model_cfg_(ckpt.model), train_cfg_(ckpt.train), vocab_(ckpt.vocab), codebook_(ckpt.codebook),
        items_(std::move(items)) {
    if (!ckpt.has_optimizer) throw ArgumentError("trainer: checkpoint has no optimizer state to resume from");
    model_cfg_.validate();
    train_cfg_.validate();
    check_items();
    params_ = ckpt.params;
    opt_ = ckpt.opt;
    grads_.resize(model_cfg_);
    prepare();
  }

  int64_t steps_done() const { return opt_.step; }
  const std::vector<std::string>& loss_log() const { return loss_log_; }
  Parameters<float>& params() { return params_; }
  const Parameters<float>& params() const { return params_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  const TextVocab& vocab() const { return vocab_; }
  const Codebook& codebook() const { return codebook_; }
  uint16_t fill_bin() const { return fill_bin_; }
  const std::vector<TrainItem>& items() const { return items_; }

  Checkpoint make_checkpoint() const {
    Checkpoint c;
    c.model = model_cfg_;
    c.train = train_cfg_;
    c.vocab = vocab_;
    c.codebook = codebook_;
    c.params = params_;
    c.opt = opt_;
    c.has_optimizer = true;
    return c;
  }

  // One optimization step: pick a task and a length bucket, assemble the
  // augmented/masked batch, average gradients, clip, update. Returns the
  // mean loss. All randomness is a pure function of (seed, step).
  double step() {
    const int64_t s = opt_.step;
    Task task = train_cfg_.task;
    if (task == Task::joint) {
      Rng coin = make_rng(train_cfg_.seed, "task", static_cast<uint64_t>(s));
      task = coin.uniform() < 0.5 ? Task::asr : Task::tts;
    }
    const std::vector<std::vector<size_t>>& buckets = task == Task::asr ? asr_buckets_ : tts_buckets_;
    Rng pick = make_rng(train_cfg_.seed, "bucket", static_cast<uint64_t>(s));
    const std::vector<size_t>& bucket = buckets[static_cast<size_t>(pick.uniform_int(
        static_cast<int64_t>(buckets.size())))];

    grads_.zero();
    double loss_sum = 0.0;
    for (size_t slot = 0; slot < bucket.size(); ++slot) {
      const SequenceBatch batch = assemble(items_[bucket[slot]], task, s, static_cast<uint64_t>(slot));
      Rng drop = make_rng(train_cfg_.seed, "dropout", static_cast<uint64_t>(s), static_cast<uint64_t>(slot));
      loss_sum += loss_and_backward(batch, params_, model_cfg_, grads_, true, &drop);
    }
    const double mean_loss = loss_sum / static_cast<double>(bucket.size());
    if (!std::isfinite(mean_loss)) {
      throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(s));
    }
    const float inv_n = 1.0f / static_cast<float>(bucket.size());
    grads_.for_each([inv_n](const std::string&, Tensor<float>& t) {
      for (float& g : t.v) g *= inv_n;
    });
    adam_update(params_, grads_, opt_, train_cfg_, lr_at(s, train_cfg_));

    std::string line = "step=" + std::to_string(s) + " task=" + task_name(task) +
                       " loss=" + io_detail::format_double(mean_loss);
    loss_log_.push_back(std::move(line));
    return mean_loss;
  }

  // Clean (no dropout, no masking, no augmentation) mean loss over the
  // training items for one task.
  double eval_supervised_loss(Task task) const {
    if (task == Task::joint) throw ArgumentError("eval: pick asr or tts, not joint");
    double total = 0.0;
    for (const TrainItem& item : items_) {
      const SequenceBatch batch = task == Task::asr ? build_asr(item.grid, item.text_ids)
                                                    : build_tts(item.speaker, item.text_ids, item.grid);
      total += loss(batch, params_, model_cfg_);
    }
    return total / static_cast<double>(items_.size());
  }

 private:
  void check_items() {
    if (items_.empty()) throw ArgumentError("trainer: no training items");
    const int expected_vocab = TextVocab::kFirstChar + static_cast<int>(vocab_.chars().size());
    if (model_cfg_.text_vocab != expected_vocab) {
      throw ConfigError("trainer: model.text_vocab must equal 4 + vocabulary characters");
    }
    if (model_cfg_.bits != codebook_.bits || model_cfg_.n_mels != codebook_.n_mels) {
      throw ConfigError("trainer: model bits/n_mels must match the codebook");
    }
    for (const TrainItem& item : items_) {
      if (item.grid.n_mels != model_cfg_.n_mels || item.grid.bits != model_cfg_.bits) {
        throw ArgumentError("trainer: item token grid does not match the model geometry");
      }
      if (item.grid.n_frames == 0) throw ArgumentError("trainer: item has no speech frames");
      if (item.text_ids.empty()) throw ArgumentError("trainer: item has empty text");
      if (item.speaker.size() != kSpeakerDim) throw ArgumentError("trainer: item speaker vector must have 512 entries");
    }
  }

  // Mean token bin over the corpus, the fill value for SpecAugment.
  void prepare() {
    double sum = 0.0;
    int64_t n = 0;
    for (const TrainItem& item : items_) {
      for (const uint16_t b : item.grid.bins) sum += b;
      n += static_cast<int64_t>(item.grid.bins.size());
    }
    const int64_t top = (1ll << model_cfg_.bits) - 1;
    const int64_t mean = n == 0 ? 0 : std::llround(sum / static_cast<double>(n));
    fill_bin_ = static_cast<uint16_t>(std::clamp<int64_t>(mean, 0, top));

    // Length buckets: consecutive runs of batch_size items after sorting by
    // assembled sequence length (ties broken by corpus order).
    auto build_buckets = [this](auto length_of) {
      std::vector<size_t> order(items_.size());
      std::iota(order.begin(), order.end(), size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return length_of(items_[a]) < length_of(items_[b]);
      });
      std::vector<std::vector<size_t>> buckets;
      for (size_t start = 0; start < order.size(); start += static_cast<size_t>(train_cfg_.batch_size)) {
        const size_t end = std::min(order.size(), start + static_cast<size_t>(train_cfg_.batch_size));
        buckets.emplace_back(order.begin() + static_cast<int64_t>(start), order.begin() + static_cast<int64_t>(end));
      }
      return buckets;
    };
    asr_buckets_ = build_buckets([](const TrainItem& it) {
      return it.grid.n_frames + static_cast<int64_t>(it.text_ids.size()) + 4;
    });
    tts_buckets_ = build_buckets([](const TrainItem& it) {
      return it.grid.n_frames + static_cast<int64_t>(it.text_ids.size()) + 4;
    });
  }

  SequenceBatch assemble(const TrainItem& item, Task task, int64_t s, uint64_t slot) const {
    SequenceBatch batch;
    if (task == Task::asr) {
      const TokenGrid* grid = &item.grid;
      TokenGrid augmented;
      if (train_cfg_.use_spec_augment) {
        Rng aug = make_rng(train_cfg_.seed, "augment", static_cast<uint64_t>(s), slot);
        augmented = spec_augment(item.grid, fill_bin_, aug);
        grid = &augmented;
      }
      batch = build_asr(*grid, item.text_ids);
    } else {
      batch = build_tts(item.speaker, item.text_ids, item.grid);
    }
    // Span-mask the speech frames (input side only; targets read the
    // original payloads).
    if (train_cfg_.mask_p_apply > 0.0) {
      Rng mask_rng = make_rng(train_cfg_.seed, "mask", static_cast<uint64_t>(s), slot);
      const std::vector<bool> plan = plan_span_mask(item.grid.n_frames, train_cfg_.mask_p_apply,
                                                    train_cfg_.mask_mean_span, train_cfg_.mask_ratio, mask_rng);
      size_t frame = 0;
      for (SequenceItem& it : batch.items) {
        if (it.modality != Modality::speech) continue;
        if (frame < plan.size() && plan[frame]) it.masked = true;
        ++frame;
      }
    }
    if (train_cfg_.text_mask_p_apply > 0.0) {
      Rng mask_rng = make_rng(train_cfg_.seed, "mask_text", static_cast<uint64_t>(s), slot);
      const std::vector<bool> plan =
          plan_span_mask(static_cast<int64_t>(item.text_ids.size()), train_cfg_.text_mask_p_apply,
                         train_cfg_.mask_mean_span, train_cfg_.mask_ratio, mask_rng);
      size_t idx = 0;
      for (SequenceItem& it : batch.items) {
        if (it.modality != Modality::text) continue;
        if (idx < plan.size() && plan[idx]) it.masked = true;
        ++idx;
      }
    }
    return batch;
  }

  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  TextVocab vocab_;
  Codebook codebook_;
  std::vector<TrainItem> items_;
  Parameters<float> params_;
  Parameters<float> grads_;
  AdamState opt_;
  uint16_t fill_bin_ = 0;
  std::vector<std::vector<size_t>> asr_buckets_, tts_buckets_;
  std::vector<std::string> loss_log_;
};

// --- Synthetic corpus -----------------------------------------------------------
//
// Desk-scale stand-in for a speech dataset: every character is a fixed
// 100 ms two-tone chord whose fundamental is spaced uniformly on the mel
// scale between 200 and 3800 Hz, so distinct characters peak in distinct
// filterbank channels. Speakers differ by a fixed amplitude tilt between
// the two tones. Speaker vectors are derived from the speaker id alone.

inline constexpr uint64_t kSpeakerSeed = 0x646d656c73706bULL;

inline double char_fundamental_hz(int index, int n_chars) {
  if (index < 0 || index >= n_chars) throw ArgumentError("char_fundamental_hz: index out of range");
  const double mel_lo = hz_to_mel(200.0);
  const double mel_hi = hz_to_mel(3800.0);
  const double mel = n_chars == 1
                         ? mel_lo
                         : mel_lo + (mel_hi - mel_lo) * static_cast<double>(index) / static_cast<double>(n_chars - 1);
  return mel_to_hz(mel);
}

inline double speaker_tilt(int64_t speaker_id) {
  Rng r = make_rng(kSpeakerSeed, "tilt", static_cast<uint64_t>(speaker_id));
  return r.uniform(-0.4, 0.4);
}

inline std::vector<double> speaker_vector(int64_t speaker_id) {
  Rng r = make_rng(kSpeakerSeed, "vector", static_cast<uint64_t>(speaker_id));
  std::vector<double> v(kSpeakerDim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kSpeakerDim));
  for (double& x : v) x = r.normal() * scale;
  return v;
}

// 100 ms per character: fundamental plus a 1.5x partial, 5 ms linear ramps
// at segment edges, total amplitude 0.7 split by the speaker tilt.
inline Waveform synth_utterance_wave(const std::string& transcript, const TextVocab& vocab, int64_t speaker_id) {
  if (transcript.empty()) throw ArgumentError("synth: empty transcript");
  const std::string& chars = vocab.chars();
  const int n_chars = static_cast<int>(chars.size());
  const double tilt = speaker_tilt(speaker_id);
  const double a1 = 0.35 * (1.0 + tilt);
  const double a2 = 0.35 * (1.0 - tilt);
  constexpr int kSampleRate = 16000;
  constexpr int kCharSamples = 1600;  // 100 ms
  constexpr int kRampSamples = 80;    // 5 ms

  Waveform w;
  w.sample_rate_hz = kSampleRate;
  w.samples.assign(transcript.size() * kCharSamples, 0.0);
  for (size_t p = 0; p < transcript.size(); ++p) {
    const size_t idx = chars.find(transcript[p]);
    if (idx == std::string::npos) throw ArgumentError("synth: transcript character not in vocabulary");
    const double f = char_fundamental_hz(static_cast<int>(idx), n_chars);
    for (int sidx = 0; sidx < kCharSamples; ++sidx) {
      const double t = static_cast<double>(sidx) / kSampleRate;
      double env = 1.0;
      env = std::min(env, static_cast<double>(sidx) / kRampSamples);
      env = std::min(env, static_cast<double>(kCharSamples - sidx) / kRampSamples);
      const double x = a1 * std::sin(2.0 * M_PI * f * t) + a2 * std::sin(2.0 * M_PI * 1.5 * f * t);
      w.samples[p * kCharSamples + static_cast<size_t>(sidx)] = env * x;
    }
  }
  return w;
}

struct SynthUtterance {
  Waveform wav;
  std::string transcript;
  int64_t speaker_id = 0;
};

// Random 3-12 character transcripts over the vocabulary, speakers assigned
// uniformly. Deterministic given the rng state.
inline std::vector<SynthUtterance> make_synthetic_corpus(int n_utts, const TextVocab& vocab, Rng& rng,
                                                         int n_speakers = 4) {
  if (n_utts < 1) throw ArgumentError("synth: n_utts must be >= 1");
  if (n_speakers < 1) throw ArgumentError("synth: n_speakers must be >= 1");
  if (vocab.chars().empty()) throw ArgumentError("synth: vocabulary has no characters");
  std::vector<SynthUtterance> out;
  out.reserve(static_cast<size_t>(n_utts));
  for (int i = 0; i < n_utts; ++i) {
    const int len = 3 + static_cast<int>(rng.uniform_int(10));
    std::string transcript;
    for (int j = 0; j < len; ++j) {
      transcript += vocab.chars()[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(vocab.chars().size())))];
    }
    const int64_t speaker = rng.uniform_int(n_speakers);
    out.push_back({synth_utterance_wave(transcript, vocab, speaker), transcript, speaker});
  }
  return out;
}

}  // namespace dmel

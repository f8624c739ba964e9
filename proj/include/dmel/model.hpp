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
// Decoder-only transformer over multimodal sequences. Speech frames enter
// through per-channel embedding tables concatenated and projected to the
// model width; prediction runs through one output head per channel, all
// reading the same hidden state. Text uses a character head. Blocks are
// pre-LayerNorm with rotary position embeddings and LayerNorm-normalized
// queries and keys. The backward pass is written out by hand; the scalar
// type is a template parameter so gradients can be checked in 64-bit
// arithmetic while training runs in 32-bit.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dmel/errors.hpp"
#include "dmel/rng.hpp"
#include "dmel/sequence.hpp"
#include "dmel/tensor.hpp"

namespace dmel {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int d_channel_embed = 4;
  int bits = 4;
  int n_mels = 80;
  int text_vocab = 30;
  double dropout_residual = 0.1;
  double dropout_attention = 0.1;
  double dropout_embedding = 0.1;
  double dropout_positional = 0.3;
  int max_positions = 2048;
  double rope_base = 10000.0;

  bool operator==(const ModelConfig&) const = default;

  int head_dim() const { return d_model / n_heads; }
  int n_codes() const { return 1 << bits; }
  int mlp_dim() const { return 4 * d_model; }

  void validate() const {
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("model: head_dim must be even for rotary embeddings");
    if (d_channel_embed < 1) throw ConfigError("model: d_channel_embed must be >= 1");
    if (bits < 1 || bits > 16) throw ConfigError("model: bits must be in [1, 16]");
    if (n_mels < 1) throw ConfigError("model: n_mels must be >= 1");
    if (text_vocab < TextVocab::kFirstChar) throw ConfigError("model: text_vocab must cover the special tokens");
    if (max_positions < 2) throw ConfigError("model: max_positions must be >= 2");
    for (const double p : {dropout_residual, dropout_attention, dropout_embedding, dropout_positional}) {
      if (p < 0.0 || p >= 1.0) throw ConfigError("model: dropout rates must be in [0, 1)");
    }
    if (!(rope_base > 0.0)) throw ConfigError("model: rope_base must be positive");
  }

  static ModelConfig small() {
    ModelConfig c;
    c.n_layers = 18;
    c.n_heads = 2;
    c.d_model = 512;
    return c;
  }
  static ModelConfig base() {
    ModelConfig c;
    c.n_layers = 36;
    c.n_heads = 4;
    c.d_model = 768;
    return c;
  }
  static ModelConfig large() {
    ModelConfig c;
    c.n_layers = 48;
    c.n_heads = 8;
    c.d_model = 1536;
    return c;
  }
};

template <class T>
struct LayerParams {
  Tensor<T> ln1_g, ln1_b;                  // [D]
  Tensor<T> wq, wk, wv, wo;                // [D, D]
  Tensor<T> bq, bk, bv, bo;                // [D]
  Tensor<T> qln_g, qln_b, kln_g, kln_b;    // [head_dim], shared across heads
  Tensor<T> ln2_g, ln2_b;                  // [D]
  Tensor<T> w1, b1;                        // [4D, D], [4D]
  Tensor<T> w2, b2;                        // [D, 4D], [D]
};

template <class T>
struct Parameters {
  Tensor<T> speech_embed;      // [N, n_codes, d]
  Tensor<T> speech_proj_w;     // [D, N*d]
  Tensor<T> speech_proj_b;     // [D]
  Tensor<T> text_embed;        // [L, D]
  Tensor<T> speaker_proj_w;    // [D, kSpeakerDim]
  Tensor<T> speaker_proj_b;    // [D]
  Tensor<T> mask_embed;        // [D]
  Tensor<T> bos_speech_embed;  // [D]
  Tensor<T> eos_speech_embed;  // [D]
  std::vector<LayerParams<T>> layers;
  Tensor<T> lnf_g, lnf_b;        // [D]
  Tensor<T> speech_head_w;       // [N, n_codes, D]
  Tensor<T> speech_head_b;       // [N, n_codes]
  Tensor<T> eos_speech_head_w;   // [D], channel 0's extra stop class
  Tensor<T> eos_speech_head_b;   // [1]
  Tensor<T> text_head_w;         // [L, D]
  Tensor<T> text_head_b;         // [L]

  // Visits every tensor in a fixed order; the order defines checkpoint and
  // optimizer-state alignment.
  template <class F>
  void for_each(F&& f) {
    f("speech_embed", speech_embed);
    f("speech_proj_w", speech_proj_w);
    f("speech_proj_b", speech_proj_b);
    f("text_embed", text_embed);
    f("speaker_proj_w", speaker_proj_w);
    f("speaker_proj_b", speaker_proj_b);
    f("mask_embed", mask_embed);
    f("bos_speech_embed", bos_speech_embed);
    f("eos_speech_embed", eos_speech_embed);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      LayerParams<T>& l = layers[i];
      f(p + "ln1_g", l.ln1_g);
      f(p + "ln1_b", l.ln1_b);
      f(p + "wq", l.wq);
      f(p + "bq", l.bq);
      f(p + "wk", l.wk);
      f(p + "bk", l.bk);
      f(p + "wv", l.wv);
      f(p + "bv", l.bv);
      f(p + "wo", l.wo);
      f(p + "bo", l.bo);
      f(p + "qln_g", l.qln_g);
      f(p + "qln_b", l.qln_b);
      f(p + "kln_g", l.kln_g);
      f(p + "kln_b", l.kln_b);
      f(p + "ln2_g", l.ln2_g);
      f(p + "ln2_b", l.ln2_b);
      f(p + "w1", l.w1);
      f(p + "b1", l.b1);
      f(p + "w2", l.w2);
      f(p + "b2", l.b2);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    f("speech_head_w", speech_head_w);
    f("speech_head_b", speech_head_b);
    f("eos_speech_head_w", eos_speech_head_w);
    f("eos_speech_head_b", eos_speech_head_b);
    f("text_head_w", text_head_w);
    f("text_head_b", text_head_b);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<Parameters<T>*>(this)->for_each([&](const std::string& name, Tensor<T>& t) {
      f(name, static_cast<const Tensor<T>&>(t));
    });
  }

  // Allocates every tensor at the shape the config demands, zero-filled.
  void resize(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t D = cfg.d_model, N = cfg.n_mels, d = cfg.d_channel_embed;
    const int64_t C = cfg.n_codes(), L = cfg.text_vocab, hd = cfg.head_dim(), M = cfg.mlp_dim();
    speech_embed.resize({N, C, d});
    speech_proj_w.resize({D, N * d});
    speech_proj_b.resize({D});
    text_embed.resize({L, D});
    speaker_proj_w.resize({D, kSpeakerDim});
    speaker_proj_b.resize({D});
    mask_embed.resize({D});
    bos_speech_embed.resize({D});
    eos_speech_embed.resize({D});
    layers.assign(static_cast<size_t>(cfg.n_layers), LayerParams<T>{});
    for (auto& l : layers) {
      l.ln1_g.resize({D});
      l.ln1_b.resize({D});
      l.wq.resize({D, D});
      l.bq.resize({D});
      l.wk.resize({D, D});
      l.bk.resize({D});
      l.wv.resize({D, D});
      l.bv.resize({D});
      l.wo.resize({D, D});
      l.bo.resize({D});
      l.qln_g.resize({hd});
      l.qln_b.resize({hd});
      l.kln_g.resize({hd});
      l.kln_b.resize({hd});
      l.ln2_g.resize({D});
      l.ln2_b.resize({D});
      l.w1.resize({M, D});
      l.b1.resize({M});
      l.w2.resize({D, M});
      l.b2.resize({D});
    }
    lnf_g.resize({D});
    lnf_b.resize({D});
    speech_head_w.resize({N, C, D});
    speech_head_b.resize({N, C});
    eos_speech_head_w.resize({D});
    eos_speech_head_b.resize({1});
    text_head_w.resize({L, D});
    text_head_b.resize({L});
  }

  void zero() {
    for_each([](const std::string&, Tensor<T>& t) { t.fill(T(0)); });
  }

  // Normal(0, 0.02) weights with the residual output projections scaled
  // down by 1/sqrt(2*n_layers); LayerNorm gains start at 1, all biases 0.
  void init(const ModelConfig& cfg, Rng& rng) {
    resize(cfg);
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    auto fill_normal = [&rng](Tensor<T>& t, double std) {
      for (T& x : t.v) x = static_cast<T>(std * rng.normal());
    };
    fill_normal(speech_embed, base_std);
    fill_normal(speech_proj_w, base_std);
    fill_normal(text_embed, base_std);
    fill_normal(speaker_proj_w, base_std);
    fill_normal(mask_embed, base_std);
    fill_normal(bos_speech_embed, base_std);
    fill_normal(eos_speech_embed, base_std);
    for (auto& l : layers) {
      l.ln1_g.fill(T(1));
      fill_normal(l.wq, base_std);
      fill_normal(l.wk, base_std);
      fill_normal(l.wv, base_std);
      fill_normal(l.wo, resid_std);
      l.qln_g.fill(T(1));
      l.kln_g.fill(T(1));
      l.ln2_g.fill(T(1));
      fill_normal(l.w1, base_std);
      fill_normal(l.w2, resid_std);
    }
    lnf_g.fill(T(1));
    fill_normal(speech_head_w, base_std);
    fill_normal(eos_speech_head_w, base_std);
    fill_normal(text_head_w, base_std);
  }

  int64_t n_params() const {
    int64_t n = 0;
    for_each([&n](const std::string&, const Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

// --- Small math helpers -------------------------------------------------------

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// Pairwise rotation of coordinates (2i, 2i+1) by angle
// position * base^(-2i/head_dim). direction = -1 rotates back (used by the
// backward pass; rotations are orthogonal so the transpose is the inverse).
template <class T>
inline void rope_rotate_inplace(T* x, int head_dim, int64_t position, double base, int direction = 1) {
  for (int i = 0; 2 * i + 1 < head_dim; ++i) {
    const double angle =
        direction * static_cast<double>(position) * std::pow(base, -2.0 * i / static_cast<double>(head_dim));
    const double c = std::cos(angle), s = std::sin(angle);
    const double x0 = static_cast<double>(x[2 * i]);
    const double x1 = static_cast<double>(x[2 * i + 1]);
    x[2 * i] = static_cast<T>(x0 * c - x1 * s);
    x[2 * i + 1] = static_cast<T>(x0 * s + x1 * c);
  }
}

template <class T>
inline std::vector<T> rope_rotate(std::vector<T> x, int64_t position, double base) {
  if (x.size() % 2 != 0) throw ArgumentError("rope_rotate: vector length must be even");
  rope_rotate_inplace(x.data(), static_cast<int>(x.size()), position, base);
  return x;
}

namespace model_detail {

inline constexpr double kLnEps = 1e-5;

// y = g * (x - mean)/sqrt(var + eps) + b over one row of width n.
// Stores the normalized row and the reciprocal standard deviation.
template <class T>
inline void layer_norm_row(const T* x, const T* g, const T* b, int64_t n, T* y, T* xhat, T* rstd) {
  double mean = 0.0;
  for (int64_t i = 0; i < n; ++i) mean += static_cast<double>(x[i]);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double r = 1.0 / std::sqrt(var + kLnEps);
  for (int64_t i = 0; i < n; ++i) {
    const T h = static_cast<T>((static_cast<double>(x[i]) - mean) * r);
    xhat[i] = h;
    y[i] = g[i] * h + b[i];
  }
  *rstd = static_cast<T>(r);
}

// Gradient of layer_norm_row. dx is accumulated, dg/db are accumulated.
template <class T>
inline void layer_norm_row_backward(const T* dy, const T* xhat, T rstd, const T* g, int64_t n, T* dx, T* dg,
                                    T* db) {
  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double dxh = static_cast<double>(dy[i]) * static_cast<double>(g[i]);
    mean_dxhat += dxh;
    mean_dxhat_xhat += dxh * static_cast<double>(xhat[i]);
  }
  mean_dxhat /= static_cast<double>(n);
  mean_dxhat_xhat /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i) {
    const double dxh = static_cast<double>(dy[i]) * static_cast<double>(g[i]);
    dx[i] += static_cast<T>(static_cast<double>(rstd) *
                            (dxh - mean_dxhat - static_cast<double>(xhat[i]) * mean_dxhat_xhat));
    dg[i] += static_cast<T>(static_cast<double>(dy[i]) * static_cast<double>(xhat[i]));
    db[i] += dy[i];
  }
}

template <class T>
inline void add_bias_rows(Tensor<T>& x, const Tensor<T>& b, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    T* row = x.data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) row[c] += b.v[static_cast<size_t>(c)];
  }
}

// Inverted-dropout multipliers: 0 with probability p, else 1/(1-p). When
// p == 0 no random draws happen and the multipliers are all 1. Draw order
// is row-major over the tensor.
template <class T>
inline void fill_dropout(Tensor<T>& m, double p, Rng* rng) {
  if (p == 0.0) {
    m.fill(T(1));
    return;
  }
  if (rng == nullptr) throw ArgumentError("forward: dropout requires an rng in train mode");
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (T& x : m.v) x = rng->uniform() < p ? T(0) : keep;
}

template <class T>
inline void mul_inplace(Tensor<T>& x, const Tensor<T>& m) {
  for (size_t i = 0; i < x.v.size(); ++i) x.v[i] *= m.v[i];
}

}  // namespace model_detail

// --- Embeddings ---------------------------------------------------------------

// Concatenation of the per-channel embeddings: channel c's d-vector lands
// in slice [c*d, (c+1)*d).
template <class T>
inline std::vector<T> embed_speech_concat(const std::vector<uint16_t>& bins, const Parameters<T>& p,
                                          const ModelConfig& cfg) {
  if (static_cast<int>(bins.size()) != cfg.n_mels) {
    throw ArgumentError("embed_speech_frame: expected " + std::to_string(cfg.n_mels) + " bins");
  }
  const int64_t d = cfg.d_channel_embed;
  const int64_t C = cfg.n_codes();
  std::vector<T> concat(static_cast<size_t>(cfg.n_mels) * d);
  for (int c = 0; c < cfg.n_mels; ++c) {
    if (bins[c] >= C) throw ArgumentError("embed_speech_frame: bin out of range for bit width");
    const T* src = p.speech_embed.data() + (static_cast<int64_t>(c) * C + bins[c]) * d;
    std::copy(src, src + d, concat.begin() + static_cast<int64_t>(c) * d);
  }
  return concat;
}

// Frame embedding: concatenated channel embeddings followed by the linear
// projection to model width.
template <class T>
inline std::vector<T> embed_speech_frame(const std::vector<uint16_t>& bins, const Parameters<T>& p,
                                         const ModelConfig& cfg) {
  const std::vector<T> concat = embed_speech_concat(bins, p, cfg);
  std::vector<T> out(p.speech_proj_b.v.begin(), p.speech_proj_b.v.end());
  matvec(out.data(), p.speech_proj_w.data(), concat.data(), cfg.d_model,
         static_cast<int64_t>(cfg.n_mels) * cfg.d_channel_embed);
  return out;
}

// --- Forward pass --------------------------------------------------------------

template <class T>
struct LayerCache {
  Tensor<T> x_in;                  // [len, D]
  Tensor<T> ln1_xhat;              // [len, D]
  std::vector<T> ln1_rstd;         // [len]
  Tensor<T> q, k, v;               // [len, D] after the input linears
  Tensor<T> qhat, khat;            // [len, D] QK-norm normalized rows
  std::vector<T> q_rstd, k_rstd;   // [len * H]
  Tensor<T> q_rot, k_rot;          // [len, D] after QK-norm scale/shift and rotation
  Tensor<T> att_p;                 // [H, len, len] softmax probabilities
  Tensor<T> att_m;                 // [H, len, len] attention dropout multipliers
  Tensor<T> ctx;                   // [len, D]
  Tensor<T> attn_drop_m;           // [len, D]
  Tensor<T> x_mid;                 // [len, D]
  Tensor<T> ln2_xhat;              // [len, D]
  std::vector<T> ln2_rstd;         // [len]
  Tensor<T> mlp_pre;               // [len, 4D]
  Tensor<T> mlp_act;               // [len, 4D]
  Tensor<T> mlp_drop_m;            // [len, D]
};

template <class T>
struct ForwardCache {
  bool train_mode = false;
  Tensor<T> speech_concat;   // [len, N*d]; rows valid only at unmasked speech positions
  Tensor<T> emb_drop_m;      // [len, D]
  Tensor<T> pos_drop_m;      // [len, D]
  Tensor<T> x0;              // [len, D] block-0 input
  std::vector<LayerCache<T>> layers;
  Tensor<T> lnf_xhat;        // [len, D]
  std::vector<T> lnf_rstd;   // [len]
  Tensor<T> hidden;          // [len, D]
};

// Runs the stack over a batch and returns final hidden states [len, D].
// train_mode enables the dropouts (drawing from rng); cache, when given,
// records everything the backward pass needs.
template <class T>
Tensor<T> forward_hidden(const SequenceBatch& batch, const Parameters<T>& params, const ModelConfig& cfg,
                         bool train_mode = false, Rng* rng = nullptr, ForwardCache<T>* cache = nullptr) {
  cfg.validate();
  const int64_t len = batch.length();
  if (len == 0) throw ArgumentError("forward: empty sequence");
  if (len > cfg.max_positions) {
    throw ArgumentError("forward: sequence length " + std::to_string(len) + " exceeds max_positions " +
                        std::to_string(cfg.max_positions));
  }
  const int64_t D = cfg.d_model;
  const int64_t H = cfg.n_heads;
  const int64_t hd = cfg.head_dim();
  const int64_t M = cfg.mlp_dim();
  const int64_t Nd = static_cast<int64_t>(cfg.n_mels) * cfg.d_channel_embed;

  ForwardCache<T> local;
  ForwardCache<T>& cc = cache != nullptr ? *cache : local;
  cc.train_mode = train_mode;
  cc.layers.assign(static_cast<size_t>(cfg.n_layers), LayerCache<T>{});
  if (cache != nullptr) cc.speech_concat.resize({len, Nd});

  // Input embeddings.
  Tensor<T> x({len, D});
  for (int64_t t = 0; t < len; ++t) {
    const SequenceItem& it = batch.items[t];
    T* row = x.data() + t * D;
    if (it.masked) {
      std::copy(params.mask_embed.v.begin(), params.mask_embed.v.end(), row);
      continue;
    }
    switch (it.modality) {
      case Modality::speaker: {
        if (it.speaker.size() != kSpeakerDim) throw ArgumentError("forward: speaker payload must have 512 entries");
        std::copy(params.speaker_proj_b.v.begin(), params.speaker_proj_b.v.end(), row);
        std::vector<T> spk(kSpeakerDim);
        for (int i = 0; i < kSpeakerDim; ++i) spk[i] = static_cast<T>(it.speaker[i]);
        matvec(row, params.speaker_proj_w.data(), spk.data(), D, kSpeakerDim);
        break;
      }
      case Modality::text:
      case Modality::bos_text:
      case Modality::eos_text: {
        if (it.text_id < 0 || it.text_id >= cfg.text_vocab) throw ArgumentError("forward: text id out of range");
        const T* src = params.text_embed.data() + static_cast<int64_t>(it.text_id) * D;
        std::copy(src, src + D, row);
        break;
      }
      case Modality::speech: {
        const std::vector<T> concat = embed_speech_concat(it.bins, params, cfg);
        if (cache != nullptr) std::copy(concat.begin(), concat.end(), cc.speech_concat.data() + t * Nd);
        std::copy(params.speech_proj_b.v.begin(), params.speech_proj_b.v.end(), row);
        matvec(row, params.speech_proj_w.data(), concat.data(), D, Nd);
        break;
      }
      case Modality::bos_speech:
        std::copy(params.bos_speech_embed.v.begin(), params.bos_speech_embed.v.end(), row);
        break;
      case Modality::eos_speech:
        std::copy(params.eos_speech_embed.v.begin(), params.eos_speech_embed.v.end(), row);
        break;
    }
  }

  // Embedding dropout, then pre-stack dropout tied to position injection.
  if (train_mode) {
    cc.emb_drop_m.resize({len, D});
    model_detail::fill_dropout(cc.emb_drop_m, cfg.dropout_embedding, rng);
    model_detail::mul_inplace(x, cc.emb_drop_m);
    cc.pos_drop_m.resize({len, D});
    model_detail::fill_dropout(cc.pos_drop_m, cfg.dropout_positional, rng);
    model_detail::mul_inplace(x, cc.pos_drop_m);
  }
  if (cache != nullptr) cc.x0 = x;

  std::vector<double> inv_freq(static_cast<size_t>(hd / 2));
  for (int64_t i = 0; i < hd / 2; ++i) {
    inv_freq[static_cast<size_t>(i)] = std::pow(cfg.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  }

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const LayerParams<T>& lp = params.layers[static_cast<size_t>(layer)];
    LayerCache<T>& lc = cc.layers[static_cast<size_t>(layer)];
    lc.x_in = x;

    // Pre-attention norm.
    Tensor<T> hn({len, D});
    lc.ln1_xhat.resize({len, D});
    lc.ln1_rstd.assign(static_cast<size_t>(len), T(0));
    for (int64_t t = 0; t < len; ++t) {
      model_detail::layer_norm_row(x.data() + t * D, lp.ln1_g.data(), lp.ln1_b.data(), D, hn.data() + t * D,
                                   lc.ln1_xhat.data() + t * D, &lc.ln1_rstd[static_cast<size_t>(t)]);
    }

    lc.q.resize({len, D});
    lc.k.resize({len, D});
    lc.v.resize({len, D});
    gemm_nt(lc.q.data(), hn.data(), lp.wq.data(), len, D, D);
    gemm_nt(lc.k.data(), hn.data(), lp.wk.data(), len, D, D);
    gemm_nt(lc.v.data(), hn.data(), lp.wv.data(), len, D, D);
    model_detail::add_bias_rows(lc.q, lp.bq, len, D);
    model_detail::add_bias_rows(lc.k, lp.bk, len, D);
    model_detail::add_bias_rows(lc.v, lp.bv, len, D);

    // Per-head LayerNorm on queries and keys, then rotation.
    lc.qhat.resize({len, D});
    lc.khat.resize({len, D});
    lc.q_rstd.assign(static_cast<size_t>(len * H), T(0));
    lc.k_rstd.assign(static_cast<size_t>(len * H), T(0));
    lc.q_rot.resize({len, D});
    lc.k_rot.resize({len, D});
    for (int64_t t = 0; t < len; ++t) {
      const int64_t pos = batch.items[t].position;
      for (int64_t h = 0; h < H; ++h) {
        const int64_t off = t * D + h * hd;
        model_detail::layer_norm_row(lc.q.data() + off, lp.qln_g.data(), lp.qln_b.data(), hd,
                                     lc.q_rot.data() + off, lc.qhat.data() + off,
                                     &lc.q_rstd[static_cast<size_t>(t * H + h)]);
        model_detail::layer_norm_row(lc.k.data() + off, lp.kln_g.data(), lp.kln_b.data(), hd,
                                     lc.k_rot.data() + off, lc.khat.data() + off,
                                     &lc.k_rstd[static_cast<size_t>(t * H + h)]);
        T* qr = lc.q_rot.data() + off;
        T* kr = lc.k_rot.data() + off;
        for (int64_t i = 0; i < hd / 2; ++i) {
          const double angle = static_cast<double>(pos) * inv_freq[static_cast<size_t>(i)];
          const double c = std::cos(angle), s = std::sin(angle);
          const double q0 = static_cast<double>(qr[2 * i]), q1 = static_cast<double>(qr[2 * i + 1]);
          qr[2 * i] = static_cast<T>(q0 * c - q1 * s);
          qr[2 * i + 1] = static_cast<T>(q0 * s + q1 * c);
          const double k0 = static_cast<double>(kr[2 * i]), k1 = static_cast<double>(kr[2 * i + 1]);
          kr[2 * i] = static_cast<T>(k0 * c - k1 * s);
          kr[2 * i + 1] = static_cast<T>(k0 * s + k1 * c);
        }
      }
    }

    // Causal attention.
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    lc.att_p.resize({H, len, len});
    if (train_mode) {
      lc.att_m.resize({H, len, len});
      if (cfg.dropout_attention == 0.0) {
        lc.att_m.fill(T(1));
      } else {
        if (rng == nullptr) throw ArgumentError("forward: dropout requires an rng in train mode");
        const T keep = static_cast<T>(1.0 / (1.0 - cfg.dropout_attention));
        for (int64_t h = 0; h < H; ++h) {
          for (int64_t i = 0; i < len; ++i) {
            T* mrow = lc.att_m.data() + (h * len + i) * len;
            for (int64_t j = 0; j <= i; ++j) mrow[j] = rng->uniform() < cfg.dropout_attention ? T(0) : keep;
          }
        }
      }
    }
    lc.ctx.resize({len, D});
    std::vector<double> scores(static_cast<size_t>(len));
    for (int64_t h = 0; h < H; ++h) {
      for (int64_t i = 0; i < len; ++i) {
        const T* qi = lc.q_rot.data() + i * D + h * hd;
        double max_s = -1e30;
        for (int64_t j = 0; j <= i; ++j) {
          const T* kj = lc.k_rot.data() + j * D + h * hd;
          double dot = 0.0;
          for (int64_t e = 0; e < hd; ++e) dot += static_cast<double>(qi[e]) * static_cast<double>(kj[e]);
          scores[static_cast<size_t>(j)] = dot * scale;
          max_s = std::max(max_s, scores[static_cast<size_t>(j)]);
        }
        double denom = 0.0;
        for (int64_t j = 0; j <= i; ++j) denom += std::exp(scores[static_cast<size_t>(j)] - max_s);
        T* prow = lc.att_p.data() + (h * len + i) * len;
        for (int64_t j = 0; j <= i; ++j) {
          prow[j] = static_cast<T>(std::exp(scores[static_cast<size_t>(j)] - max_s) / denom);
        }
        T* out = lc.ctx.data() + i * D + h * hd;
        const T* mrow = train_mode ? lc.att_m.data() + (h * len + i) * len : nullptr;
        for (int64_t j = 0; j <= i; ++j) {
          const T w = train_mode ? prow[j] * mrow[j] : prow[j];
          if (w == T(0)) continue;
          const T* vj = lc.v.data() + j * D + h * hd;
          for (int64_t e = 0; e < hd; ++e) out[e] += w * vj[e];
        }
      }
    }

    Tensor<T> attn_out({len, D});
    gemm_nt(attn_out.data(), lc.ctx.data(), lp.wo.data(), len, D, D);
    model_detail::add_bias_rows(attn_out, lp.bo, len, D);
    if (train_mode) {
      lc.attn_drop_m.resize({len, D});
      model_detail::fill_dropout(lc.attn_drop_m, cfg.dropout_residual, rng);
      model_detail::mul_inplace(attn_out, lc.attn_drop_m);
    }
    for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += attn_out.v[i];
    lc.x_mid = x;

    // Pre-MLP norm and the feed-forward block.
    Tensor<T> hn2({len, D});
    lc.ln2_xhat.resize({len, D});
    lc.ln2_rstd.assign(static_cast<size_t>(len), T(0));
    for (int64_t t = 0; t < len; ++t) {
      model_detail::layer_norm_row(x.data() + t * D, lp.ln2_g.data(), lp.ln2_b.data(), D, hn2.data() + t * D,
                                   lc.ln2_xhat.data() + t * D, &lc.ln2_rstd[static_cast<size_t>(t)]);
    }
    lc.mlp_pre.resize({len, M});
    gemm_nt(lc.mlp_pre.data(), hn2.data(), lp.w1.data(), len, M, D);
    model_detail::add_bias_rows(lc.mlp_pre, lp.b1, len, M);
    lc.mlp_act.resize({len, M});
    for (size_t i = 0; i < lc.mlp_pre.v.size(); ++i) {
      lc.mlp_act.v[i] = static_cast<T>(gelu(static_cast<double>(lc.mlp_pre.v[i])));
    }
    Tensor<T> mlp_out({len, D});
    gemm_nt(mlp_out.data(), lc.mlp_act.data(), lp.w2.data(), len, D, M);
    model_detail::add_bias_rows(mlp_out, lp.b2, len, D);
    if (train_mode) {
      lc.mlp_drop_m.resize({len, D});
      model_detail::fill_dropout(lc.mlp_drop_m, cfg.dropout_residual, rng);
      model_detail::mul_inplace(mlp_out, lc.mlp_drop_m);
    }
    for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += mlp_out.v[i];
  }

  // Final norm.
  Tensor<T> hidden({len, D});
  cc.lnf_xhat.resize({len, D});
  cc.lnf_rstd.assign(static_cast<size_t>(len), T(0));
  for (int64_t t = 0; t < len; ++t) {
    model_detail::layer_norm_row(x.data() + t * D, params.lnf_g.data(), params.lnf_b.data(), D,
                                 hidden.data() + t * D, cc.lnf_xhat.data() + t * D,
                                 &cc.lnf_rstd[static_cast<size_t>(t)]);
  }
  if (cache != nullptr) cc.hidden = hidden;
  return hidden;
}

// --- Heads, logits, loss --------------------------------------------------------

enum class TargetKind : uint8_t { none, text, speech, eos_speech };

inline TargetKind target_kind_of(Modality m) {
  switch (m) {
    case Modality::text:
    case Modality::bos_text:
    case Modality::eos_text:
      return TargetKind::text;
    case Modality::speech:
      return TargetKind::speech;
    case Modality::eos_speech:
      return TargetKind::eos_speech;
    case Modality::speaker:
    case Modality::bos_speech:
      return TargetKind::none;
  }
  return TargetKind::none;
}

// Flattened speech logits: channel 0 contributes n_codes bin classes plus
// the stop class, channels 1..N-1 contribute n_codes each.
inline int64_t speech_logit_size(const ModelConfig& cfg) {
  return static_cast<int64_t>(cfg.n_codes()) + 1 + static_cast<int64_t>(cfg.n_mels - 1) * cfg.n_codes();
}

inline int64_t speech_block_offset(int channel, const ModelConfig& cfg) {
  return channel == 0 ? 0 : static_cast<int64_t>(cfg.n_codes()) + 1 + static_cast<int64_t>(channel - 1) * cfg.n_codes();
}

inline int64_t speech_block_size(int channel, const ModelConfig& cfg) {
  return channel == 0 ? cfg.n_codes() + 1 : cfg.n_codes();
}

template <class T>
inline std::vector<T> text_logits_from_hidden(const T* hidden, const Parameters<T>& p, const ModelConfig& cfg) {
  std::vector<T> out(p.text_head_b.v.begin(), p.text_head_b.v.end());
  matvec(out.data(), p.text_head_w.data(), hidden, cfg.text_vocab, cfg.d_model);
  return out;
}

template <class T>
inline std::vector<T> speech_logits_from_hidden(const T* hidden, const Parameters<T>& p, const ModelConfig& cfg) {
  const int64_t C = cfg.n_codes();
  const int64_t D = cfg.d_model;
  std::vector<T> out(static_cast<size_t>(speech_logit_size(cfg)));
  for (int c = 0; c < cfg.n_mels; ++c) {
    T* block = out.data() + speech_block_offset(c, cfg);
    const T* w = p.speech_head_w.data() + static_cast<int64_t>(c) * C * D;
    const T* b = p.speech_head_b.data() + static_cast<int64_t>(c) * C;
    for (int64_t j = 0; j < C; ++j) block[j] = b[j];
    matvec(block, w, hidden, C, D);
    if (c == 0) {
      T eos = p.eos_speech_head_b.v[0];
      for (int64_t e = 0; e < D; ++e) eos += p.eos_speech_head_w.v[static_cast<size_t>(e)] * hidden[e];
      block[C] = eos;
    }
  }
  return out;
}

template <class T>
struct StepLogits {
  TargetKind kind = TargetKind::none;
  std::vector<T> values;  // text: [L]; speech/eos_speech: speech_logit_size
};

// Logits for every position that has a successor with a head: entry t
// predicts the content of position t+1.
template <class T>
std::vector<StepLogits<T>> full_logits(const SequenceBatch& batch, const Parameters<T>& params,
                                       const ModelConfig& cfg) {
  const Tensor<T> hidden = forward_hidden(batch, params, cfg);
  const int64_t len = batch.length();
  std::vector<StepLogits<T>> out(static_cast<size_t>(std::max<int64_t>(0, len - 1)));
  for (int64_t t = 0; t + 1 < len; ++t) {
    const TargetKind kind = target_kind_of(batch.items[t + 1].modality);
    out[static_cast<size_t>(t)].kind = kind;
    if (kind == TargetKind::text) {
      out[static_cast<size_t>(t)].values = text_logits_from_hidden(hidden.data() + t * cfg.d_model, params, cfg);
    } else if (kind == TargetKind::speech || kind == TargetKind::eos_speech) {
      out[static_cast<size_t>(t)].values = speech_logits_from_hidden(hidden.data() + t * cfg.d_model, params, cfg);
    }
  }
  return out;
}

namespace model_detail {

// Cross-entropy of one softmax block; target must index into it.
template <class T>
inline double block_cross_entropy(const T* logits, int64_t n, int64_t target) {
  double max_l = -1e30;
  for (int64_t i = 0; i < n; ++i) max_l = std::max(max_l, static_cast<double>(logits[i]));
  double denom = 0.0;
  for (int64_t i = 0; i < n; ++i) denom += std::exp(static_cast<double>(logits[i]) - max_l);
  return std::log(denom) - (static_cast<double>(logits[target]) - max_l);
}

}  // namespace model_detail

// Mean cross-entropy over supervised target positions. A speech frame
// contributes the mean of its per-channel cross-entropies; the speech stop
// marker contributes channel 0's stop-class cross-entropy.
template <class T>
double loss_from_logits(const std::vector<StepLogits<T>>& logits, const SequenceBatch& batch,
                        const ModelConfig& cfg) {
  const int64_t len = batch.length();
  if (logits.size() != static_cast<size_t>(std::max<int64_t>(0, len - 1))) {
    throw ArgumentError("loss: logits do not match batch length");
  }
  double total = 0.0;
  int64_t count = 0;
  for (int64_t t = 0; t + 1 < len; ++t) {
    const SequenceItem& target = batch.items[t + 1];
    if (target.loss_weight == 0.f) continue;
    const StepLogits<T>& sl = logits[static_cast<size_t>(t)];
    if (sl.kind != target_kind_of(target.modality)) throw ArgumentError("loss: logits kind mismatch");
    switch (sl.kind) {
      case TargetKind::text: {
        if (target.text_id < 0 || target.text_id >= cfg.text_vocab) throw ArgumentError("loss: bad text target");
        total += model_detail::block_cross_entropy(sl.values.data(), cfg.text_vocab, target.text_id);
        break;
      }
      case TargetKind::speech: {
        if (static_cast<int>(target.bins.size()) != cfg.n_mels) throw ArgumentError("loss: bad speech target");
        double frame = 0.0;
        for (int c = 0; c < cfg.n_mels; ++c) {
          frame += model_detail::block_cross_entropy(sl.values.data() + speech_block_offset(c, cfg),
                                                     speech_block_size(c, cfg), target.bins[c]);
        }
        total += frame / cfg.n_mels;
        break;
      }
      case TargetKind::eos_speech: {
        total += model_detail::block_cross_entropy(sl.values.data(), speech_block_size(0, cfg), cfg.n_codes());
        break;
      }
      case TargetKind::none:
        throw ArgumentError("loss: supervised position has no prediction head");
    }
    ++count;
  }
  if (count == 0) throw ArgumentError("loss: batch has no supervised positions");
  return total / static_cast<double>(count);
}

template <class T>
double loss(const SequenceBatch& batch, const Parameters<T>& params, const ModelConfig& cfg) {
  return loss_from_logits(full_logits(batch, params, cfg), batch, cfg);
}

// --- Backward pass ---------------------------------------------------------------

// Forward + loss + full handwritten backward. Gradients are accumulated
// into grads (callers zero it between batches). Returns the loss.
template <class T>
double loss_and_backward(const SequenceBatch& batch, const Parameters<T>& params, const ModelConfig& cfg,
                         Parameters<T>& grads, bool train_mode = false, Rng* rng = nullptr) {
  ForwardCache<T> cache;
  const Tensor<T> hidden = forward_hidden(batch, params, cfg, train_mode, rng, &cache);
  const int64_t len = batch.length();
  const int64_t D = cfg.d_model;
  const int64_t H = cfg.n_heads;
  const int64_t hd = cfg.head_dim();
  const int64_t M = cfg.mlp_dim();
  const int64_t C = cfg.n_codes();
  const int64_t Nd = static_cast<int64_t>(cfg.n_mels) * cfg.d_channel_embed;

  int64_t count = 0;
  for (int64_t t = 1; t < len; ++t) {
    if (batch.items[t].loss_weight != 0.f) ++count;
  }
  if (count == 0) throw ArgumentError("loss: batch has no supervised positions");

  // Head losses and gradients into d_hidden.
  Tensor<T> d_hidden({len, D});
  double total = 0.0;
  std::vector<double> probs;
  for (int64_t t = 0; t + 1 < len; ++t) {
    const SequenceItem& target = batch.items[t + 1];
    if (target.loss_weight == 0.f) continue;
    const T* h = hidden.data() + t * D;
    T* dh = d_hidden.data() + t * D;
    const TargetKind kind = target_kind_of(target.modality);
    if (kind == TargetKind::text) {
      if (target.text_id < 0 || target.text_id >= cfg.text_vocab) throw ArgumentError("loss: bad text target");
      const std::vector<T> logits = text_logits_from_hidden(h, params, cfg);
      double max_l = -1e30;
      for (const T v : logits) max_l = std::max(max_l, static_cast<double>(v));
      double denom = 0.0;
      probs.assign(logits.size(), 0.0);
      for (size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(static_cast<double>(logits[i]) - max_l);
        denom += probs[i];
      }
      for (double& p : probs) p /= denom;
      total += -std::log(probs[static_cast<size_t>(target.text_id)]);
      const double scale = 1.0 / static_cast<double>(count);
      for (int64_t i = 0; i < cfg.text_vocab; ++i) {
        const double dl = (probs[static_cast<size_t>(i)] - (i == target.text_id ? 1.0 : 0.0)) * scale;
        const T dlt = static_cast<T>(dl);
        // d logits -> head weights and hidden state
        T* gw = grads.text_head_w.data() + i * D;
        for (int64_t e = 0; e < D; ++e) {
          gw[e] += dlt * h[e];
          dh[e] += dlt * params.text_head_w.v[static_cast<size_t>(i * D + e)];
        }
        grads.text_head_b.v[static_cast<size_t>(i)] += dlt;
      }
    } else if (kind == TargetKind::speech || kind == TargetKind::eos_speech) {
      const std::vector<T> logits = speech_logits_from_hidden(h, params, cfg);
      const bool is_frame = kind == TargetKind::speech;
      if (is_frame && static_cast<int>(target.bins.size()) != cfg.n_mels) {
        throw ArgumentError("loss: bad speech target");
      }
      const int last_channel = is_frame ? cfg.n_mels - 1 : 0;
      double frame_total = 0.0;
      for (int c = 0; c <= last_channel; ++c) {
        const int64_t block_off = speech_block_offset(c, cfg);
        const int64_t block_n = speech_block_size(c, cfg);
        const int64_t tgt = is_frame ? target.bins[static_cast<size_t>(c)] : C;
        if (tgt >= (is_frame ? C : block_n)) throw ArgumentError("loss: speech bin out of range");
        const T* block = logits.data() + block_off;
        double max_l = -1e30;
        for (int64_t i = 0; i < block_n; ++i) max_l = std::max(max_l, static_cast<double>(block[i]));
        double denom = 0.0;
        probs.assign(static_cast<size_t>(block_n), 0.0);
        for (int64_t i = 0; i < block_n; ++i) {
          probs[static_cast<size_t>(i)] = std::exp(static_cast<double>(block[i]) - max_l);
          denom += probs[static_cast<size_t>(i)];
        }
        for (double& p : probs) p /= denom;
        frame_total += -std::log(probs[static_cast<size_t>(tgt)]);
        const double scale = is_frame ? 1.0 / (static_cast<double>(count) * cfg.n_mels)
                                      : 1.0 / static_cast<double>(count);
        const T* w = params.speech_head_w.data() + static_cast<int64_t>(c) * C * D;
        T* gw = grads.speech_head_w.data() + static_cast<int64_t>(c) * C * D;
        T* gb = grads.speech_head_b.data() + static_cast<int64_t>(c) * C;
        for (int64_t i = 0; i < block_n; ++i) {
          const double dl = (probs[static_cast<size_t>(i)] - (i == tgt ? 1.0 : 0.0)) * scale;
          const T dlt = static_cast<T>(dl);
          if (c == 0 && i == C) {
            for (int64_t e = 0; e < D; ++e) {
              grads.eos_speech_head_w.v[static_cast<size_t>(e)] += dlt * h[e];
              dh[e] += dlt * params.eos_speech_head_w.v[static_cast<size_t>(e)];
            }
            grads.eos_speech_head_b.v[0] += dlt;
          } else {
            for (int64_t e = 0; e < D; ++e) {
              gw[i * D + e] += dlt * h[e];
              dh[e] += dlt * w[i * D + e];
            }
            gb[i] += dlt;
          }
        }
      }
      total += is_frame ? frame_total / cfg.n_mels : frame_total;
    } else {
      throw ArgumentError("loss: supervised position has no prediction head");
    }
  }

  // Final norm backward.
  Tensor<T> dx({len, D});
  for (int64_t t = 0; t < len; ++t) {
    model_detail::layer_norm_row_backward(d_hidden.data() + t * D, cache.lnf_xhat.data() + t * D,
                                          cache.lnf_rstd[static_cast<size_t>(t)], params.lnf_g.data(), D,
                                          dx.data() + t * D, grads.lnf_g.data(), grads.lnf_b.data());
  }

  std::vector<double> inv_freq(static_cast<size_t>(hd / 2));
  for (int64_t i = 0; i < hd / 2; ++i) {
    inv_freq[static_cast<size_t>(i)] = std::pow(cfg.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  }
  const bool train = cache.train_mode;

  for (int layer = cfg.n_layers - 1; layer >= 0; --layer) {
    const LayerParams<T>& lp = params.layers[static_cast<size_t>(layer)];
    LayerParams<T>& lg = grads.layers[static_cast<size_t>(layer)];
    LayerCache<T>& lc = cache.layers[static_cast<size_t>(layer)];

    // MLP branch backward: x_out = x_mid + drop(W2 gelu(W1 ln2(x_mid) + b1) + b2).
    Tensor<T> d_mlp_out = dx;  // residual add passes dx through to the branch
    if (train) model_detail::mul_inplace(d_mlp_out, lc.mlp_drop_m);
    // through b2 / W2
    for (int64_t t = 0; t < len; ++t) {
      const T* row = d_mlp_out.data() + t * D;
      for (int64_t e = 0; e < D; ++e) lg.b2.v[static_cast<size_t>(e)] += row[e];
    }
    Tensor<T> d_act({len, M});
    gemm_nn(d_act.data(), d_mlp_out.data(), lp.w2.data(), len, M, D);
    gemm_tn(lg.w2.data(), d_mlp_out.data(), lc.mlp_act.data(), D, M, len);
    // through GELU
    Tensor<T> d_pre({len, M});
    for (size_t i = 0; i < d_pre.v.size(); ++i) {
      d_pre.v[i] = static_cast<T>(static_cast<double>(d_act.v[i]) * gelu_grad(static_cast<double>(lc.mlp_pre.v[i])));
    }
    // through b1 / W1
    for (int64_t t = 0; t < len; ++t) {
      const T* row = d_pre.data() + t * M;
      for (int64_t e = 0; e < M; ++e) lg.b1.v[static_cast<size_t>(e)] += row[e];
    }
    Tensor<T> d_hn2({len, D});
    gemm_nn(d_hn2.data(), d_pre.data(), lp.w1.data(), len, D, M);
    // ln2 input gradient: recompute hn2's input = x_mid rows
    Tensor<T> w1_in({len, D});
    for (int64_t t = 0; t < len; ++t) {
      // reconstruct the ln2 output row from cached xhat (cheaper than storing it)
      T* row = w1_in.data() + t * D;
      const T* xh = lc.ln2_xhat.data() + t * D;
      for (int64_t e = 0; e < D; ++e) row[e] = lp.ln2_g.v[static_cast<size_t>(e)] * xh[e] + lp.ln2_b.v[static_cast<size_t>(e)];
    }
    gemm_tn(lg.w1.data(), d_pre.data(), w1_in.data(), M, D, len);
    // through ln2 into x_mid gradient (accumulates into dx)
    for (int64_t t = 0; t < len; ++t) {
      model_detail::layer_norm_row_backward(d_hn2.data() + t * D, lc.ln2_xhat.data() + t * D,
                                            lc.ln2_rstd[static_cast<size_t>(t)], lp.ln2_g.data(), D,
                                            dx.data() + t * D, lg.ln2_g.data(), lg.ln2_b.data());
    }

    // Attention branch backward: x_mid = x_in + drop(Wo ctx + bo).
    Tensor<T> d_attn_out = dx;
    if (train) model_detail::mul_inplace(d_attn_out, lc.attn_drop_m);
    for (int64_t t = 0; t < len; ++t) {
      const T* row = d_attn_out.data() + t * D;
      for (int64_t e = 0; e < D; ++e) lg.bo.v[static_cast<size_t>(e)] += row[e];
    }
    Tensor<T> d_ctx({len, D});
    gemm_nn(d_ctx.data(), d_attn_out.data(), lp.wo.data(), len, D, D);
    gemm_tn(lg.wo.data(), d_attn_out.data(), lc.ctx.data(), D, D, len);

    Tensor<T> d_q_rot({len, D});
    Tensor<T> d_k_rot({len, D});
    Tensor<T> d_v({len, D});
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> dp(static_cast<size_t>(len));
    for (int64_t h = 0; h < H; ++h) {
      for (int64_t i = 0; i < len; ++i) {
        const T* dctx_i = d_ctx.data() + i * D + h * hd;
        const T* prow = lc.att_p.data() + (h * len + i) * len;
        const T* mrow = train ? lc.att_m.data() + (h * len + i) * len : nullptr;
        // d(post-dropout weights) and v gradient
        double dot_dp_p = 0.0;
        for (int64_t j = 0; j <= i; ++j) {
          const T* vj = lc.v.data() + j * D + h * hd;
          double acc = 0.0;
          for (int64_t e = 0; e < hd; ++e) acc += static_cast<double>(dctx_i[e]) * static_cast<double>(vj[e]);
          const double m = train ? static_cast<double>(mrow[j]) : 1.0;
          const double w = static_cast<double>(prow[j]) * m;
          if (w != 0.0) {
            T* dvj = d_v.data() + j * D + h * hd;
            for (int64_t e = 0; e < hd; ++e) dvj[e] += static_cast<T>(w) * dctx_i[e];
          }
          dp[static_cast<size_t>(j)] = acc * m;  // gradient w.r.t. softmax prob
          dot_dp_p += dp[static_cast<size_t>(j)] * static_cast<double>(prow[j]);
        }
        // softmax backward, then into q/k
        const T* qi = lc.q_rot.data() + i * D + h * hd;
        T* dqi = d_q_rot.data() + i * D + h * hd;
        for (int64_t j = 0; j <= i; ++j) {
          const double ds = static_cast<double>(prow[j]) * (dp[static_cast<size_t>(j)] - dot_dp_p) * scale;
          if (ds == 0.0) continue;
          const T dst = static_cast<T>(ds);
          const T* kj = lc.k_rot.data() + j * D + h * hd;
          T* dkj = d_k_rot.data() + j * D + h * hd;
          for (int64_t e = 0; e < hd; ++e) {
            dqi[e] += dst * kj[e];
            dkj[e] += dst * qi[e];
          }
        }
      }
    }

    // Rotation backward, then QK-norm backward, into raw q/k gradients.
    Tensor<T> d_q({len, D});
    Tensor<T> d_k({len, D});
    for (int64_t t = 0; t < len; ++t) {
      const int64_t pos = batch.items[t].position;
      for (int64_t h = 0; h < H; ++h) {
        const int64_t off = t * D + h * hd;
        T* dq = d_q_rot.data() + off;
        T* dk = d_k_rot.data() + off;
        for (int64_t i = 0; i < hd / 2; ++i) {
          const double angle = -static_cast<double>(pos) * inv_freq[static_cast<size_t>(i)];
          const double c = std::cos(angle), s = std::sin(angle);
          const double q0 = static_cast<double>(dq[2 * i]), q1 = static_cast<double>(dq[2 * i + 1]);
          dq[2 * i] = static_cast<T>(q0 * c - q1 * s);
          dq[2 * i + 1] = static_cast<T>(q0 * s + q1 * c);
          const double k0 = static_cast<double>(dk[2 * i]), k1 = static_cast<double>(dk[2 * i + 1]);
          dk[2 * i] = static_cast<T>(k0 * c - k1 * s);
          dk[2 * i + 1] = static_cast<T>(k0 * s + k1 * c);
        }
        model_detail::layer_norm_row_backward(dq, lc.qhat.data() + off, lc.q_rstd[static_cast<size_t>(t * H + h)],
                                              lp.qln_g.data(), hd, d_q.data() + off, lg.qln_g.data(),
                                              lg.qln_b.data());
        model_detail::layer_norm_row_backward(dk, lc.khat.data() + off, lc.k_rstd[static_cast<size_t>(t * H + h)],
                                              lp.kln_g.data(), hd, d_k.data() + off, lg.kln_g.data(),
                                              lg.kln_b.data());
      }
    }

    // Input linears backward. The shared input is ln1(x_in); reconstruct it
    // from the cached normalized rows.
    Tensor<T> hn({len, D});
    for (int64_t t = 0; t < len; ++t) {
      T* row = hn.data() + t * D;
      const T* xh = lc.ln1_xhat.data() + t * D;
      for (int64_t e = 0; e < D; ++e) row[e] = lp.ln1_g.v[static_cast<size_t>(e)] * xh[e] + lp.ln1_b.v[static_cast<size_t>(e)];
    }
    Tensor<T> d_hn({len, D});
    gemm_nn(d_hn.data(), d_q.data(), lp.wq.data(), len, D, D);
    gemm_nn(d_hn.data(), d_k.data(), lp.wk.data(), len, D, D);
    gemm_nn(d_hn.data(), d_v.data(), lp.wv.data(), len, D, D);
    gemm_tn(lg.wq.data(), d_q.data(), hn.data(), D, D, len);
    gemm_tn(lg.wk.data(), d_k.data(), hn.data(), D, D, len);
    gemm_tn(lg.wv.data(), d_v.data(), hn.data(), D, D, len);
    for (int64_t t = 0; t < len; ++t) {
      for (int64_t e = 0; e < D; ++e) {
        lg.bq.v[static_cast<size_t>(e)] += d_q.v[static_cast<size_t>(t * D + e)];
        lg.bk.v[static_cast<size_t>(e)] += d_k.v[static_cast<size_t>(t * D + e)];
        lg.bv.v[static_cast<size_t>(e)] += d_v.v[static_cast<size_t>(t * D + e)];
      }
    }
    // through ln1 into the block input gradient
    for (int64_t t = 0; t < len; ++t) {
      model_detail::layer_norm_row_backward(d_hn.data() + t * D, lc.ln1_xhat.data() + t * D,
                                            lc.ln1_rstd[static_cast<size_t>(t)], lp.ln1_g.data(), D,
                                            dx.data() + t * D, lg.ln1_g.data(), lg.ln1_b.data());
    }
  }

  // Embedding dropouts, then scatter into embedding parameter gradients.
  if (train) {
    model_detail::mul_inplace(dx, cache.pos_drop_m);
    model_detail::mul_inplace(dx, cache.emb_drop_m);
  }
  for (int64_t t = 0; t < len; ++t) {
    const SequenceItem& it = batch.items[t];
    const T* drow = dx.data() + t * D;
    if (it.masked) {
      for (int64_t e = 0; e < D; ++e) grads.mask_embed.v[static_cast<size_t>(e)] += drow[e];
      continue;
    }
    switch (it.modality) {
      case Modality::speaker: {
        std::vector<T> spk(kSpeakerDim);
        for (int i = 0; i < kSpeakerDim; ++i) spk[i] = static_cast<T>(it.speaker[i]);
        outer_add(grads.speaker_proj_w.data(), drow, spk.data(), D, kSpeakerDim);
        for (int64_t e = 0; e < D; ++e) grads.speaker_proj_b.v[static_cast<size_t>(e)] += drow[e];
        break;
      }
      case Modality::text:
      case Modality::bos_text:
      case Modality::eos_text: {
        T* dst = grads.text_embed.data() + static_cast<int64_t>(it.text_id) * D;
        for (int64_t e = 0; e < D; ++e) dst[e] += drow[e];
        break;
      }
      case Modality::speech: {
        const T* concat = cache.speech_concat.data() + t * Nd;
        outer_add(grads.speech_proj_w.data(), drow, concat, D, Nd);
        for (int64_t e = 0; e < D; ++e) grads.speech_proj_b.v[static_cast<size_t>(e)] += drow[e];
        std::vector<T> d_concat(static_cast<size_t>(Nd), T(0));
        matvec_t(d_concat.data(), params.speech_proj_w.data(), drow, D, Nd);
        const int64_t d = cfg.d_channel_embed;
        for (int c = 0; c < cfg.n_mels; ++c) {
          T* dst = grads.speech_embed.data() + (static_cast<int64_t>(c) * C + it.bins[static_cast<size_t>(c)]) * d;
          const T* src = d_concat.data() + static_cast<int64_t>(c) * d;
          for (int64_t e = 0; e < d; ++e) dst[e] += src[e];
        }
        break;
      }
      case Modality::bos_speech:
        for (int64_t e = 0; e < D; ++e) grads.bos_speech_embed.v[static_cast<size_t>(e)] += drow[e];
        break;
      case Modality::eos_speech:
        for (int64_t e = 0; e < D; ++e) grads.eos_speech_embed.v[static_cast<size_t>(e)] += drow[e];
        break;
    }
  }

  return total / static_cast<double>(count);
}

// --- Incremental decoding ---------------------------------------------------------

// Decoder with cached keys/values: positions are fed one at a time and
// attention reads the cache, so each push is O(length so far). Produces
// the same logits as a full forward pass (inference mode, no dropout).
template <class T>
class DecoderSession {
 public:
  DecoderSession(const Parameters<T>& params, const ModelConfig& cfg) : params_(params), cfg_(cfg) {
    cfg_.validate();
    k_cache_.assign(static_cast<size_t>(cfg.n_layers), {});
    v_cache_.assign(static_cast<size_t>(cfg.n_layers), {});
    const int64_t hd = cfg_.head_dim();
    inv_freq_.resize(static_cast<size_t>(hd / 2));
    for (int64_t i = 0; i < hd / 2; ++i) {
      inv_freq_[static_cast<size_t>(i)] =
          std::pow(cfg_.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
    }
  }

  int64_t length() const { return n_pushed_; }

  // Feeds one item; its position is the next global index.
  void push(SequenceItem item) {
    if (n_pushed_ >= cfg_.max_positions) {
      throw ArgumentError("decode: sequence length exceeds max_positions " + std::to_string(cfg_.max_positions));
    }
    item.position = static_cast<int>(n_pushed_);
    const int64_t D = cfg_.d_model;
    const int64_t H = cfg_.n_heads;
    const int64_t hd = cfg_.head_dim();
    const int64_t M = cfg_.mlp_dim();

    std::vector<T> x(static_cast<size_t>(D));
    {
      Tensor<T> emb = embed_one(item);
      std::copy(emb.v.begin(), emb.v.end(), x.begin());
    }

    std::vector<T> tmp(static_cast<size_t>(D)), xhat(static_cast<size_t>(D));
    T rstd = T(0);
    for (int layer = 0; layer < cfg_.n_layers; ++layer) {
      const LayerParams<T>& lp = params_.layers[static_cast<size_t>(layer)];
      model_detail::layer_norm_row(x.data(), lp.ln1_g.data(), lp.ln1_b.data(), D, tmp.data(), xhat.data(), &rstd);

      std::vector<T> q(lp.bq.v.begin(), lp.bq.v.end());
      std::vector<T> k(lp.bk.v.begin(), lp.bk.v.end());
      std::vector<T> v(lp.bv.v.begin(), lp.bv.v.end());
      matvec(q.data(), lp.wq.data(), tmp.data(), D, D);
      matvec(k.data(), lp.wk.data(), tmp.data(), D, D);
      matvec(v.data(), lp.wv.data(), tmp.data(), D, D);

      std::vector<T> head_buf(static_cast<size_t>(hd)), head_hat(static_cast<size_t>(hd));
      for (int64_t h = 0; h < H; ++h) {
        T* qh = q.data() + h * hd;
        T* kh = k.data() + h * hd;
        model_detail::layer_norm_row(qh, lp.qln_g.data(), lp.qln_b.data(), hd, head_buf.data(), head_hat.data(),
                                     &rstd);
        std::copy(head_buf.begin(), head_buf.end(), qh);
        model_detail::layer_norm_row(kh, lp.kln_g.data(), lp.kln_b.data(), hd, head_buf.data(), head_hat.data(),
                                     &rstd);
        std::copy(head_buf.begin(), head_buf.end(), kh);
        for (int64_t i = 0; i < hd / 2; ++i) {
          const double angle = static_cast<double>(item.position) * inv_freq_[static_cast<size_t>(i)];
          const double c = std::cos(angle), s = std::sin(angle);
          double a0 = static_cast<double>(qh[2 * i]), a1 = static_cast<double>(qh[2 * i + 1]);
          qh[2 * i] = static_cast<T>(a0 * c - a1 * s);
          qh[2 * i + 1] = static_cast<T>(a0 * s + a1 * c);
          a0 = static_cast<double>(kh[2 * i]);
          a1 = static_cast<double>(kh[2 * i + 1]);
          kh[2 * i] = static_cast<T>(a0 * c - a1 * s);
          kh[2 * i + 1] = static_cast<T>(a0 * s + a1 * c);
        }
      }
      auto& kc = k_cache_[static_cast<size_t>(layer)];
      auto& vc = v_cache_[static_cast<size_t>(layer)];
      kc.insert(kc.end(), k.begin(), k.end());
      vc.insert(vc.end(), v.begin(), v.end());
      const int64_t n = n_pushed_ + 1;

      const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
      std::vector<T> ctx(static_cast<size_t>(D), T(0));
      std::vector<double> scores(static_cast<size_t>(n));
      for (int64_t h = 0; h < H; ++h) {
        const T* qh = q.data() + h * hd;
        double max_s = -1e30;
        for (int64_t j = 0; j < n; ++j) {
          const T* kj = kc.data() + j * D + h * hd;
          double dot = 0.0;
          for (int64_t e = 0; e < hd; ++e) dot += static_cast<double>(qh[e]) * static_cast<double>(kj[e]);
          scores[static_cast<size_t>(j)] = dot * scale;
          max_s = std::max(max_s, scores[static_cast<size_t>(j)]);
        }
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) denom += std::exp(scores[static_cast<size_t>(j)] - max_s);
        T* out = ctx.data() + h * hd;
        for (int64_t j = 0; j < n; ++j) {
          const T p = static_cast<T>(std::exp(scores[static_cast<size_t>(j)] - max_s) / denom);
          const T* vj = vc.data() + j * D + h * hd;
          for (int64_t e = 0; e < hd; ++e) out[e] += p * vj[e];
        }
      }
      std::vector<T> attn_out(lp.bo.v.begin(), lp.bo.v.end());
      matvec(attn_out.data(), lp.wo.data(), ctx.data(), D, D);
      for (int64_t e = 0; e < D; ++e) x[static_cast<size_t>(e)] += attn_out[static_cast<size_t>(e)];

      model_detail::layer_norm_row(x.data(), lp.ln2_g.data(), lp.ln2_b.data(), D, tmp.data(), xhat.data(), &rstd);
      std::vector<T> pre(lp.b1.v.begin(), lp.b1.v.end());
      matvec(pre.data(), lp.w1.data(), tmp.data(), M, D);
      for (T& p : pre) p = static_cast<T>(gelu(static_cast<double>(p)));
      std::vector<T> mlp_out(lp.b2.v.begin(), lp.b2.v.end());
      matvec(mlp_out.data(), lp.w2.data(), pre.data(), D, M);
      for (int64_t e = 0; e < D; ++e) x[static_cast<size_t>(e)] += mlp_out[static_cast<size_t>(e)];
    }

    hidden_.assign(static_cast<size_t>(D), T(0));
    model_detail::layer_norm_row(x.data(), params_.lnf_g.data(), params_.lnf_b.data(), D, hidden_.data(),
                                 xhat.data(), &rstd);
    ++n_pushed_;
  }

  const std::vector<T>& hidden() const { return hidden_; }

  std::vector<T> text_logits() const {
    if (n_pushed_ == 0) throw ArgumentError("decode: no positions fed yet");
    return text_logits_from_hidden(hidden_.data(), params_, cfg_);
  }

  std::vector<T> speech_logits() const {
    if (n_pushed_ == 0) throw ArgumentError("decode: no positions fed yet");
    return speech_logits_from_hidden(hidden_.data(), params_, cfg_);
  }

 private:
  Tensor<T> embed_one(const SequenceItem& item) const {
    Tensor<T> row({cfg_.d_model});
    const int64_t D = cfg_.d_model;
    if (item.masked) {
      std::copy(params_.mask_embed.v.begin(), params_.mask_embed.v.end(), row.data());
      return row;
    }
    switch (item.modality) {
      case Modality::speaker: {
        if (item.speaker.size() != kSpeakerDim) throw ArgumentError("decode: speaker payload must have 512 entries");
        std::copy(params_.speaker_proj_b.v.begin(), params_.speaker_proj_b.v.end(), row.data());
        std::vector<T> spk(kSpeakerDim);
        for (int i = 0; i < kSpeakerDim; ++i) spk[i] = static_cast<T>(item.speaker[i]);
        matvec(row.data(), params_.speaker_proj_w.data(), spk.data(), D, kSpeakerDim);
        break;
      }
      case Modality::text:
      case Modality::bos_text:
      case Modality::eos_text: {
        if (item.text_id < 0 || item.text_id >= cfg_.text_vocab) throw ArgumentError("decode: text id out of range");
        const T* src = params_.text_embed.data() + static_cast<int64_t>(item.text_id) * D;
        std::copy(src, src + D, row.data());
        break;
      }
      case Modality::speech: {
        const std::vector<T> e = embed_speech_frame(item.bins, params_, cfg_);
        std::copy(e.begin(), e.end(), row.data());
        break;
      }
      case Modality::bos_speech:
        std::copy(params_.bos_speech_embed.v.begin(), params_.bos_speech_embed.v.end(), row.data());
        break;
      case Modality::eos_speech:
        std::copy(params_.eos_speech_embed.v.begin(), params_.eos_speech_embed.v.end(), row.data());
        break;
    }
    return row;
  }

  const Parameters<T>& params_;
  ModelConfig cfg_;
  std::vector<std::vector<T>> k_cache_, v_cache_;  // per layer, [n, D]
  std::vector<T> hidden_;
  std::vector<double> inv_freq_;
  int64_t n_pushed_ = 0;
};

// Greedy transcription: feed the speech prompt, then take argmax text
// tokens until <eos_text> or the length cap.
template <class T>
std::vector<int> decode_asr_greedy(const TokenGrid& grid, const Parameters<T>& params, const ModelConfig& cfg,
                                   int max_text_len) {
  DecoderSession<T> session(params, cfg);
  session.push({.modality = Modality::bos_speech});
  for (int64_t t = 0; t < grid.n_frames; ++t) {
    SequenceItem it{.modality = Modality::speech};
    it.bins.assign(grid.bins.begin() + t * grid.n_mels, grid.bins.begin() + (t + 1) * grid.n_mels);
    session.push(std::move(it));
  }
  session.push({.modality = Modality::eos_speech});
  session.push({.modality = Modality::bos_text, .text_id = TextVocab::kBos});

  std::vector<int> out;
  for (int step = 0; step < max_text_len; ++step) {
    if (session.length() >= cfg.max_positions) break;
    const std::vector<T> logits = session.text_logits();
    int best = 0;
    for (int i = 1; i < cfg.text_vocab; ++i) {
      if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
    }
    if (best == TextVocab::kEos) break;
    out.push_back(best);
    session.push({.modality = Modality::text, .text_id = best});
  }
  return out;
}

// Frame-parallel sampling: every step draws all N channels from their own
// softmaxes (channel order 0..N-1, one uniform draw each); temperature 0
// takes the argmax instead. Generation ends when channel 0 picks the stop
// class or at max_frames.
template <class T>
TokenGrid generate_tts(const std::vector<double>& speaker, const std::vector<int>& text_ids,
                       const Parameters<T>& params, const ModelConfig& cfg, int max_frames, double temperature,
                       Rng& rng) {
  if (temperature < 0.0) throw ArgumentError("generate: temperature must be >= 0");
  if (text_ids.empty()) throw ArgumentError("generate: empty text");
  DecoderSession<T> session(params, cfg);
  SequenceItem spk{.modality = Modality::speaker};
  spk.speaker = speaker;
  session.push(std::move(spk));
  session.push({.modality = Modality::bos_text, .text_id = TextVocab::kBos});
  for (const int id : text_ids) session.push({.modality = Modality::text, .text_id = id});
  session.push({.modality = Modality::eos_text, .text_id = TextVocab::kEos});
  session.push({.modality = Modality::bos_speech});

  TokenGrid grid;
  grid.n_frames = 0;
  grid.n_mels = cfg.n_mels;
  grid.bits = cfg.bits;
  grid.frame_rate_hz = 0;  // caller stamps the frame rate from its codebook

  auto pick = [&](const T* block, int64_t n) -> int64_t {
    if (temperature == 0.0) {
      int64_t best = 0;
      for (int64_t i = 1; i < n; ++i) {
        if (block[i] > block[best]) best = i;
      }
      return best;
    }
    std::vector<double> p(static_cast<size_t>(n));
    double max_l = -1e30;
    for (int64_t i = 0; i < n; ++i) max_l = std::max(max_l, static_cast<double>(block[i]) / temperature);
    double denom = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      p[static_cast<size_t>(i)] = std::exp(static_cast<double>(block[i]) / temperature - max_l);
      denom += p[static_cast<size_t>(i)];
    }
    const double u = rng.uniform() * denom;
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      acc += p[static_cast<size_t>(i)];
      if (u < acc) return i;
    }
    return n - 1;
  };

  for (int frame = 0; frame < max_frames; ++frame) {
    if (session.length() >= cfg.max_positions) break;
    const std::vector<T> logits = session.speech_logits();
    const int64_t ch0 = pick(logits.data(), cfg.n_codes() + 1);
    if (ch0 == cfg.n_codes()) break;  // stop class
    std::vector<uint16_t> bins(static_cast<size_t>(cfg.n_mels));
    bins[0] = static_cast<uint16_t>(ch0);
    for (int c = 1; c < cfg.n_mels; ++c) {
      bins[static_cast<size_t>(c)] =
          static_cast<uint16_t>(pick(logits.data() + speech_block_offset(c, cfg), cfg.n_codes()));
    }
    grid.bins.insert(grid.bins.end(), bins.begin(), bins.end());
    ++grid.n_frames;
    SequenceItem it{.modality = Modality::speech};
    it.bins = std::move(bins);
    session.push(std::move(it));
  }
  return grid;
}

}  // namespace dmel

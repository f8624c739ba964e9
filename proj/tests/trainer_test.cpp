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

#include "dmel/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "dmel/dsp.hpp"
#include "dmel/errors.hpp"
#include "dmel/rng.hpp"

namespace dmel {
namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_channel_embed = 2;
  cfg.bits = 2;
  cfg.n_mels = 3;
  cfg.text_vocab = 6;  // specials + "ab"
  cfg.max_positions = 64;
  cfg.dropout_residual = 0.0;
  cfg.dropout_attention = 0.0;
  cfg.dropout_embedding = 0.0;
  cfg.dropout_positional = 0.0;
  return cfg;
}

TrainConfig tiny_train(Task task) {
  TrainConfig cfg = TrainConfig::for_task(task);
  cfg.warmup_steps = 2;
  cfg.total_steps = 100;
  cfg.batch_size = 2;
  cfg.mask_p_apply = 0.5;
  cfg.use_spec_augment = true;
  return cfg;
}

Codebook tiny_codebook(const ModelConfig& m) {
  Codebook cb;
  cb.min_val = -4.0;
  cb.max_val = 0.0;
  cb.bits = m.bits;
  cb.n_mels = m.n_mels;
  cb.frontend.n_mels = m.n_mels;
  return cb;
}

std::vector<TrainItem> tiny_items(const ModelConfig& m, int count) {
  std::vector<TrainItem> items;
  Rng rng = make_rng(100, "items");
  for (int i = 0; i < count; ++i) {
    TrainItem item;
    item.grid.n_frames = 3 + (i % 4);
    item.grid.n_mels = m.n_mels;
    item.grid.bits = m.bits;
    item.grid.frame_rate_hz = 40;
    item.grid.bins.resize(static_cast<size_t>(item.grid.n_frames) * m.n_mels);
    for (auto& b : item.grid.bins) b = static_cast<uint16_t>(rng.uniform_int(m.n_codes()));
    item.text_ids = {4, 5};
    if (i % 2 == 1) item.text_ids.push_back(4);
    item.speaker = speaker_vector(i % 3);
    item.speaker_id = i % 3;
    item.transcript = i % 2 == 1 ? "aba" : "ab";
    items.push_back(std::move(item));
  }
  return items;
}

bool params_equal(const Parameters<float>& a, const Parameters<float>& b) {
  bool equal = true;
  a.for_each([&](const std::string& name, const Tensor<float>& ta) {
    b.for_each([&](const std::string& bname, const Tensor<float>& tb) {
      if (bname == name && ta.v != tb.v) equal = false;
    });
  });
  return equal;
}

TEST(LrScheduleTest, WarmupCosineAndBounds) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup_steps = 4000;
  cfg.total_steps = 10000;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(2000, cfg), 0.5e-3);
  EXPECT_DOUBLE_EQ(lr_at(4000, cfg), 1e-3);
  // Halfway through the decay the cosine sits at half the peak.
  EXPECT_NEAR(lr_at(7000, cfg), 0.5e-3, 1e-15);
  EXPECT_GT(lr_at(9999, cfg), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(10000, cfg), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(20000, cfg), 0.0);
  EXPECT_THROW(lr_at(-1, cfg), ArgumentError);

  TrainConfig instant = cfg;
  instant.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(lr_at(0, instant), 1e-3);

  // Decay is monotone after the peak.
  double prev = lr_at(4000, cfg);
  for (int64_t s = 4500; s < 10000; s += 500) {
    const double cur = lr_at(s, cfg);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(TrainConfigTest, TaskDefaultsAndValidation) {
  EXPECT_EQ(TrainConfig::for_task(Task::asr).warmup_steps, 4000);
  EXPECT_DOUBLE_EQ(TrainConfig::for_task(Task::asr).grad_clip, 0.1);
  EXPECT_EQ(TrainConfig::for_task(Task::tts).warmup_steps, 5000);
  EXPECT_DOUBLE_EQ(TrainConfig::for_task(Task::tts).grad_clip, 1.0);
  EXPECT_EQ(TrainConfig::for_task(Task::joint).warmup_steps, 4000);
  EXPECT_DOUBLE_EQ(TrainConfig::for_task(Task::joint).grad_clip, 0.1);

  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.warmup_steps = bad.total_steps;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.grad_clip = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.mask_ratio = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);

  EXPECT_EQ(task_name(Task::joint), "joint");
  EXPECT_EQ(parse_task("tts"), Task::tts);
  EXPECT_THROW(parse_task("both"), ArgumentError);
}

TEST(AdamTest, ClipsGradientsToTheConfiguredNorm) {
  const ModelConfig m = tiny_model();
  Parameters<float> params, grads;
  params.resize(m);
  params.zero();
  grads.resize(m);
  grads.for_each([](const std::string&, Tensor<float>& t) {
    for (float& g : t.v) g = 5.0f;
  });
  AdamState state;
  state.init(m);
  TrainConfig cfg;
  cfg.grad_clip = 0.1;
  adam_update(params, grads, state, cfg, 1e-3);
  EXPECT_EQ(state.step, 1);
  EXPECT_NEAR(global_grad_norm(grads), 0.1, 1e-6);

  // Small gradients pass through unclipped.
  Parameters<float> small;
  small.resize(m);
  small.zero();
  small.text_embed.v[0] = 1e-4f;
  adam_update(params, small, state, cfg, 1e-3);
  EXPECT_NEAR(global_grad_norm(small), 1e-4, 1e-10);
}

TEST(AdamTest, FirstStepMovesEachCoordinateByTheLearningRate) {
  const ModelConfig m = tiny_model();
  Parameters<float> params, grads;
  params.resize(m);
  params.zero();
  grads.resize(m);
  int sign = 1;
  grads.for_each([&](const std::string&, Tensor<float>& t) {
    for (float& g : t.v) {
      g = static_cast<float>(sign);
      sign = -sign;
    }
  });
  AdamState state;
  state.init(m);
  TrainConfig cfg;
  cfg.grad_clip = 1e12;  // effectively unclipped
  adam_update(params, grads, state, cfg, 1e-3);
  params.for_each([&](const std::string& name, Tensor<float>& t) {
    grads.for_each([&](const std::string& gname, Tensor<float>& g) {
      if (gname != name) return;
      for (size_t i = 0; i < t.v.size(); ++i) {
        EXPECT_NEAR(t.v[i], -1e-3 * (g.v[i] > 0 ? 1.0 : -1.0), 1e-9) << name;
      }
    });
  });
}

TEST(AdamTest, NonFiniteGradientsRaiseDivergence) {
  const ModelConfig m = tiny_model();
  Parameters<float> params, grads;
  params.resize(m);
  params.zero();
  grads.resize(m);
  grads.zero();
  grads.text_embed.v[0] = std::numeric_limits<float>::quiet_NaN();
  AdamState state;
  state.init(m);
  TrainConfig cfg;
  EXPECT_THROW(adam_update(params, grads, state, cfg, 1e-3), DivergenceError);
}

TEST(CheckpointTest, EncodeDecodeRoundTripIsBitExact) {
  const ModelConfig m = tiny_model();
  Trainer trainer(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 3));
  for (int i = 0; i < 3; ++i) trainer.step();

  const Checkpoint c = trainer.make_checkpoint();
  const std::vector<uint8_t> bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.opt.step, 3);
  EXPECT_TRUE(back.model == m);
  EXPECT_TRUE(back.train == trainer.train_config());
  EXPECT_EQ(back.vocab.chars(), "ab");
  EXPECT_EQ(back.codebook.min_val, c.codebook.min_val);
  EXPECT_EQ(back.codebook.bits, 2);
  EXPECT_TRUE(back.has_optimizer);
  EXPECT_TRUE(params_equal(back.params, c.params));
  EXPECT_TRUE(params_equal(back.opt.m, c.opt.m));
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(CheckpointTest, OptionalOptimizerState) {
  const ModelConfig m = tiny_model();
  Trainer trainer(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 3));
  Checkpoint c = trainer.make_checkpoint();
  c.has_optimizer = false;
  const std::vector<uint8_t> bytes = encode_checkpoint(c);
  EXPECT_LT(bytes.size(), encode_checkpoint(trainer.make_checkpoint()).size());
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_FALSE(back.has_optimizer);
  EXPECT_THROW(Trainer(back, tiny_items(m, 3)), ArgumentError);
}

TEST(CheckpointTest, RejectsCorruptedBytes) {
  const ModelConfig m = tiny_model();
  Trainer trainer(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 3));
  const std::vector<uint8_t> bytes = encode_checkpoint(trainer.make_checkpoint());

  std::vector<uint8_t> bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);

  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(decode_checkpoint(bad), FormatError);

  bad = bytes;
  bad.resize(bad.size() / 2);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);

  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);

  EXPECT_THROW(decode_checkpoint(std::vector<uint8_t>{'D', 'M'}), FormatError);
}

TEST(CheckpointTest, DirectoryLayoutAndLatestPointer) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "dmel_ckpt_test";
  std::filesystem::remove_all(dir);
  const ModelConfig m = tiny_model();
  Trainer trainer(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 3));
  trainer.step();
  trainer.step();

  EXPECT_EQ(checkpoint_file_name(2), "ckpt-00000002.dmck");
  EXPECT_EQ(checkpoint_file_name(12345678), "ckpt-12345678.dmck");

  const std::string path = save_checkpoint_dir(trainer.make_checkpoint(), dir.string());
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt-00000002.dmck"));
  EXPECT_EQ(path, (dir / "ckpt-00000002.dmck").string());
  std::ifstream pointer(dir / "latest");
  std::string name;
  std::getline(pointer, name);
  EXPECT_EQ(name, "ckpt-00000002.dmck");

  const Checkpoint latest = load_latest_checkpoint(dir.string());
  EXPECT_EQ(latest.opt.step, 2);

  std::ofstream(dir / "latest", std::ios::trunc) << "../evil.dmck\n";
  EXPECT_THROW(load_latest_checkpoint(dir.string()), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(TrainerTest, IdenticalRunsProduceIdenticalResults) {
  const ModelConfig m = tiny_model();
  Trainer a(m, tiny_train(Task::joint), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 5));
  Trainer b(m, tiny_train(Task::joint), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 5));
  for (int i = 0; i < 6; ++i) {
    a.step();
    b.step();
  }
  EXPECT_EQ(a.loss_log(), b.loss_log());
  EXPECT_TRUE(params_equal(a.params(), b.params()));
  EXPECT_EQ(a.steps_done(), 6);
}

TEST(TrainerTest, ResumeFromCheckpointMatchesUninterruptedRun) {
  const ModelConfig m = tiny_model();
  Trainer full(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 5));
  Trainer half(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 5));
  for (int i = 0; i < 10; ++i) full.step();
  for (int i = 0; i < 5; ++i) half.step();

  // Serialize through bytes so the resumed run sees exactly what a reload
  // would see.
  const Checkpoint mid = decode_checkpoint(encode_checkpoint(half.make_checkpoint()));
  Trainer resumed(mid, tiny_items(m, 5));
  EXPECT_EQ(resumed.steps_done(), 5);
  for (int i = 0; i < 5; ++i) resumed.step();

  EXPECT_TRUE(params_equal(full.params(), resumed.params()));
  for (int i = 5; i < 10; ++i) {
    EXPECT_EQ(full.loss_log()[static_cast<size_t>(i)], resumed.loss_log()[static_cast<size_t>(i - 5)]);
  }
}

TEST(TrainerTest, NonFiniteLossRaisesDivergenceWithoutAnUpdate) {
  const ModelConfig m = tiny_model();
  Trainer trainer(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 3));
  trainer.step();
  trainer.params().text_embed.v[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(trainer.step(), DivergenceError);
  EXPECT_EQ(trainer.steps_done(), 1);
}

TEST(TrainerTest, JointTrainingAlternatesTasks) {
  const ModelConfig m = tiny_model();
  Trainer trainer(m, tiny_train(Task::joint), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 4));
  for (int i = 0; i < 24; ++i) trainer.step();
  int asr = 0, tts = 0;
  for (const std::string& line : trainer.loss_log()) {
    if (line.find("task=asr") != std::string::npos) ++asr;
    if (line.find("task=tts") != std::string::npos) ++tts;
  }
  EXPECT_EQ(asr + tts, 24);
  EXPECT_GT(asr, 0);
  EXPECT_GT(tts, 0);

  // The per-step coin is unbiased over a long horizon.
  int heads = 0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) {
    Rng coin = make_rng(trainer.train_config().seed, "task", static_cast<uint64_t>(s));
    if (coin.uniform() < 0.5) ++heads;
  }
  EXPECT_NEAR(static_cast<double>(heads) / n, 0.5, 0.02);
}

TEST(TrainerTest, LossLogFormatAndEvalLoss) {
  const ModelConfig m = tiny_model();
  Trainer trainer(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), tiny_items(m, 3));
  trainer.step();
  ASSERT_EQ(trainer.loss_log().size(), 1u);
  EXPECT_EQ(trainer.loss_log()[0].rfind("step=0 task=asr loss=", 0), 0u);

  const double e1 = trainer.eval_supervised_loss(Task::asr);
  const double e2 = trainer.eval_supervised_loss(Task::asr);
  EXPECT_TRUE(std::isfinite(e1));
  EXPECT_GT(e1, 0.0);
  EXPECT_DOUBLE_EQ(e1, e2);
  EXPECT_TRUE(std::isfinite(trainer.eval_supervised_loss(Task::tts)));
  EXPECT_THROW(trainer.eval_supervised_loss(Task::joint), ArgumentError);
}

TEST(TrainerTest, RejectsInconsistentSetups) {
  const ModelConfig m = tiny_model();
  const TrainConfig t = tiny_train(Task::asr);
  const TextVocab vocab = TextVocab::from_chars("ab");
  const Codebook cb = tiny_codebook(m);

  EXPECT_THROW(Trainer(m, t, vocab, cb, {}), ArgumentError);
  EXPECT_THROW(Trainer(m, t, TextVocab::from_chars("abc"), cb, tiny_items(m, 2)), ConfigError);

  Codebook wrong_bits = cb;
  wrong_bits.bits = 4;
  EXPECT_THROW(Trainer(m, t, vocab, wrong_bits, tiny_items(m, 2)), ConfigError);

  std::vector<TrainItem> bad = tiny_items(m, 2);
  bad[0].grid.n_frames = 0;
  bad[0].grid.bins.clear();
  EXPECT_THROW(Trainer(m, t, vocab, cb, bad), ArgumentError);

  bad = tiny_items(m, 2);
  bad[1].speaker.resize(10);
  EXPECT_THROW(Trainer(m, t, vocab, cb, bad), ArgumentError);

  bad = tiny_items(m, 2);
  bad[0].text_ids.clear();
  EXPECT_THROW(Trainer(m, t, vocab, cb, bad), ArgumentError);
}

TEST(TrainerTest, FillBinIsTheClampedCorpusMean) {
  const ModelConfig m = tiny_model();
  std::vector<TrainItem> items = tiny_items(m, 4);
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& item : items) {
    for (const uint16_t b : item.grid.bins) sum += b;
    n += static_cast<int64_t>(item.grid.bins.size());
  }
  const int64_t expected = std::llround(sum / static_cast<double>(n));
  Trainer trainer(m, tiny_train(Task::asr), TextVocab::from_chars("ab"), tiny_codebook(m), items);
  EXPECT_EQ(trainer.fill_bin(), static_cast<uint16_t>(expected));
}

TEST(SynthCorpusTest, WaveShapeRampsAndDeterminism) {
  const TextVocab vocab = TextVocab::from_chars("abcdefghijklmnopqrstuvwxyz ");
  const Waveform w = synth_utterance_wave("abc", vocab, 1);
  EXPECT_EQ(w.sample_rate_hz, 16000);
  EXPECT_EQ(w.samples.size(), 3u * 1600u);
  EXPECT_EQ(w.samples[0], 0.0);
  double peak = 0.0;
  for (const double s : w.samples) peak = std::max(peak, std::abs(s));
  EXPECT_LE(peak, 0.7 + 1e-9);
  EXPECT_GT(peak, 0.2);

  const Waveform again = synth_utterance_wave("abc", vocab, 1);
  EXPECT_EQ(w.samples, again.samples);
  const Waveform other_speaker = synth_utterance_wave("abc", vocab, 2);
  EXPECT_NE(w.samples, other_speaker.samples);

  EXPECT_THROW(synth_utterance_wave("", vocab, 1), ArgumentError);
  EXPECT_THROW(synth_utterance_wave("a#b", vocab, 1), ArgumentError);
}

TEST(SynthCorpusTest, CharacterFrequenciesSpanTheMelRange) {
  EXPECT_NEAR(char_fundamental_hz(0, 27), 200.0, 1e-6);
  EXPECT_NEAR(char_fundamental_hz(26, 27), 3800.0, 1e-6);
  double prev = 0.0;
  for (int i = 0; i < 27; ++i) {
    const double f = char_fundamental_hz(i, 27);
    EXPECT_GT(f, prev);
    prev = f;
  }
  EXPECT_THROW(char_fundamental_hz(27, 27), ArgumentError);
  EXPECT_THROW(char_fundamental_hz(-1, 27), ArgumentError);

  // Distinct characters excite distinct filterbank channels.
  const TextVocab vocab = TextVocab::from_chars("abcdefghijklmnopqrstuvwxyz");
  FrontendConfig fe;
  fe.frame_rate_hz = 80;
  std::vector<int> channels;
  for (const char c : {'a', 'm', 'z'}) {
    const Waveform w = synth_utterance_wave(std::string(1, c), vocab, 0);
    const MelSpectrogram mel = melspec(w, fe);
    ASSERT_GE(mel.n_frames, 3);
    const int64_t mid = mel.n_frames / 2;
    int best = 0;
    for (int j = 1; j < mel.n_mels; ++j) {
      if (mel.at(mid, j) > mel.at(mid, best)) best = j;
    }
    channels.push_back(best);
  }
  EXPECT_LT(channels[0], channels[1]);
  EXPECT_LT(channels[1], channels[2]);
}

TEST(SynthCorpusTest, SpeakerVectorsAndTilts) {
  const std::vector<double> v0 = speaker_vector(0);
  const std::vector<double> v1 = speaker_vector(1);
  EXPECT_EQ(v0.size(), static_cast<size_t>(kSpeakerDim));
  EXPECT_NE(v0, v1);
  EXPECT_EQ(v0, speaker_vector(0));
  double norm_sq = 0.0;
  for (const double x : v0) norm_sq += x * x;
  EXPECT_NEAR(norm_sq, 1.0, 0.3);

  for (int64_t id = 0; id < 8; ++id) {
    const double tilt = speaker_tilt(id);
    EXPECT_GE(tilt, -0.4);
    EXPECT_LE(tilt, 0.4);
  }
  EXPECT_NE(speaker_tilt(0), speaker_tilt(1));
}

TEST(SynthCorpusTest, CorpusGeneratorIsDeterministicAndBounded) {
  const TextVocab vocab = TextVocab::from_chars("abcd");
  Rng r1 = make_rng(5, "corpus");
  Rng r2 = make_rng(5, "corpus");
  const std::vector<SynthUtterance> a = make_synthetic_corpus(20, vocab, r1, 3);
  const std::vector<SynthUtterance> b = make_synthetic_corpus(20, vocab, r2, 3);
  ASSERT_EQ(a.size(), 20u);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_GE(a[i].transcript.size(), 3u);
    EXPECT_LE(a[i].transcript.size(), 12u);
    EXPECT_GE(a[i].speaker_id, 0);
    EXPECT_LT(a[i].speaker_id, 3);
    EXPECT_EQ(a[i].wav.samples.size(), a[i].transcript.size() * 1600u);
    EXPECT_EQ(a[i].transcript, b[i].transcript);
    EXPECT_EQ(a[i].wav.samples, b[i].wav.samples);
  }
  EXPECT_THROW(make_synthetic_corpus(0, vocab, r1, 3), ArgumentError);
  EXPECT_THROW(make_synthetic_corpus(5, TextVocab(), r1, 3), ArgumentError);
}

}  // namespace
}  // namespace dmel

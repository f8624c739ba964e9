// Copyright 2026 The dmel authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Overfits a small joint model on a handful of synthetic utterances, then
// transcribes them back and resynthesizes one from text. Takes a couple of
// minutes on one core.

#include <iostream>
#include <string>
#include <vector>

#include "dmel/codec.hpp"
#include "dmel/dsp.hpp"
#include "dmel/metrics.hpp"
#include "dmel/model.hpp"
#include "dmel/train.hpp"

int main() {
  using namespace dmel;
  const TextVocab vocab = TextVocab::from_chars("abcdefghijklmnopqrstuvwxyz ");
  Rng corpus_rng = make_rng(7, "corpus");
  const std::vector<SynthUtterance> utts = make_synthetic_corpus(4, vocab, corpus_rng, 2);

  FrontendConfig fe;
  std::vector<MelSpectrogram> mels;
  for (const SynthUtterance& u : utts) mels.push_back(melspec(u.wav, fe));
  const Codebook cb = fit_codebook(mels, 4, fe);

  std::vector<TrainItem> items;
  for (size_t i = 0; i < utts.size(); ++i) {
    items.push_back({tokenize(mels[i], cb), vocab.encode(utts[i].transcript), speaker_vector(utts[i].speaker_id),
                     utts[i].speaker_id, utts[i].transcript});
  }

  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_model = 64;
  mc.d_channel_embed = 4;
  mc.text_vocab = vocab.size();
  mc.dropout_residual = mc.dropout_attention = mc.dropout_embedding = mc.dropout_positional = 0.0;

  TrainConfig tc = TrainConfig::for_task(Task::joint);
  tc.total_steps = 600;
  tc.warmup_steps = 60;
  tc.batch_size = static_cast<int>(items.size());
  tc.mask_p_apply = 0.0;
  tc.use_spec_augment = false;

  Trainer trainer(mc, tc, vocab, cb, items);
  std::cout << "training on " << items.size() << " utterances, " << trainer.params().n_params() << " parameters\n";
  for (int64_t s = 0; s < tc.total_steps; ++s) {
    const double loss = trainer.step();
    if (s % 100 == 0 || s + 1 == tc.total_steps) {
      std::cout << "step " << s << " loss " << loss << "\n";
    }
  }
  std::cout << "eval: asr_loss=" << trainer.eval_supervised_loss(Task::asr)
            << " tts_loss=" << trainer.eval_supervised_loss(Task::tts) << "\n";

  for (const TrainItem& item : items) {
    const std::vector<int> ids = decode_asr_greedy(item.grid, trainer.params(), mc, 40);
    std::cout << "asr: ref=\"" << item.transcript << "\" hyp=\"" << vocab.decode(ids) << "\"\n";
  }

  Rng gen_rng = make_rng(7, "generate");
  TokenGrid spoken = generate_tts(items[0].speaker, items[0].text_ids, trainer.params(), mc, 200, 0.0, gen_rng);
  spoken.frame_rate_hz = cb.frontend.frame_rate_hz;
  std::cout << "tts: \"" << items[0].transcript << "\" -> " << spoken.n_frames << " frames (reference "
            << items[0].grid.n_frames << ")";
  if (spoken.n_frames == items[0].grid.n_frames) {
    std::cout << ", bin match " << bin_match_fraction(items[0].grid, spoken);
  }
  std::cout << "\n";
  return 0;
}

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

// dmel command line tool. Subcommands cover the full pipeline: synthesizing
// a toy corpus, fitting a codebook, tokenizing and reconstructing audio,
// training the sequence model, and running ASR/TTS inference with it.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 malformed or
// unreadable data, 3 training divergence.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmel/audio.hpp"
#include "dmel/codec.hpp"
#include "dmel/dsp.hpp"
#include "dmel/errors.hpp"
#include "dmel/metrics.hpp"
#include "dmel/model.hpp"
#include "dmel/rng.hpp"
#include "dmel/sequence.hpp"
#include "dmel/token_io.hpp"
#include "dmel/train.hpp"

namespace {

using namespace dmel;

std::string fmt(double v) { return io_detail::format_double(v); }

// Speaker ids in manifests are free-form strings. Decimal ids map to their
// value so synthetic corpora round-trip exactly; anything else is hashed
// (FNV-1a) to a stable non-negative integer.
int64_t speaker_ordinal(const std::string& id) {
  if (!id.empty() && id.size() <= 18 && id.find_first_not_of("0123456789") == std::string::npos) {
    return std::stoll(id);
  }
  uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return static_cast<int64_t>(h & 0x7fffffffffffffffull);
}

MelSpectrogram mel_of_file(const std::string& path, const FrontendConfig& fe) {
  return melspec(read_wav(path), fe);
}

Checkpoint load_checkpoint_arg(const std::string& ckpt) {
  if (std::filesystem::is_directory(ckpt)) return load_latest_checkpoint(ckpt);
  return load_checkpoint(ckpt);
}

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

// key=value config file for a subcommand. Applied after the command line is
// parsed, and only to options the command line left untouched, so the
// precedence is: flag beats file beats built-in default. (CLI11 reads a
// config file only for the app parse() ran on, not for subcommands.)
void apply_config_file(CLI::App* cmd, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = path + ":" + std::to_string(line_no);
    const std::string stripped = trim(line.substr(0, std::min(line.find('#'), line.find(';'))));
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt == nullptr || !opt->get_configurable()) throw ConfigError(where + ": unknown option \"" + key + "\"");
    if (opt->count() > 0) continue;  // set on the command line
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error&) {
      throw ConfigError(where + ": bad value \"" + value + "\" for \"" + key + "\"");
    }
  }
}

struct FitArgs {
  std::string manifest;
  std::string out;
  int bits = 4;
  int mels = 80;
  int frame_rate = 40;
};

int cmd_fit_codebook(const FitArgs& a) {
  FrontendConfig fe;
  fe.n_mels = a.mels;
  fe.frame_rate_hz = a.frame_rate;
  fe.validate();
  const std::vector<ManifestEntry> entries = load_manifest(a.manifest);
  CodebookFitter fitter;
  for (const ManifestEntry& e : entries) fitter.add(mel_of_file(e.audio_path, fe));
  const Codebook cb = fitter.finish(a.bits, fe);
  save_codebook(cb, a.out);
  std::cout << "codebook=" << a.out << " files=" << entries.size() << " min_val=" << fmt(cb.min_val)
            << " max_val=" << fmt(cb.max_val) << " delta=" << fmt(cb.delta()) << " bits=" << cb.bits
            << " n_mels=" << cb.n_mels << " frame_rate_hz=" << cb.frontend.frame_rate_hz << "\n";
  return 0;
}

struct TokenizeArgs {
  std::string codebook;
  std::string in;
  std::string out;
};

int cmd_tokenize(const TokenizeArgs& a) {
  const Codebook cb = load_codebook(a.codebook);
  const TokenGrid grid = tokenize(mel_of_file(a.in, cb.frontend), cb);
  save_tokens(grid, a.out);
  std::cout << "tokens=" << a.out << " n_frames=" << grid.n_frames << " n_mels=" << grid.n_mels
            << " bits=" << grid.bits << " bitrate_bps=" << token_bitrate_bps(cb) << "\n";
  return 0;
}

struct DetokenizeArgs {
  std::string codebook;
  std::string in;
  std::string out;
  int iters = 32;
};

int cmd_detokenize(const DetokenizeArgs& a) {
  const Codebook cb = load_codebook(a.codebook);
  const TokenGrid grid = load_tokens(a.in);
  const MelSpectrogram mel = detokenize(grid, cb);
  const Waveform wav = approx_invert(mel, cb.frontend, a.iters);
  write_wav(wav, a.out);
  std::cout << "wav=" << a.out << " n_samples=" << wav.samples.size() << " duration_s=" << fmt(wav.duration_s())
            << "\n";
  return 0;
}

struct ReportArgs {
  std::string codebook;
  std::string manifest;
};

int cmd_roundtrip_report(const ReportArgs& a) {
  const Codebook cb = load_codebook(a.codebook);
  const std::vector<ManifestEntry> entries = load_manifest(a.manifest);
  if (entries.empty()) throw DataError(a.manifest + ": manifest lists no audio files");
  double snr_sum = 0.0, lsd_sum = 0.0, lsd_max = 0.0;
  for (const ManifestEntry& e : entries) {
    const MelSpectrogram mel = mel_of_file(e.audio_path, cb.frontend);
    const MelSpectrogram recon = detokenize(tokenize(mel, cb), cb);
    const double snr = quantization_snr_db(mel, recon);
    const double lsd = log_spectral_distance(mel, recon);
    snr_sum += snr;
    lsd_sum += lsd;
    lsd_max = std::max(lsd_max, lsd);
    std::cout << "file=" << e.audio_path << " n_frames=" << mel.n_frames << " snr_db=" << fmt(snr)
              << " lsd=" << fmt(lsd) << "\n";
  }
  const double n = static_cast<double>(entries.size());
  std::cout << "files=" << entries.size() << " bitrate_bps=" << token_bitrate_bps(cb)
            << " mean_snr_db=" << fmt(snr_sum / n) << " mean_lsd=" << fmt(lsd_sum / n)
            << " max_lsd=" << fmt(lsd_max) << "\n";
  return 0;
}

struct TrainArgs {
  std::string task;
  std::string data;
  std::string out;
  ModelConfig model;
  // Sentinels resolved against the task preset: warmup < 0 and grad_clip <= 0
  // mean "use the preset value".
  int64_t steps = 10000;
  int64_t warmup = -1;
  double lr = 1e-3;
  double grad_clip = 0.0;
  int batch_size = 8;
  uint64_t seed = 0;
  double mask_p = 0.8;
  int mask_span = 3;
  double mask_ratio = 0.5;
  double text_mask_p = 0.0;
  bool spec_augment = true;
  int64_t checkpoint_every = 500;
  int frame_rate = 40;
};

int cmd_train(const TrainArgs& a) {
  const Task task = parse_task(a.task);
  TrainConfig tc = TrainConfig::for_task(task);
  tc.lr = a.lr;
  tc.total_steps = a.steps;
  if (a.warmup >= 0) {
    tc.warmup_steps = a.warmup;
  } else if (tc.warmup_steps >= a.steps) {
    tc.warmup_steps = a.steps / 10;
  }
  if (a.grad_clip > 0.0) tc.grad_clip = a.grad_clip;
  tc.batch_size = a.batch_size;
  tc.seed = a.seed;
  tc.mask_p_apply = a.mask_p;
  tc.mask_mean_span = a.mask_span;
  tc.mask_ratio = a.mask_ratio;
  tc.text_mask_p_apply = a.text_mask_p;
  tc.use_spec_augment = a.spec_augment;
  tc.checkpoint_every = a.checkpoint_every;
  tc.validate();

  FrontendConfig fe;
  fe.n_mels = a.model.n_mels;
  fe.frame_rate_hz = a.frame_rate;
  fe.validate();

  const std::vector<ManifestEntry> entries = load_manifest(a.data);
  std::vector<MelSpectrogram> mels;
  mels.reserve(entries.size());
  std::set<char> chars;
  for (const ManifestEntry& e : entries) {
    mels.push_back(mel_of_file(e.audio_path, fe));
    for (const char c : e.transcript) chars.insert(c);
  }
  const Codebook cb = fit_codebook(mels, a.model.bits, fe);
  const TextVocab vocab = TextVocab::from_chars(std::string(chars.begin(), chars.end()));

  ModelConfig mc = a.model;
  mc.text_vocab = vocab.size();
  mc.validate();

  std::vector<TrainItem> items;
  items.reserve(entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    TrainItem item;
    item.grid = tokenize(mels[i], cb);
    item.text_ids = vocab.encode(entries[i].transcript);
    item.speaker_id = speaker_ordinal(entries[i].speaker_id);
    item.speaker = speaker_vector(item.speaker_id);
    item.transcript = entries[i].transcript;
    items.push_back(std::move(item));
  }
  mels.clear();

  std::filesystem::create_directories(a.out);
  save_codebook(cb, (std::filesystem::path(a.out) / "codebook.txt").string());
  save_vocab(vocab, (std::filesystem::path(a.out) / "vocab.txt").string());

  Trainer trainer(mc, tc, vocab, cb, std::move(items));
  std::cout << "task=" << task_name(task) << " items=" << trainer.items().size() << " vocab=" << vocab.size()
            << " params=" << trainer.params().n_params() << " steps=" << tc.total_steps << "\n";
  std::string last_ckpt;
  for (int64_t s = 0; s < tc.total_steps; ++s) {
    trainer.step();
    std::cout << trainer.loss_log().back() << "\n";
    if ((s + 1) % tc.checkpoint_every == 0 && s + 1 < tc.total_steps) {
      last_ckpt = save_checkpoint_dir(trainer.make_checkpoint(), a.out);
      std::cout << "checkpoint=" << last_ckpt << "\n";
    }
  }
  last_ckpt = save_checkpoint_dir(trainer.make_checkpoint(), a.out);

  const std::string log_path = (std::filesystem::path(a.out) / "train_log.txt").string();
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw IoError(log_path + ": cannot open for writing");
  for (const std::string& line : trainer.loss_log()) log << line << "\n";
  if (!log.flush()) throw IoError(log_path + ": write failed");

  std::cout << "checkpoint=" << last_ckpt << " train_log=" << log_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string manifest;
  int max_text_len = 200;
};

int cmd_eval_asr(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint_arg(a.ckpt);
  const std::vector<ManifestEntry> entries = load_manifest(a.manifest);
  if (entries.empty()) throw DataError(a.manifest + ": manifest lists no audio files");
  int64_t word_errors = 0, word_count = 0, char_errors = 0, char_count = 0;
  for (const ManifestEntry& e : entries) {
    const TokenGrid grid = tokenize(mel_of_file(e.audio_path, ckpt.codebook.frontend), ckpt.codebook);
    const std::vector<int> ids = decode_asr_greedy(grid, ckpt.params, ckpt.model, a.max_text_len);
    const std::string hyp = ckpt.vocab.decode(ids);
    const std::vector<std::string> rw = split_words(normalize_text(e.transcript));
    const std::vector<std::string> hw = split_words(normalize_text(hyp));
    word_errors += edit_distance(rw, hw);
    word_count += static_cast<int64_t>(rw.size());
    const std::string rc = normalize_text(e.transcript);
    char_errors += edit_distance(rc, normalize_text(hyp));
    char_count += static_cast<int64_t>(rc.size());
    std::cout << "file=" << e.audio_path << "\tref=" << e.transcript << "\thyp=" << hyp << "\n";
  }
  const double wer = static_cast<double>(word_errors) / static_cast<double>(std::max<int64_t>(1, word_count));
  const double cer = static_cast<double>(char_errors) / static_cast<double>(std::max<int64_t>(1, char_count));
  std::cout << "utterances=" << entries.size() << " wer=" << fmt(wer) << " cer=" << fmt(cer) << "\n";
  return 0;
}

struct GenerateArgs {
  std::string ckpt;
  std::string text;
  std::string speaker = "0";
  std::string out;
  int max_frames = 512;
  double temperature = 0.0;
  uint64_t seed = 0;
  int iters = 32;
};

int cmd_generate(const GenerateArgs& a) {
  const Checkpoint ckpt = load_checkpoint_arg(a.ckpt);
  const std::vector<int> ids = ckpt.vocab.encode(a.text);
  const std::vector<double> speaker = speaker_vector(speaker_ordinal(a.speaker));
  Rng rng = make_rng(a.seed, "generate");
  TokenGrid grid = generate_tts(speaker, ids, ckpt.params, ckpt.model, a.max_frames, a.temperature, rng);
  grid.frame_rate_hz = ckpt.codebook.frontend.frame_rate_hz;
  const bool to_wav = a.out.size() >= 4 && a.out.substr(a.out.size() - 4) == ".wav";
  if (to_wav) {
    const Waveform wav = approx_invert(detokenize(grid, ckpt.codebook), ckpt.codebook.frontend, a.iters);
    write_wav(wav, a.out);
    std::cout << "wav=" << a.out << " n_frames=" << grid.n_frames << " n_samples=" << wav.samples.size() << "\n";
  } else {
    save_tokens(grid, a.out);
    std::cout << "tokens=" << a.out << " n_frames=" << grid.n_frames << "\n";
  }
  return 0;
}

struct SynthArgs {
  int n = 0;
  uint64_t seed = 0;
  std::string out;
  int n_speakers = 4;
};

int cmd_synth_corpus(const SynthArgs& a) {
  const TextVocab vocab = TextVocab::from_chars("abcdefghijklmnopqrstuvwxyz ");
  Rng rng = make_rng(a.seed, "corpus");
  const std::vector<SynthUtterance> utts = make_synthetic_corpus(a.n, vocab, rng, a.n_speakers);
  std::filesystem::create_directories(a.out);
  std::vector<ManifestEntry> entries;
  entries.reserve(utts.size());
  char name[32];
  for (size_t i = 0; i < utts.size(); ++i) {
    std::snprintf(name, sizeof(name), "utt-%05zu.wav", i);
    write_wav(utts[i].wav, (std::filesystem::path(a.out) / name).string());
    entries.push_back({name, utts[i].transcript, std::to_string(utts[i].speaker_id)});
  }
  const std::string manifest = (std::filesystem::path(a.out) / "manifest.tsv").string();
  save_manifest(entries, manifest);
  const std::string vocab_path = (std::filesystem::path(a.out) / "vocab.txt").string();
  save_vocab(vocab, vocab_path);
  std::cout << "out=" << a.out << " files=" << utts.size() << " manifest=" << manifest << " vocab=" << vocab_path
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dmel: discretized log mel speech tokens and a unified speech-text model"};
  app.require_subcommand(1);

  FitArgs fit;
  CLI::App* fit_cmd = app.add_subcommand("fit-codebook", "Fit an intensity codebook over a manifest of wav files");
  fit_cmd->add_option("--manifest", fit.manifest, "Tab-separated manifest: audio path, transcript, speaker id")
      ->required();
  fit_cmd->add_option("--bits", fit.bits, "Bits per channel")->capture_default_str();
  fit_cmd->add_option("--mels", fit.mels, "Mel channels")->capture_default_str();
  fit_cmd->add_option("--frame-rate", fit.frame_rate, "Frames per second (40 or 80)")->capture_default_str();
  fit_cmd->add_option("--out", fit.out, "Output codebook file")->required();

  TokenizeArgs tok;
  CLI::App* tok_cmd = app.add_subcommand("tokenize", "Convert a wav file into a token file");
  tok_cmd->add_option("--codebook", tok.codebook, "Codebook file")->required();
  tok_cmd->add_option("--in", tok.in, "Input wav file")->required();
  tok_cmd->add_option("--out", tok.out, "Output token file")->required();

  DetokenizeArgs detok;
  CLI::App* detok_cmd = app.add_subcommand("detokenize", "Reconstruct a wav file from a token file");
  detok_cmd->add_option("--codebook", detok.codebook, "Codebook file")->required();
  detok_cmd->add_option("--in", detok.in, "Input token file")->required();
  detok_cmd->add_option("--out", detok.out, "Output wav file")->required();
  detok_cmd->add_option("--griffin-lim-iters", detok.iters, "Phase reconstruction iterations")
      ->capture_default_str();

  ReportArgs report;
  CLI::App* report_cmd =
      app.add_subcommand("roundtrip-report", "Tokenize and reconstruct every manifest entry, print SNR and LSD");
  report_cmd->add_option("--codebook", report.codebook, "Codebook file")->required();
  report_cmd->add_option("--manifest", report.manifest, "Manifest of wav files")->required();

  TrainArgs train;
  std::string train_config_path;
  CLI::App* train_cmd = app.add_subcommand("train", "Fit a codebook and train the sequence model on a manifest");
  train_cmd->add_option("--config", train_config_path, "Read options from a key=value file (command line wins)")
      ->configurable(false);
  train_cmd->add_option("--task", train.task, "asr, tts, or joint")->required();
  train_cmd->add_option("--data", train.data, "Training manifest")->required();
  train_cmd->add_option("--out", train.out, "Output directory for codebook, vocabulary, log, checkpoints")
      ->required();
  train_cmd->add_option("--layers", train.model.n_layers, "Transformer layers")->capture_default_str();
  train_cmd->add_option("--heads", train.model.n_heads, "Attention heads")->capture_default_str();
  train_cmd->add_option("--d-model", train.model.d_model, "Model width")->capture_default_str();
  train_cmd->add_option("--d-channel-embed", train.model.d_channel_embed, "Per-channel embedding width")
      ->capture_default_str();
  train_cmd->add_option("--bits", train.model.bits, "Bits per channel")->capture_default_str();
  train_cmd->add_option("--mels", train.model.n_mels, "Mel channels")->capture_default_str();
  train_cmd->add_option("--frame-rate", train.frame_rate, "Frames per second (40 or 80)")->capture_default_str();
  train_cmd->add_option("--max-positions", train.model.max_positions, "Maximum sequence length")
      ->capture_default_str();
  train_cmd->add_option("--rope-base", train.model.rope_base, "Rotary embedding base")->capture_default_str();
  train_cmd->add_option("--dropout-residual", train.model.dropout_residual, "Residual dropout")
      ->capture_default_str();
  train_cmd->add_option("--dropout-attention", train.model.dropout_attention, "Attention dropout")
      ->capture_default_str();
  train_cmd->add_option("--dropout-embedding", train.model.dropout_embedding, "Embedding dropout")
      ->capture_default_str();
  train_cmd->add_option("--dropout-positional", train.model.dropout_positional, "Positional dropout")
      ->capture_default_str();
  train_cmd->add_option("--steps", train.steps, "Total optimization steps")->capture_default_str();
  train_cmd->add_option("--warmup", train.warmup,
                        "Warmup steps; -1 uses the task preset, reduced to steps/10 when --steps is smaller");
  train_cmd->add_option("--lr", train.lr, "Peak learning rate")->capture_default_str();
  train_cmd->add_option("--grad-clip", train.grad_clip, "Gradient norm clip; 0 uses the task preset");
  train_cmd->add_option("--batch-size", train.batch_size, "Sequences per step")->capture_default_str();
  train_cmd->add_option("--seed", train.seed, "Random seed")->capture_default_str();
  train_cmd->add_option("--mask-p", train.mask_p, "Chance a sequence gets speech span masking")
      ->capture_default_str();
  train_cmd->add_option("--mask-span", train.mask_span, "Mean masked span length")->capture_default_str();
  train_cmd->add_option("--mask-ratio", train.mask_ratio, "Target masked fraction")->capture_default_str();
  train_cmd->add_option("--text-mask-p", train.text_mask_p, "Chance a sequence gets text span masking")
      ->capture_default_str();
  train_cmd->add_flag("--spec-augment,!--no-spec-augment", train.spec_augment, "SpecAugment on ASR inputs");
  train_cmd->add_option("--checkpoint-every", train.checkpoint_every, "Checkpoint cadence in steps")
      ->capture_default_str();

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval-asr", "Greedy-transcribe a manifest and print WER/CER");
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint file, or a directory with a latest pointer")->required();
  eval_cmd->add_option("--manifest", eval.manifest, "Evaluation manifest")->required();
  eval_cmd->add_option("--max-text-len", eval.max_text_len, "Transcription length cap")->capture_default_str();

  GenerateArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("generate", "Synthesize speech tokens (or a wav) from text");
  gen_cmd->add_option("--ckpt", gen.ckpt, "Checkpoint file, or a directory with a latest pointer")->required();
  gen_cmd->add_option("--text", gen.text, "Text to speak")->required();
  gen_cmd->add_option("--speaker", gen.speaker, "Speaker id (decimal or free-form)")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output token file, or wav when the name ends in .wav")->required();
  gen_cmd->add_option("--max-frames", gen.max_frames, "Generation length cap in frames")->capture_default_str();
  gen_cmd->add_option("--temperature", gen.temperature, "Sampling temperature; 0 is greedy")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Sampling seed")->capture_default_str();
  gen_cmd->add_option("--griffin-lim-iters", gen.iters, "Phase reconstruction iterations for wav output")
      ->capture_default_str();

  SynthArgs synth;
  CLI::App* synth_cmd = app.add_subcommand("synth-corpus", "Write a deterministic synthetic speech corpus");
  synth_cmd->add_option("--n", synth.n, "Number of utterances")->required();
  synth_cmd->add_option("--seed", synth.seed, "Corpus seed")->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--n-speakers", synth.n_speakers, "Number of distinct speakers")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*fit_cmd) return cmd_fit_codebook(fit);
    if (*tok_cmd) return cmd_tokenize(tok);
    if (*detok_cmd) return cmd_detokenize(detok);
    if (*report_cmd) return cmd_roundtrip_report(report);
    if (*train_cmd) {
      if (!train_config_path.empty()) apply_config_file(train_cmd, train_config_path);
      return cmd_train(train);
    }
    if (*eval_cmd) return cmd_eval_asr(eval);
    if (*gen_cmd) return cmd_generate(gen);
    if (*synth_cmd) return cmd_synth_corpus(synth);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

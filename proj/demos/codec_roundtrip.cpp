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

// Walks one utterance through the whole codec: synthesize audio, fit a
// codebook, tokenize, write and re-read the token file, reconstruct the
// spectrogram, and print the fidelity numbers.

#include <filesystem>
#include <iostream>
#include <string>

#include "dmel/codec.hpp"
#include "dmel/dsp.hpp"
#include "dmel/metrics.hpp"
#include "dmel/token_io.hpp"
#include "dmel/train.hpp"

int main(int argc, char** argv) {
  using namespace dmel;
  const std::string out_dir = argc > 1 ? argv[1] : "codec_roundtrip_out";
  std::filesystem::create_directories(out_dir);

  const TextVocab vocab = TextVocab::from_chars("abcdefghijklmnopqrstuvwxyz ");
  const Waveform wav = synth_utterance_wave("hello dmel", vocab, 0);
  std::cout << "synthesized " << wav.samples.size() << " samples at " << wav.sample_rate_hz << " Hz\n";

  FrontendConfig fe;
  const MelSpectrogram mel = melspec(wav, fe);
  const Codebook cb = fit_codebook({mel}, 4, fe);
  std::cout << "codebook: [" << cb.min_val << ", " << cb.max_val << "] in " << cb.n_codes()
            << " bins, delta=" << cb.delta() << "\n";

  const TokenGrid grid = tokenize(mel, cb);
  const std::string token_path = out_dir + "/utterance.dmel";
  save_tokens(grid, token_path);
  const TokenGrid loaded = load_tokens(token_path);
  std::cout << "tokens: " << loaded.n_frames << " frames x " << loaded.n_mels << " channels, "
            << std::filesystem::file_size(token_path) << " bytes on disk, " << token_bitrate_bps(cb) << " bit/s\n";

  const MelSpectrogram recon = detokenize(loaded, cb);
  std::cout << "round trip: snr_db=" << quantization_snr_db(mel, recon)
            << " lsd=" << log_spectral_distance(mel, recon) << " (delta=" << cb.delta() << ")\n";

  const Waveform back = approx_invert(recon, fe, 32);
  write_wav(back, out_dir + "/reconstructed.wav");
  std::cout << "wrote " << out_dir << "/reconstructed.wav (" << back.samples.size() << " samples)\n";
  return 0;
}

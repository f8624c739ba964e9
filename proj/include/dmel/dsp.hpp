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
// Signal-processing front end: radix-2 FFT, mel filterbank construction,
// log mel spectrogram extraction, and an approximate inverse (filterbank
// pseudo-inverse followed by Griffin-Lim phase recovery).

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "dmel/audio.hpp"
#include "dmel/errors.hpp"

namespace dmel {

struct FrontendConfig {
  int sample_rate_hz = 16000;
  int n_mels = 80;
  int frame_rate_hz = 40;
  int win_length_samples = 1024;
  int fft_size = 1024;
  double fmin_hz = 0.0;
  double fmax_hz = 8000.0;
  double log_floor = 1e-10;

  bool operator==(const FrontendConfig&) const = default;

  int hop_samples() const { return sample_rate_hz / frame_rate_hz; }

  void validate() const {
    if (sample_rate_hz != 16000) {
      throw ConfigError("frontend: sample_rate_hz must be 16000, got " + std::to_string(sample_rate_hz));
    }
    if (frame_rate_hz <= 0 || sample_rate_hz % frame_rate_hz != 0) {
      throw ConfigError("frontend: frame_rate_hz must divide the sample rate exactly");
    }
    if (n_mels < 1) throw ConfigError("frontend: n_mels must be >= 1");
    if (win_length_samples < 1) throw ConfigError("frontend: win_length_samples must be >= 1");
    if (fft_size < win_length_samples || (fft_size & (fft_size - 1)) != 0) {
      throw ConfigError("frontend: fft_size must be a power of two >= win_length_samples");
    }
    if (!(fmin_hz >= 0.0 && fmin_hz < fmax_hz && fmax_hz <= sample_rate_hz / 2.0)) {
      throw ConfigError("frontend: need 0 <= fmin_hz < fmax_hz <= sample_rate_hz/2");
    }
    if (!(log_floor > 0.0)) throw ConfigError("frontend: log_floor must be positive");
  }
};

struct MelSpectrogram {
  int64_t n_frames = 0;
  int n_mels = 0;
  int frame_rate_hz = 0;
  std::vector<double> values;  // row-major [n_frames][n_mels]

  double& at(int64_t t, int j) { return values[static_cast<size_t>(t) * n_mels + j]; }
  double at(int64_t t, int j) const { return values[static_cast<size_t>(t) * n_mels + j]; }
};

// In-place iterative radix-2 FFT. Twiddles come from a per-call table so
// rounding error stays well below the 1e-9 budget at size 1024.
inline void fft_in_place(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ArgumentError("fft: size must be a power of two");
  if (n == 1) return;

  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }

  std::vector<std::complex<double>> tw(n / 2);
  for (size_t k = 0; k < n / 2; ++k) {
    const double ang = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
    tw[k] = {std::cos(ang), std::sin(ang)};
  }

  for (size_t len = 2; len <= n; len <<= 1) {
    const size_t half = len >> 1;
    const size_t stride = n / len;
    for (size_t base = 0; base < n; base += len) {
      for (size_t j = 0; j < half; ++j) {
        const std::complex<double> u = a[base + j];
        const std::complex<double> v = a[base + j + half] * tw[j * stride];
        a[base + j] = u + v;
        a[base + j + half] = u - v;
      }
    }
  }
}

inline void ifft_in_place(std::vector<std::complex<double>>& a) {
  for (auto& x : a) x = std::conj(x);
  fft_in_place(a);
  const double inv = 1.0 / static_cast<double>(a.size());
  for (auto& x : a) x = std::conj(x) * inv;
}

// size-point DFT of a real signal, zero-padded on the right.
inline std::vector<std::complex<double>> fft(const std::vector<double>& signal, size_t size) {
  if (signal.size() > size) throw ArgumentError("fft: signal longer than transform size");
  std::vector<std::complex<double>> a(size);
  for (size_t i = 0; i < signal.size(); ++i) a[i] = signal[i];
  fft_in_place(a);
  return a;
}

inline double hz_to_mel(double f_hz) { return 2595.0 * std::log10(1.0 + f_hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// N x (fft_size/2 + 1) bank of triangular filters with peaks equally spaced
// on the mel scale. Each row is rescaled so its sampled peak is exactly 1.
inline std::vector<double> mel_filterbank_matrix(const FrontendConfig& cfg) {
  cfg.validate();
  const int n_bins = cfg.fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  const double bin_hz = static_cast<double>(cfg.sample_rate_hz) / cfg.fft_size;

  std::vector<double> fb(static_cast<size_t>(cfg.n_mels) * n_bins, 0.0);
  for (int j = 0; j < cfg.n_mels; ++j) {
    const double step = (mel_hi - mel_lo) / (cfg.n_mels + 1);
    const double left = mel_to_hz(mel_lo + step * j);
    const double peak = mel_to_hz(mel_lo + step * (j + 1));
    const double right = mel_to_hz(mel_lo + step * (j + 2));
    double row_max = 0.0;
    double* row = fb.data() + static_cast<size_t>(j) * n_bins;
    for (int k = 0; k < n_bins; ++k) {
      const double f = k * bin_hz;
      double v = 0.0;
      if (f > left && f < right) {
        v = f <= peak ? (f - left) / (peak - left) : (right - f) / (right - peak);
      }
      row[k] = v;
      row_max = std::max(row_max, v);
    }
    if (row_max <= 0.0) {
      throw ConfigError("frontend: mel channel " + std::to_string(j) +
                        " has no FFT-bin support; lower n_mels or raise fft_size");
    }
    for (int k = 0; k < n_bins; ++k) row[k] /= row_max;
  }
  return fb;
}

namespace dsp_detail {

inline std::vector<double> hann_periodic(int win) {
  std::vector<double> w(win);
  for (int n = 0; n < win; ++n) w[n] = 0.5 - 0.5 * std::cos(2.0 * M_PI * n / win);
  return w;
}

inline int64_t frame_count(size_t n_samples, const FrontendConfig& cfg) {
  if (n_samples < static_cast<size_t>(cfg.win_length_samples)) return 0;
  return static_cast<int64_t>((n_samples - cfg.win_length_samples) / cfg.hop_samples()) + 1;
}

// Complex STFT of the framing used by melspec: T x (fft_size/2+1), row-major.
inline std::vector<std::complex<double>> stft(const std::vector<double>& x, const FrontendConfig& cfg) {
  const int64_t n_frames = frame_count(x.size(), cfg);
  const int n_bins = cfg.fft_size / 2 + 1;
  const int hop = cfg.hop_samples();
  const std::vector<double> window = hann_periodic(cfg.win_length_samples);
  std::vector<std::complex<double>> out(static_cast<size_t>(n_frames) * n_bins);
  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (int64_t t = 0; t < n_frames; ++t) {
    const size_t start = static_cast<size_t>(t) * hop;
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    for (int n = 0; n < cfg.win_length_samples; ++n) buf[n] = x[start + n] * window[n];
    fft_in_place(buf);
    std::copy(buf.begin(), buf.begin() + n_bins, out.begin() + static_cast<size_t>(t) * n_bins);
  }
  return out;
}

// Inverse of the Gram matrix F F^T via Gauss-Jordan with partial pivoting.
inline std::vector<double> invert_gram(const std::vector<double>& fb, int n_mels, int n_bins) {
  const int n = n_mels;
  std::vector<double> aug(static_cast<size_t>(n) * 2 * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double g = 0.0;
      const double* ri = fb.data() + static_cast<size_t>(i) * n_bins;
      const double* rj = fb.data() + static_cast<size_t>(j) * n_bins;
      for (int k = 0; k < n_bins; ++k) g += ri[k] * rj[k];
      aug[static_cast<size_t>(i) * 2 * n + j] = g;
    }
    aug[static_cast<size_t>(i) * 2 * n + n + i] = 1.0;
  }
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r) {
      if (std::abs(aug[static_cast<size_t>(r) * 2 * n + col]) >
          std::abs(aug[static_cast<size_t>(pivot) * 2 * n + col])) {
        pivot = r;
      }
    }
    const double pv = aug[static_cast<size_t>(pivot) * 2 * n + col];
    if (std::abs(pv) < 1e-12) throw ConfigError("frontend: filterbank Gram matrix is singular");
    if (pivot != col) {
      for (int c = 0; c < 2 * n; ++c) {
        std::swap(aug[static_cast<size_t>(pivot) * 2 * n + c], aug[static_cast<size_t>(col) * 2 * n + c]);
      }
    }
    const double inv_pv = 1.0 / aug[static_cast<size_t>(col) * 2 * n + col];
    for (int c = 0; c < 2 * n; ++c) aug[static_cast<size_t>(col) * 2 * n + c] *= inv_pv;
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double factor = aug[static_cast<size_t>(r) * 2 * n + col];
      if (factor == 0.0) continue;
      for (int c = 0; c < 2 * n; ++c) {
        aug[static_cast<size_t>(r) * 2 * n + c] -= factor * aug[static_cast<size_t>(col) * 2 * n + c];
      }
    }
  }
  std::vector<double> inv(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) inv[static_cast<size_t>(i) * n + j] = aug[static_cast<size_t>(i) * 2 * n + n + j];
  }
  return inv;
}

// Window-square-normalized overlap-add resynthesis from magnitude+phase.
inline std::vector<double> istft(const std::vector<double>& mag, const std::vector<double>& phase,
                                 int64_t n_frames, const FrontendConfig& cfg) {
  const int n_bins = cfg.fft_size / 2 + 1;
  const int hop = cfg.hop_samples();
  const int win = cfg.win_length_samples;
  const std::vector<double> window = hann_periodic(win);
  const size_t out_len = n_frames > 0 ? static_cast<size_t>((n_frames - 1) * hop + win) : 0;
  std::vector<double> x(out_len, 0.0);
  std::vector<double> norm(out_len, 0.0);
  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (int64_t t = 0; t < n_frames; ++t) {
    const size_t row = static_cast<size_t>(t) * n_bins;
    for (int k = 0; k < n_bins; ++k) {
      buf[k] = std::polar(mag[row + k], phase[row + k]);
    }
    for (int k = 1; k < cfg.fft_size / 2; ++k) buf[cfg.fft_size - k] = std::conj(buf[k]);
    ifft_in_place(buf);
    const size_t start = static_cast<size_t>(t) * hop;
    for (int n = 0; n < win; ++n) {
      x[start + n] += buf[n].real() * window[n];
      norm[start + n] += window[n] * window[n];
    }
  }
  for (size_t i = 0; i < out_len; ++i) x[i] = norm[i] > 1e-8 ? x[i] / norm[i] : 0.0;
  return x;
}

}  // namespace dsp_detail

// Log mel spectrogram: Hann-windowed frames, power spectrum, triangular
// filterbank, natural log of the floored filter outputs.
inline MelSpectrogram melspec(const Waveform& w, const FrontendConfig& cfg) {
  cfg.validate();
  if (w.sample_rate_hz != cfg.sample_rate_hz) {
    throw ArgumentError("melspec: waveform is " + std::to_string(w.sample_rate_hz) + " Hz, config needs " +
                        std::to_string(cfg.sample_rate_hz));
  }
  const std::vector<double> fb = mel_filterbank_matrix(cfg);
  const int n_bins = cfg.fft_size / 2 + 1;
  const std::vector<std::complex<double>> spec = dsp_detail::stft(w.samples, cfg);
  const int64_t n_frames = dsp_detail::frame_count(w.samples.size(), cfg);

  MelSpectrogram m;
  m.n_frames = n_frames;
  m.n_mels = cfg.n_mels;
  m.frame_rate_hz = cfg.frame_rate_hz;
  m.values.resize(static_cast<size_t>(n_frames) * cfg.n_mels);
  std::vector<double> power(n_bins);
  for (int64_t t = 0; t < n_frames; ++t) {
    const std::complex<double>* row = spec.data() + static_cast<size_t>(t) * n_bins;
    for (int k = 0; k < n_bins; ++k) power[k] = std::norm(row[k]);
    for (int j = 0; j < cfg.n_mels; ++j) {
      const double* frow = fb.data() + static_cast<size_t>(j) * n_bins;
      double e = 0.0;
      for (int k = 0; k < n_bins; ++k) e += frow[k] * power[k];
      m.at(t, j) = std::log(std::max(e, cfg.log_floor));
    }
  }
  return m;
}

// Approximate waveform from a log mel spectrogram: the filterbank
// pseudo-inverse F^T (F F^T)^{-1} estimates the linear power spectrum
// (clamped at 0), then Griffin-Lim alternates overlap-add resynthesis with
// phase re-estimation. Plumbing for audibility, not a vocoder.
inline Waveform approx_invert(const MelSpectrogram& m, const FrontendConfig& cfg, int iters) {
  cfg.validate();
  if (iters < 1) throw ArgumentError("approx_invert: iters must be >= 1");
  if (m.n_mels != cfg.n_mels || m.frame_rate_hz != cfg.frame_rate_hz) {
    throw ArgumentError("approx_invert: spectrogram geometry does not match config");
  }
  Waveform out;
  out.sample_rate_hz = cfg.sample_rate_hz;
  if (m.n_frames == 0) return out;

  const std::vector<double> fb = mel_filterbank_matrix(cfg);
  const int n_bins = cfg.fft_size / 2 + 1;
  const std::vector<double> gram_inv = dsp_detail::invert_gram(fb, cfg.n_mels, n_bins);

  // mag[t,k] = sqrt(max(0, sum_j pinv[k,j] exp(m[t,j]))); pinv applied as
  // F^T (Ginv e) per frame to avoid materializing the B x N pseudo-inverse.
  const int64_t T = m.n_frames;
  std::vector<double> mag(static_cast<size_t>(T) * n_bins);
  std::vector<double> mel_power(cfg.n_mels), mixed(cfg.n_mels);
  for (int64_t t = 0; t < T; ++t) {
    for (int j = 0; j < cfg.n_mels; ++j) mel_power[j] = std::exp(m.at(t, j));
    for (int i = 0; i < cfg.n_mels; ++i) {
      double s = 0.0;
      const double* gr = gram_inv.data() + static_cast<size_t>(i) * cfg.n_mels;
      for (int j = 0; j < cfg.n_mels; ++j) s += gr[j] * mel_power[j];
      mixed[i] = s;
    }
    for (int k = 0; k < n_bins; ++k) {
      double p = 0.0;
      for (int i = 0; i < cfg.n_mels; ++i) p += fb[static_cast<size_t>(i) * n_bins + k] * mixed[i];
      mag[static_cast<size_t>(t) * n_bins + k] = std::sqrt(std::max(p, 0.0));
    }
  }

  std::vector<double> phase(static_cast<size_t>(T) * n_bins, 0.0);
  std::vector<double> x;
  for (int it = 0; it < iters; ++it) {
    x = dsp_detail::istft(mag, phase, T, cfg);
    if (it + 1 == iters) break;
    const std::vector<std::complex<double>> spec = dsp_detail::stft(x, cfg);
    for (size_t i = 0; i < phase.size(); ++i) phase[i] = std::arg(spec[i]);
  }
  out.samples = std::move(x);
  return out;
}

}  // namespace dmel

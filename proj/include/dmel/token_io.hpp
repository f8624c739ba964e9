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
// On-disk formats. Token grids are stored as "DMEL" binary files: a fixed
// header followed by a bit-packed payload, frame-major then channel-major,
// LSB-first within each byte, zero trailing pad bits. Codebooks are stored
// as key=value sidecar text with shortest-round-trip floats.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "dmel/codec.hpp"
#include "dmel/errors.hpp"

namespace dmel {

inline constexpr int kTokenFormatVersion = 1;
inline constexpr int kCodebookFormatVersion = 1;

namespace io_detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("codebook file: bad float for " + key + ": '" + s + "'");
  }
  return v;
}

inline int64_t parse_int(const std::string& s, const std::string& key) {
  int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("codebook file: bad integer for " + key + ": '" + s + "'");
  }
  return v;
}

inline void put_u16le(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

inline void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const void* data, size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace io_detail

// --- Token files -----------------------------------------------------------

inline std::vector<uint8_t> encode_tokens(const TokenGrid& g) {
  if (g.bits < 1 || g.bits > 16) throw ArgumentError("save_tokens: bits must be in [1, 16]");
  if (g.n_mels < 1 || g.n_mels > 0xffff) throw ArgumentError("save_tokens: n_mels out of range");
  if (g.frame_rate_hz < 0 || g.frame_rate_hz > 0xffff) throw ArgumentError("save_tokens: frame rate out of range");
  if (g.n_frames < 0 || g.n_frames > 0xffffffffll) throw ArgumentError("save_tokens: frame count out of range");
  if (g.bins.size() != static_cast<size_t>(g.n_frames) * g.n_mels) {
    throw ArgumentError("save_tokens: bin buffer does not match declared shape");
  }
  const uint32_t limit = 1u << g.bits;
  for (const uint16_t b : g.bins) {
    if (b >= limit) throw ArgumentError("save_tokens: bin value exceeds bit width");
  }

  const uint64_t total_bits = static_cast<uint64_t>(g.n_frames) * g.n_mels * g.bits;
  const size_t payload_bytes = static_cast<size_t>((total_bits + 7) / 8);

  std::vector<uint8_t> out;
  out.reserve(14 + payload_bytes);
  out.insert(out.end(), {'D', 'M', 'E', 'L'});
  out.push_back(static_cast<uint8_t>(kTokenFormatVersion));
  out.push_back(static_cast<uint8_t>(g.bits));
  io_detail::put_u16le(out, static_cast<uint16_t>(g.n_mels));
  io_detail::put_u16le(out, static_cast<uint16_t>(g.frame_rate_hz));
  io_detail::put_u32le(out, static_cast<uint32_t>(g.n_frames));

  out.resize(14 + payload_bytes, 0);
  uint8_t* payload = out.data() + 14;
  uint64_t bit = 0;
  for (const uint16_t v : g.bins) {
    for (int k = 0; k < g.bits; ++k, ++bit) {
      if ((v >> k) & 1u) payload[bit >> 3] |= static_cast<uint8_t>(1u << (bit & 7));
    }
  }
  return out;
}

inline TokenGrid decode_tokens(const std::vector<uint8_t>& bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 14 || bytes[0] != 'D' || bytes[1] != 'M' || bytes[2] != 'E' || bytes[3] != 'L') {
    throw FormatError(origin + ": not a DMEL token file");
  }
  if (bytes[4] != kTokenFormatVersion) {
    throw FormatError(origin + ": unsupported token format version " + std::to_string(bytes[4]));
  }
  TokenGrid g;
  g.bits = bytes[5];
  g.n_mels = bytes[6] | (bytes[7] << 8);
  g.frame_rate_hz = bytes[8] | (bytes[9] << 8);
  g.n_frames = static_cast<uint32_t>(bytes[10]) | (static_cast<uint32_t>(bytes[11]) << 8) |
               (static_cast<uint32_t>(bytes[12]) << 16) | (static_cast<uint32_t>(bytes[13]) << 24);
  if (g.bits < 1 || g.bits > 16) throw FormatError(origin + ": bit width " + std::to_string(g.bits) + " out of range");
  if (g.n_mels < 1) throw FormatError(origin + ": zero channels");

  const uint64_t total_bits = static_cast<uint64_t>(g.n_frames) * g.n_mels * g.bits;
  const size_t payload_bytes = static_cast<size_t>((total_bits + 7) / 8);
  if (bytes.size() != 14 + payload_bytes) {
    throw FormatError(origin + ": payload is " + std::to_string(bytes.size() - 14) + " bytes, expected " +
                      std::to_string(payload_bytes));
  }

  const uint8_t* payload = bytes.data() + 14;
  g.bins.resize(static_cast<size_t>(g.n_frames) * g.n_mels);
  uint64_t bit = 0;
  for (uint16_t& v : g.bins) {
    uint32_t acc = 0;
    for (int k = 0; k < g.bits; ++k, ++bit) {
      acc |= static_cast<uint32_t>((payload[bit >> 3] >> (bit & 7)) & 1u) << k;
    }
    v = static_cast<uint16_t>(acc);
  }
  for (uint64_t b = total_bits; b < payload_bytes * 8; ++b) {
    if ((payload[b >> 3] >> (b & 7)) & 1u) throw FormatError(origin + ": nonzero padding bits");
  }
  return g;
}

inline void save_tokens(const TokenGrid& g, const std::string& path) {
  const std::vector<uint8_t> bytes = encode_tokens(g);
  io_detail::write_file(path, bytes.data(), bytes.size());
}

inline TokenGrid load_tokens(const std::string& path) {
  return decode_tokens(io_detail::read_file(path), path);
}

// --- Codebook sidecar files -------------------------------------------------

inline std::string encode_codebook(const Codebook& cb) {
  cb.validate();
  std::ostringstream out;
  out << "format_version=" << kCodebookFormatVersion << "\n";
  out << "min_val=" << io_detail::format_double(cb.min_val) << "\n";
  out << "max_val=" << io_detail::format_double(cb.max_val) << "\n";
  out << "bits=" << cb.bits << "\n";
  out << "n_mels=" << cb.n_mels << "\n";
  out << "frame_rate_hz=" << cb.frontend.frame_rate_hz << "\n";
  out << "sample_rate_hz=" << cb.frontend.sample_rate_hz << "\n";
  out << "win_length=" << cb.frontend.win_length_samples << "\n";
  out << "fft_size=" << cb.frontend.fft_size << "\n";
  out << "fmin_hz=" << io_detail::format_double(cb.frontend.fmin_hz) << "\n";
  out << "fmax_hz=" << io_detail::format_double(cb.frontend.fmax_hz) << "\n";
  out << "log_floor=" << io_detail::format_double(cb.frontend.log_floor) << "\n";
  out << "mel_formula=htk\n";
  return out.str();
}

inline Codebook decode_codebook(const std::string& text, const std::string& origin = "<memory>") {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(origin + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(origin + ": missing required key '" + std::string(key) + "'");
    return it->second;
  };

  const int64_t ver = io_detail::parse_int(need("format_version"), "format_version");
  if (ver != kCodebookFormatVersion) {
    throw FormatError(origin + ": unsupported codebook format version " + std::to_string(ver));
  }
  const std::string& formula = need("mel_formula");
  if (formula != "htk") throw FormatError(origin + ": unknown mel_formula '" + formula + "'");

  Codebook cb;
  cb.min_val = io_detail::parse_double(need("min_val"), "min_val");
  cb.max_val = io_detail::parse_double(need("max_val"), "max_val");
  cb.bits = static_cast<int>(io_detail::parse_int(need("bits"), "bits"));
  cb.n_mels = static_cast<int>(io_detail::parse_int(need("n_mels"), "n_mels"));
  cb.frontend.n_mels = cb.n_mels;
  cb.frontend.frame_rate_hz = static_cast<int>(io_detail::parse_int(need("frame_rate_hz"), "frame_rate_hz"));
  cb.frontend.sample_rate_hz = static_cast<int>(io_detail::parse_int(need("sample_rate_hz"), "sample_rate_hz"));
  cb.frontend.win_length_samples = static_cast<int>(io_detail::parse_int(need("win_length"), "win_length"));
  cb.frontend.fft_size = static_cast<int>(io_detail::parse_int(need("fft_size"), "fft_size"));
  cb.frontend.fmin_hz = io_detail::parse_double(need("fmin_hz"), "fmin_hz");
  cb.frontend.fmax_hz = io_detail::parse_double(need("fmax_hz"), "fmax_hz");
  cb.frontend.log_floor = io_detail::parse_double(need("log_floor"), "log_floor");
  cb.validate();
  return cb;
}

inline void save_codebook(const Codebook& cb, const std::string& path) {
  const std::string text = encode_codebook(cb);
  io_detail::write_file(path, text.data(), text.size());
}

inline Codebook load_codebook(const std::string& path) {
  const std::vector<uint8_t> bytes = io_detail::read_file(path);
  return decode_codebook(std::string(bytes.begin(), bytes.end()), path);
}

}  // namespace dmel

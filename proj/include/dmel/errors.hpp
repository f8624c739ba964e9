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

#pragma once

#include <stdexcept>
#include <string>

namespace dmel {

// Base class for all toolkit errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller passed an argument outside an operation's domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// A configuration object is internally inconsistent (e.g. a mel filter
// with no FFT support).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A file on disk does not match its declared format: bad magic, wrong
// version, truncated payload, nonzero padding, missing schema field.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A WAV file uses an encoding the reader does not handle.
class UnsupportedCodecError : public FormatError {
 public:
  using FormatError::FormatError;
};

// The data itself is unusable: empty corpus, constant corpus.
class DataError : public Error {
 public:
  using Error::Error;
};

// The operating system refused a read or write.
class IoError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss. The last checkpoint is left intact.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace dmel

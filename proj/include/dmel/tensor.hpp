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

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "dmel/errors.hpp"

namespace dmel {

// Dense row-major tensor. Shape is metadata only; all math below works on
// flat spans with explicit dimensions.
template <class T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::initializer_list<int64_t> dims) { resize(dims); }

  void resize(std::initializer_list<int64_t> dims) {
    shape.assign(dims.begin(), dims.end());
    int64_t n = 1;
    for (const int64_t d : shape) n *= d;
    v.assign(static_cast<size_t>(n), T(0));
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  void fill(T x) {
    for (T& e : v) e = x;
  }
};

// C[M x N] += A[M x K] * B^T, with B stored [N x K]. Both inner operands are
// read along contiguous rows.
template <class T>
inline void gemm_nt(T* c, const T* a, const T* b, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C[M x N] += A[M x K] * B[K x N].
template <class T>
inline void gemm_nn(T* c, const T* a, const T* b, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T s = ai[p];
      const T* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

// C[M x N] += A^T * B, with A stored [K x M] and B stored [K x N].
template <class T>
inline void gemm_tn(T* c, const T* a, const T* b, int64_t m, int64_t n, int64_t k) {
  for (int64_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T s = ap[i];
      T* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

// y[M] += W[M x K] * x[K].
template <class T>
inline void matvec(T* y, const T* w, const T* x, int64_t m, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const T* wi = w + i * k;
    T acc = T(0);
    for (int64_t p = 0; p < k; ++p) acc += wi[p] * x[p];
    y[i] += acc;
  }
}

// y[K] += W^T * x with W stored [M x K].
template <class T>
inline void matvec_t(T* y, const T* w, const T* x, int64_t m, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const T s = x[i];
    const T* wi = w + i * k;
    for (int64_t p = 0; p < k; ++p) y[p] += s * wi[p];
  }
}

// W[M x K] += a[M] outer b[K].
template <class T>
inline void outer_add(T* w, const T* a, const T* b, int64_t m, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const T s = a[i];
    T* wi = w + i * k;
    for (int64_t p = 0; p < k; ++p) wi[p] += s * b[p];
  }
}

}  // namespace dmel

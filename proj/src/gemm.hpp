// Copyright 2026 The MPUR Authors
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

#pragma once

#include <cstddef>
#include <vector>

namespace mpur::detail {

// C[M,N] (+)= A[M,K] * B[K,N]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = c + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) c_row[j] = 0.0;
    }
    const double* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_row[p];
      if (av == 0.0) continue;
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

// C[M,N] += A^T * B with A stored [K,M] and B stored [K,N].
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* a_row = a + p * m;
    const double* b_row = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a_row[i];
      if (av == 0.0) continue;
      double* c_row = c + i * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

inline std::vector<double> transpose(const double* a, std::size_t rows,
                                     std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;  // image being unfolded
  std::size_t kh, kw;
  int stride, pad;
  std::size_t out_h, out_w;  // sliding positions

  std::size_t rows() const { return batch * out_h * out_w; }
  std::size_t cols() const { return channels * kh * kw; }
};

// Unfolds src[B,C,H,W] into [B*out_h*out_w, C*kh*kw].
inline void im2col(const ConvGeometry& g, const double* src, double* cols) {
  const std::size_t ncol = g.cols();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        double* row = cols + ((b * g.out_h + oh) * g.out_w + ow) * ncol;
        std::size_t col = 0;
        for (std::size_t c = 0; c < g.channels; ++c) {
          const double* plane = src + (b * g.channels + c) * g.height * g.width;
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const long ih = static_cast<long>(oh) * g.stride - g.pad +
                            static_cast<long>(ki);
            for (std::size_t kj = 0; kj < g.kw; ++kj, ++col) {
              const long iw = static_cast<long>(ow) * g.stride - g.pad +
                              static_cast<long>(kj);
              row[col] = (ih >= 0 && iw >= 0 &&
                          ih < static_cast<long>(g.height) &&
                          iw < static_cast<long>(g.width))
                             ? plane[ih * g.width + iw]
                             : 0.0;
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into dst[B,C,H,W].
inline void col2im(const ConvGeometry& g, const double* cols, double* dst) {
  const std::size_t ncol = g.cols();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        const double* row = cols + ((b * g.out_h + oh) * g.out_w + ow) * ncol;
        std::size_t col = 0;
        for (std::size_t c = 0; c < g.channels; ++c) {
          double* plane = dst + (b * g.channels + c) * g.height * g.width;
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const long ih = static_cast<long>(oh) * g.stride - g.pad +
                            static_cast<long>(ki);
            for (std::size_t kj = 0; kj < g.kw; ++kj, ++col) {
              const long iw = static_cast<long>(ow) * g.stride - g.pad +
                              static_cast<long>(kj);
              if (ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) &&
                  iw < static_cast<long>(g.width)) {
                plane[ih * g.width + iw] += row[col];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace mpur::detail

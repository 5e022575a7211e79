/*
 * Copyright 2026 The lbdt authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef LBDT_POSENC_HPP
#define LBDT_POSENC_HPP

#include <cmath>
#include <stdexcept>

#include "lbdt/tensor.hpp"

namespace lbdt {

// Sequence encoding (n x c): value(pos, 2i) = sin(pos / 10000^(2i/c)),
// value(pos, 2i+1) = cos(pos / 10000^(2i/c)). Pure function of (n, c);
// longer tables extend shorter ones row for row.
template <typename T>
Tensor<T> sinusoid_1d(int64_t n, int64_t c) {
  if (n < 1) throw std::invalid_argument("sinusoid_1d: length must be >= 1");
  if (c < 2 || c % 2 != 0)
    throw std::invalid_argument("sinusoid_1d: channels must be even and >= 2, got " + std::to_string(c));
  Tensor<T> out({n, c});
  for (int64_t pos = 0; pos < n; ++pos)
    for (int64_t i = 0; i < c / 2; ++i) {
      double rate = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(c));
      double angle = static_cast<double>(pos) / rate;
      out.at2(pos, 2 * i) = static_cast<T>(std::sin(angle));
      out.at2(pos, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  return out;
}

// Map encoding (c x h x w): the first c/2 channels encode the row index, the
// last c/2 the column index, each half via the sequence formula.
template <typename T>
Tensor<T> sinusoid_2d(int64_t h, int64_t w, int64_t c) {
  if (h < 1 || w < 1) throw std::invalid_argument("sinusoid_2d: map size must be >= 1");
  if (c < 4 || c % 4 != 0)
    throw std::invalid_argument("sinusoid_2d: channels must be divisible by 4, got " + std::to_string(c));
  int64_t half = c / 2;
  Tensor<T> rows = sinusoid_1d<T>(h, half);
  Tensor<T> cols = sinusoid_1d<T>(w, half);
  Tensor<T> out({c, h, w});
  for (int64_t ch = 0; ch < half; ++ch)
    for (int64_t y = 0; y < h; ++y) {
      T v = rows.at2(y, ch);
      for (int64_t x = 0; x < w; ++x) out.at3(ch, y, x) = v;
    }
  for (int64_t ch = 0; ch < half; ++ch)
    for (int64_t x = 0; x < w; ++x) {
      T v = cols.at2(x, ch);
      for (int64_t y = 0; y < h; ++y) out.at3(half + ch, y, x) = v;
    }
  return out;
}

}  // namespace lbdt

#endif  // LBDT_POSENC_HPP

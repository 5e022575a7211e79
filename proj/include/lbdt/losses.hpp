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

#ifndef LBDT_LOSSES_HPP
#define LBDT_LOSSES_HPP

#include "lbdt/autodiff.hpp"

namespace lbdt {

// Cross-entropy (mean over pixels) plus dice, weighted 1:1. Probabilities
// are clamped to [1e-7, 1 - 1e-7] before the logs; dice smoothing is 1.
// The target must be exactly binary.
template <typename T>
Var<T> training_loss(const Var<T>& pred, const Tensor<T>& target) {
  Tape<T>& t = *pred.tape;
  const Tensor<T>& pv = pred.value();
  detail::require(pv.shape == target.shape, "training_loss",
                  "prediction " + shape_str(pv.shape) + " does not match target " +
                      shape_str(target.shape));
  for (T v : target.data)
    detail::require(v == T(0) || v == T(1), "training_loss", "target must be binary");
  int64_t n = pv.numel();
  Var<T> y = t.constant(target);
  Var<T> ones = t.constant(Tensor<T>::full(pv.shape, T(1)));
  Var<T> p = clamp(pred, T(1e-7), T(1) - T(1e-7));

  Var<T> pos = mul(y, log_val(p));
  Var<T> neg = mul(sub(ones, y), log_val(sub(ones, p)));
  Var<T> bce = scale(sum_all(add(pos, neg)), -T(1) / static_cast<T>(n));

  Var<T> smooth = t.constant(Tensor<T>::scalar(T(1)));
  Var<T> inter = sum_all(mul(p, y));
  Var<T> numer = add(scale(inter, T(2)), smooth);
  Var<T> denom = add(add(sum_all(p), sum_all(y)), smooth);
  Var<T> dice = sub(t.constant(Tensor<T>::scalar(T(1))), div(numer, denom));

  return add(bce, dice);
}

}  // namespace lbdt

#endif  // LBDT_LOSSES_HPP

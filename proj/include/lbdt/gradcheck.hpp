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

#ifndef LBDT_GRADCHECK_HPP
#define LBDT_GRADCHECK_HPP

#include <functional>
#include <vector>

#include "lbdt/autodiff.hpp"

namespace lbdt {

struct GradCheckFailure {
  int leaf = 0;
  int64_t element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = true;
  int64_t checked = 0;
  double max_rel_err = 0.0;
  std::vector<GradCheckFailure> failures;
};

// Compares reverse-mode gradients against central finite differences by
// replaying the graph builder with one input element nudged at a time. The
// builder must return a scalar and construct the same graph every call;
// replay determinism makes the two evaluations differ only in the nudge.
// Relative error is |analytic - numeric| / max(1, |numeric|).
//
// max_per_leaf > 0 probes only that many evenly spaced elements per leaf,
// which keeps audits of large parameter sets affordable.
template <typename T>
GradCheckReport gradient_check(const std::function<Var<T>(Tape<T>&)>& builder, T eps = T(1e-3),
                               double tol = 1e-4, int64_t max_per_leaf = 0) {
  auto eval_at = [&builder](int leaf, int64_t element, T delta) {
    Tape<T> tape;
    tape.check_finite = true;
    if (leaf >= 0) tape.set_perturbation({leaf, element, delta});
    Var<T> out = builder(tape);
    detail::require(out.valid() && out.tape == &tape, "gradient_check",
                    "builder must return a value on the provided tape");
    detail::require(tape.val(out.id).numel() == 1, "gradient_check",
                    "builder output must be scalar, got " + shape_str(tape.val(out.id).shape));
    return static_cast<double>(tape.val(out.id).data[0]);
  };

  // Analytic pass: one backward sweep collects every leaf gradient.
  Tape<T> tape;
  tape.check_finite = true;
  Var<T> out = builder(tape);
  detail::require(tape.val(out.id).numel() == 1, "gradient_check",
                  "builder output must be scalar, got " + shape_str(tape.val(out.id).shape));
  tape.backward(out);
  std::vector<Tensor<T>> analytic;
  for (int id : tape.trainable_leaf_ids()) analytic.push_back(tape.grad(id));

  GradCheckReport report;
  for (size_t leaf = 0; leaf < analytic.size(); ++leaf) {
    int64_t n = analytic[leaf].numel();
    int64_t stride = 1;
    if (max_per_leaf > 0 && n > max_per_leaf) stride = (n + max_per_leaf - 1) / max_per_leaf;
    for (int64_t e = 0; e < n; e += stride) {
      double plus = eval_at(static_cast<int>(leaf), e, eps);
      double minus = eval_at(static_cast<int>(leaf), e, -eps);
      double numeric = (plus - minus) / (2.0 * static_cast<double>(eps));
      double an = static_cast<double>(analytic[leaf].data[static_cast<size_t>(e)]);
      double rel = std::abs(an - numeric) / std::max(1.0, std::abs(numeric));
      ++report.checked;
      if (rel > report.max_rel_err) report.max_rel_err = rel;
      if (!(rel <= tol)) {
        report.pass = false;
        report.failures.push_back({static_cast<int>(leaf), e, an, numeric, rel});
      }
    }
  }
  return report;
}

}  // namespace lbdt

#endif  // LBDT_GRADCHECK_HPP

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

// Analytic operation counts and a small wall-clock benchmark.
//
// Conventions, applied uniformly:
//   matmul (m x k)(k x n)      2*m*k*n   (multiply-add = 2 ops, bias folded in)
//   conv 3x3                   2*9*Cin*Cout*Hout*Wout
//   elementwise op             1 per element
//   softmax row of width W     4*W       (max shift, exp, sum, divide)
//   bilinear resize            8 per output element (4 taps, mul + add)
//   embedding gather           0

#ifndef LBDT_FLOPS_HPP
#define LBDT_FLOPS_HPP

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "lbdt/autodiff.hpp"
#include "lbdt/model.hpp"
#include "lbdt/rng.hpp"

namespace lbdt {

struct FlopsLedger {
  std::vector<std::pair<std::string, double>> items;

  void add(const std::string& label, double flops) { items.emplace_back(label, flops); }
  double total() const {
    double t = 0;
    for (const auto& [label, f] : items) t += f;
    return t;
  }
};

namespace flops {

inline double matmul(double m, double k, double n) { return 2.0 * m * k * n; }
inline double linear(double rows, double in, double out) { return matmul(rows, in, out); }
inline double conv3x3(double cin, double cout, double hout, double wout) {
  return 2.0 * 9.0 * cin * cout * hout * wout;
}
inline double softmax(double rows, double width) { return 4.0 * rows * width; }
inline double resize(double elems_out) { return 8.0 * elems_out; }

// The defining products of the two attention routings: a language-bridged
// read touches hw once per word, a direct pairwise read touches hw twice.
inline double bridged_attention_product(double n, double c, double hw) { return matmul(n, c, hw); }
inline double direct_attention_product(double hw, double c) { return matmul(hw, c, hw); }

// One bridged transfer layer in one direction: aggregation into n word slots
// followed by a broadcast read back to the grid. Every term is linear in hw.
inline double bridged_transfer(double hw, double n, double c, double hidden) {
  double agg = linear(n, c, c) + 2.0 * linear(hw, c, c)  // Q from words, K/V from grid
               + matmul(n, c, hw) + softmax(n, hw) + matmul(n, hw, c) + n * c;
  double read = linear(hw, c, c) + 2.0 * linear(n, c, c)  // Q from grid, K/V from medium
                + matmul(hw, c, n) + softmax(hw, n) + matmul(hw, n, c);
  double mlp = linear(hw, c, hidden) + hw * hidden + linear(hw, hidden, c) + hw * c;
  return agg + read + mlp;
}

// Hypothetical direct grid-to-grid attention at the same width; the logits
// and the value product are both quadratic in hw.
inline double direct_transfer(double hw, double c) {
  return 3.0 * linear(hw, c, c) + matmul(hw, c, hw) + softmax(hw, hw) + matmul(hw, hw, c) +
         linear(hw, c, c) + hw * c;
}

// Leading coefficient of the quadratic through three points, by divided
// differences. Exact (in double) for integer-valued counts at these scales.
inline double quadratic_coeff(double x0, double y0, double x1, double y1, double x2, double y2) {
  double s1 = (y1 - y0) / (x1 - x0);
  double s2 = (y2 - y1) / (x2 - x1);
  return (s2 - s1) / (x2 - x0);
}

}  // namespace flops

// Full forward-pass count for one sample under a model configuration,
// mirroring Model<T>::forward stage by stage.
template <typename T = float>
inline FlopsLedger count_model_flops(const ModelConfig& cfg) {
  cfg.validate();
  FlopsLedger ledger;
  using namespace flops;

  double h = static_cast<double>(cfg.h0), w = static_cast<double>(cfg.w0);
  double encoder = 0;
  double cin = 3;
  std::vector<double> stage_hw;
  for (int s = 0; s < 5; ++s) {
    double cout = static_cast<double>(kStageChannels[static_cast<size_t>(s)]);
    h /= 2;
    w /= 2;
    stage_hw.push_back(h * w);
    encoder += conv3x3(cin, cout, h, w) + h * w * cout;   // strided + relu
    encoder += conv3x3(cout, cout, h, w) + h * w * cout;  // refine + relu
    cin = cout;
  }
  ledger.add("encoder_spatial", encoder);
  ledger.add("encoder_temporal", encoder);

  double c = static_cast<double>(cfg.cm);
  double n = static_cast<double>(cfg.n_words);
  double gru = n * (3.0 * linear(1, 2.0 * c, c) + 7.0 * c);
  ledger.add("text_encoder", gru);

  double hidden = static_cast<double>(cfg.mlp_width());
  for (int s : cfg.insert_stages) {
    double hw = stage_hw[static_cast<size_t>(s - 1)];
    double cs = static_cast<double>(kStageChannels[static_cast<size_t>(s - 1)]);
    double m = 2.0 * linear(hw, cs, c);  // 1x1 in projections, both streams
    m += 3.0 * linear(n, c, c) + matmul(n, c, n) + softmax(n, n) + matmul(n, n, c) + n * c;
    m += 2.0 * cfg.layers * bridged_transfer(hw, n, c, hidden);
    m += 2.0 * (linear(hw, c, cs) + hw * cs);  // 1x1 out projections + residual
    ledger.add("transfer_stage" + std::to_string(s), m);
  }

  double cd = static_cast<double>(cfg.cd);
  double hw2 = stage_hw[1];
  double decoder = 0;
  for (int s = 2; s <= 5; ++s) {
    double hw = stage_hw[static_cast<size_t>(s - 1)];
    double cs = static_cast<double>(kStageChannels[static_cast<size_t>(s - 1)]);
    decoder += linear(hw, cs, cd);
    if (s > 2) decoder += resize(hw2 * cd);
    decoder += hw2 * cd;  // accumulate
  }
  ledger.add("decoder_pyramids", 2.0 * decoder);

  double bca = 2.0 * hw2 * cd;  // two pooled means
  bca += 2.0 * (linear(1, cd + c, cd) + cd);        // relevance gates + sigmoid
  bca += linear(1, 2.0 * cd, cd) + cd;              // consistency trunk + relu
  bca += 2.0 * (linear(1, cd, cd) + cd);            // per-stream activations + sigmoid
  bca += 2.0 * 2.0 * hw2 * cd;                      // gate products over the maps
  ledger.add("gated_fusion", bca);

  double head = conv3x3(2.0 * cd, cd, 1, 1) * hw2 + hw2 * cd;  // fuse + relu
  head += conv3x3(cd, 1, 1, 1) * hw2 + hw2;             // logit + sigmoid
  head += resize(static_cast<double>(cfg.h0) * static_cast<double>(cfg.w0));
  ledger.add("predict_head", head);
  return ledger;
}

struct BenchResult {
  double median_ms = 0, min_ms = 0, max_ms = 0;
  double flops = 0;      // analytic count for one run
  double gflops_s = 0;   // flops / median time
};

// Times C += A*B for the given shapes, reps >= 5, reporting the median.
inline BenchResult bench_matmul(int64_t m, int64_t k, int64_t n, int reps = 9, uint64_t seed = 7) {
  if (reps < 5) reps = 5;
  Rng rng(seed);
  std::vector<float> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(k * n)),
      c(static_cast<size_t>(m * n));
  for (auto& v : a) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (auto& v : b) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  std::vector<double> times;
  for (int r = 0; r < reps; ++r) {
    std::fill(c.begin(), c.end(), 0.0f);
    auto t0 = std::chrono::steady_clock::now();
    detail::mm_acc(c.data(), a.data(), b.data(), m, k, n);
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  BenchResult out;
  out.median_ms = times[times.size() / 2];
  out.min_ms = times.front();
  out.max_ms = times.back();
  out.flops = flops::matmul(static_cast<double>(m), static_cast<double>(k), static_cast<double>(n));
  out.gflops_s = out.flops / (out.median_ms * 1e6);
  // keep the computation observable
  volatile float sink = c[0];
  (void)sink;
  return out;
}

}  // namespace lbdt

#endif  // LBDT_FLOPS_HPP

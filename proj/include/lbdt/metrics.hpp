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

#ifndef LBDT_METRICS_HPP
#define LBDT_METRICS_HPP

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "lbdt/tensor.hpp"

namespace lbdt {

struct BinaryMask {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> on;  // row-major 0/1

  BinaryMask() = default;
  BinaryMask(int64_t height, int64_t width)
      : h(height), w(width), on(static_cast<size_t>(height * width), 0) {}

  uint8_t at(int64_t y, int64_t x) const { return on[static_cast<size_t>(y * w + x)]; }
  void set(int64_t y, int64_t x, uint8_t v) { on[static_cast<size_t>(y * w + x)] = v; }
  int64_t count() const {
    int64_t c = 0;
    for (uint8_t v : on) c += v;
    return c;
  }
};

// Foreground iff probability strictly above 0.5, so an all-0.5 map is empty.
template <typename T>
BinaryMask threshold_mask(const Tensor<T>& prob) {
  if (!(prob.rank() == 2 || (prob.rank() == 3 && prob.shape[0] == 1)))
    throw std::invalid_argument("threshold_mask: need (h x w) or (1 x h x w), got " +
                                shape_str(prob.shape));
  BinaryMask m(prob.shape[prob.rank() - 2], prob.shape[prob.rank() - 1]);
  for (size_t i = 0; i < m.on.size(); ++i) m.on[i] = prob.data[i] > T(0.5) ? 1 : 0;
  return m;
}

struct EvalReport {
  double overall_iou = 0, mean_iou = 0;
  double p_at[5] = {0, 0, 0, 0, 0};  // thresholds 0.5, 0.6, 0.7, 0.8, 0.9
  double ap = 0, j_mean = 0, f_mean = 0;

  std::string to_json() const {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"overall_iou\":%.6f,\"mean_iou\":%.6f,\"p_at_50\":%.6f,\"p_at_60\":%.6f,"
                  "\"p_at_70\":%.6f,\"p_at_80\":%.6f,\"p_at_90\":%.6f,\"ap\":%.6f,"
                  "\"j_mean\":%.6f,\"f_mean\":%.6f}",
                  overall_iou, mean_iou, p_at[0], p_at[1], p_at[2], p_at[3], p_at[4], ap, j_mean,
                  f_mean);
    return buf;
  }
};

namespace metric_detail {

inline void check_pairs(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                        const char* op) {
  if (preds.empty() || preds.size() != gts.size())
    throw std::invalid_argument(std::string(op) + ": need equal-length non-empty mask lists");
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i].h != gts[i].h || preds[i].w != gts[i].w)
      throw std::invalid_argument(std::string(op) + ": mask pair " + std::to_string(i) +
                                  " has mismatched sizes");
}

// Empty-vs-empty counts as a perfect match.
inline double pair_iou(const BinaryMask& p, const BinaryMask& g, int64_t* inter_out = nullptr,
                       int64_t* union_out = nullptr) {
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < p.on.size(); ++i) {
    inter += (p.on[i] & g.on[i]);
    uni += (p.on[i] | g.on[i]);
  }
  if (inter_out) *inter_out = inter;
  if (union_out) *union_out = uni;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// A foreground pixel is boundary when a 4-neighbour is background or lies
// outside the image.
inline BinaryMask boundary_of(const BinaryMask& m) {
  BinaryMask b(m.h, m.w);
  for (int64_t y = 0; y < m.h; ++y)
    for (int64_t x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1;
      if (!edge)
        edge = !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
      if (edge) b.set(y, x, 1);
    }
  return b;
}

// Fraction of boundary pixels in `from` with a boundary pixel of `to` within
// Euclidean distance r. Scans the disk neighbourhood per pixel.
inline double matched_fraction(const BinaryMask& from, const BinaryMask& to, int64_t r) {
  int64_t total = 0, matched = 0;
  for (int64_t y = 0; y < from.h; ++y)
    for (int64_t x = 0; x < from.w; ++x) {
      if (!from.at(y, x)) continue;
      ++total;
      bool hit = false;
      for (int64_t dy = -r; dy <= r && !hit; ++dy) {
        int64_t yy = y + dy;
        if (yy < 0 || yy >= to.h) continue;
        for (int64_t dx = -r; dx <= r; ++dx) {
          int64_t xx = x + dx;
          if (xx < 0 || xx >= to.w) continue;
          if (dy * dy + dx * dx > r * r) continue;
          if (to.at(yy, xx)) {
            hit = true;
            break;
          }
        }
      }
      matched += hit ? 1 : 0;
    }
  return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total);
}

}  // namespace metric_detail

// Boundary F-measure: precision/recall of boundary pixels matched within a
// tolerance of 0.8% of the image diagonal, rounded up. Two empty boundaries
// score 1; exactly one empty scores 0.
inline double boundary_f_measure(const BinaryMask& pred, const BinaryMask& gt) {
  using namespace metric_detail;
  BinaryMask bp = boundary_of(pred);
  BinaryMask bg = boundary_of(gt);
  int64_t np = bp.count(), ng = bg.count();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  int64_t r = static_cast<int64_t>(
      std::ceil(0.008 * std::sqrt(static_cast<double>(pred.h * pred.h + pred.w * pred.w))));
  double precision = matched_fraction(bp, bg, r);
  double recall = matched_fraction(bg, bp, r);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

// Overall IoU (summed intersections over summed unions), mean IoU, P@X for
// X in {0.5..0.9} (strictly greater), and AP as the mean of the ten
// precisions over thresholds 0.50:0.05:0.95.
inline void iou_metrics(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                        EvalReport& out) {
  metric_detail::check_pairs(preds, gts, "iou_metrics");
  int64_t inter_sum = 0, union_sum = 0;
  std::vector<double> ious;
  ious.reserve(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) {
    int64_t inter = 0, uni = 0;
    double iou = metric_detail::pair_iou(preds[i], gts[i], &inter, &uni);
    inter_sum += inter;
    union_sum += uni;
    ious.push_back(iou);
  }
  out.overall_iou =
      union_sum == 0 ? 1.0 : static_cast<double>(inter_sum) / static_cast<double>(union_sum);
  double sum = 0;
  for (double v : ious) sum += v;
  out.mean_iou = sum / static_cast<double>(ious.size());
  for (int i = 0; i < 5; ++i) {
    double threshold = 0.5 + 0.1 * i;
    int64_t hits = 0;
    for (double v : ious) hits += v > threshold ? 1 : 0;
    out.p_at[i] = static_cast<double>(hits) / static_cast<double>(ious.size());
  }
  double ap = 0;
  for (int i = 0; i < 10; ++i) {
    double threshold = 0.5 + 0.05 * i;
    int64_t hits = 0;
    for (double v : ious) hits += v > threshold ? 1 : 0;
    ap += static_cast<double>(hits) / static_cast<double>(ious.size());
  }
  out.ap = ap / 10.0;
}

// Region similarity J (mean IoU) and contour accuracy F (mean boundary
// F-measure).
inline void j_and_f(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                    EvalReport& out) {
  metric_detail::check_pairs(preds, gts, "j_and_f");
  double j_sum = 0, f_sum = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    j_sum += metric_detail::pair_iou(preds[i], gts[i]);
    f_sum += boundary_f_measure(preds[i], gts[i]);
  }
  out.j_mean = j_sum / static_cast<double>(preds.size());
  out.f_mean = f_sum / static_cast<double>(preds.size());
}

inline EvalReport evaluate_masks(const std::vector<BinaryMask>& preds,
                                 const std::vector<BinaryMask>& gts) {
  EvalReport report;
  iou_metrics(preds, gts, report);
  j_and_f(preds, gts, report);
  return report;
}

}  // namespace lbdt

#endif  // LBDT_METRICS_HPP

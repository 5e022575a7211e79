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

#ifndef LBDT_DECODER_HPP
#define LBDT_DECODER_HPP

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "lbdt/nn.hpp"

namespace lbdt {

// Collapses pyramid stages 2..5 of one stream to a single (c_d x h2 x w2)
// map: each stage is 1x1-projected to c_d, the deeper three are bilinearly
// upsampled to the stage-2 grid, and all four are summed. Linear in the
// pyramid for fixed weights.
template <typename T>
struct PyramidDecoder {
  std::array<ChannelProj<T>, 4> proj;  // stages 2, 3, 4, 5

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
             const std::array<int64_t, 5>& stage_channels, int64_t cd) {
    for (int i = 0; i < 4; ++i)
      proj[static_cast<size_t>(i)].build(ps, rng, prefix + ".p" + std::to_string(i + 2),
                                         stage_channels[static_cast<size_t>(i + 1)], cd);
  }

  // stages: pyramid stages 1..5 at indices 0..4.
  Var<T> forward(Binder<T>& bind, const std::vector<Var<T>>& stages) const {
    detail::require(stages.size() == 5, "decode_pyramid",
                    "expected 5 pyramid stages, got " + std::to_string(stages.size()));
    const Shape& base = stages[1].shape();
    int64_t h2 = base[1], w2 = base[2];
    Var<T> acc = proj[0].forward(bind, stages[1]);
    for (int i = 1; i < 4; ++i) {
      Var<T> p = proj[static_cast<size_t>(i)].forward(bind, stages[static_cast<size_t>(i + 1)]);
      acc = add(acc, upsample_bilinear(p, h2, w2));
    }
    return acc;
  }
};

// Bilateral channel gating of the two decoded streams. Language denoisers
// gate each stream from its pooled feature joined with the sentence feature;
// consistency activators gate both streams from their joint pooled feature.
// Disabled components leave the corresponding gate at one.
template <typename T>
struct Bca {
  LinearLayer<T> denoise_s, denoise_t;  // [pooled; sentence] -> c_d
  LinearLayer<T> consist;               // [t; s] -> c_d
  LinearLayer<T> act_t, act_s;          // c_d -> c_d

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t cd, int64_t cr) {
    denoise_s.build(ps, rng, prefix + ".denoise_s", cd + cr, cd);
    denoise_t.build(ps, rng, prefix + ".denoise_t", cd + cr, cd);
    consist.build(ps, rng, prefix + ".consist", 2 * cd, cd);
    act_t.build(ps, rng, prefix + ".act_t", cd, cd);
    act_s.build(ps, rng, prefix + ".act_s", cd, cd);
  }

  // Returns (gated temporal, gated spatial).
  std::pair<Var<T>, Var<T>> forward(Binder<T>& bind, const Var<T>& d_s, const Var<T>& d_t,
                                    const Var<T>& sentence, bool enable_ld, bool enable_stc) const {
    detail::require(d_s.shape() == d_t.shape(), "bca",
                    "decoded shapes disagree: " + shape_str(d_s.shape()) + " vs " +
                        shape_str(d_t.shape()));
    detail::require(sentence.shape().size() == 1 && sentence.shape()[0] == denoise_s.in - d_s.shape()[0],
                    "bca", "sentence feature width " + shape_str(sentence.shape()) +
                               " does not match configured input " + std::to_string(denoise_s.in));
    if (!enable_ld && !enable_stc) return {d_t, d_s};
    Var<T> s = global_avg_pool(d_s);
    Var<T> t = global_avg_pool(d_t);
    Var<T> gate_t, gate_s;
    bool have_gate = false;
    if (enable_ld) {
      gate_s = sigmoid(denoise_s.forward(bind, concat(s, sentence)));
      gate_t = sigmoid(denoise_t.forward(bind, concat(t, sentence)));
      have_gate = true;
    }
    if (enable_stc) {
      Var<T> f = relu(consist.forward(bind, concat(t, s)));
      Var<T> f_t = sigmoid(act_t.forward(bind, f));
      Var<T> f_s = sigmoid(act_s.forward(bind, f));
      gate_t = have_gate ? mul(gate_t, f_t) : f_t;
      gate_s = have_gate ? mul(gate_s, f_s) : f_s;
    }
    return {channel_scale(d_t, gate_t), channel_scale(d_s, gate_s)};
  }
};

// Fuses the two gated streams into a probability map at input resolution:
// channel concat, 3x3 fusion conv + relu, 3x3 logit conv, sigmoid, bilinear
// upsample. Every output value lies strictly in (0,1).
template <typename T>
struct PredictHead {
  Conv3x3Layer<T> fuse;   // 2 c_d -> c_d
  Conv3x3Layer<T> logit;  // c_d -> 1

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t cd) {
    fuse.build(ps, rng, prefix + ".fuse", 2 * cd, cd, 1);
    logit.build(ps, rng, prefix + ".logit", cd, 1, 1);
  }

  Var<T> forward(Binder<T>& bind, const Var<T>& gated_s, const Var<T>& gated_t, int64_t h0,
                 int64_t w0) const {
    detail::require(gated_s.shape() == gated_t.shape(), "predict_head",
                    "gated shapes disagree: " + shape_str(gated_s.shape()) + " vs " +
                        shape_str(gated_t.shape()));
    Var<T> fused = relu(fuse.forward(bind, concat(gated_s, gated_t)));
    Var<T> prob = sigmoid(logit.forward(bind, fused));
    return upsample_bilinear(prob, h0, w0);
  }
};

// 8-bit binary PGM (P5, maxval 255) for eyeballing probability maps.
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& map) {
  const Tensor<T>* m = &map;
  if (!(m->rank() == 2 || (m->rank() == 3 && m->shape[0] == 1)))
    throw std::invalid_argument("write_pgm: need (h x w) or (1 x h x w), got " + shape_str(map.shape));
  int64_t h = m->shape[m->rank() - 2], w = m->shape[m->rank() - 1];
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (int64_t i = 0; i < h * w; ++i) {
    double v = static_cast<double>(m->data[static_cast<size_t>(i)]);
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    f.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
  }
  if (!f) throw std::runtime_error("short write to " + path);
}

}  // namespace lbdt

#endif  // LBDT_DECODER_HPP

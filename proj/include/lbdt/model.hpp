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

#ifndef LBDT_MODEL_HPP
#define LBDT_MODEL_HPP

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "lbdt/decoder.hpp"
#include "lbdt/encoders.hpp"
#include "lbdt/lbdt.hpp"
#include "lbdt/serialize.hpp"

namespace lbdt {

struct ModelConfig {
  int64_t h0 = 64, w0 = 64;
  int n_words = 25;
  int64_t cm = 64, cd = 32;
  int layers = 1;
  std::vector<int> insert_stages = {4, 5};
  int64_t mlp_hidden = 0;  // 0 means 2 * cm
  int vocab_size = 2;
  bool enable_t2s = true, enable_s2t = true;
  bool enable_ld = true, enable_stc = true;

  int64_t mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 2 * cm; }

  void validate() const {
    if (h0 < 32 || w0 < 32 || h0 % 32 != 0 || w0 % 32 != 0)
      throw std::invalid_argument("ModelConfig: h0/w0 must be positive multiples of 32");
    if (cm < 4 || cm % 4 != 0) throw std::invalid_argument("ModelConfig: cm must be divisible by 4");
    if (cd < 1) throw std::invalid_argument("ModelConfig: cd must be positive");
    if (layers < 1) throw std::invalid_argument("ModelConfig: layers must be >= 1");
    if (n_words < 1) throw std::invalid_argument("ModelConfig: n_words must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocabulary too small");
    if (insert_stages.empty()) throw std::invalid_argument("ModelConfig: insert_stages empty");
    for (int s : insert_stages)
      if (s < 2 || s > 5)
        throw std::invalid_argument("ModelConfig: insert stage " + std::to_string(s) +
                                    " outside {2..5}");
  }
};

template <typename T>
struct ModelInput {
  Tensor<T> target;     // 3 x h0 x w0
  Tensor<T> reference;  // 3 x h0 x w0
  std::vector<int> tokens;
};

// The full network: two visual encoders bridged by duplex transfer modules
// at the configured stages, decoded per stream, gated, and fused to a
// probability map. Ablation flags only change the forward wiring; the
// parameter set and its initialization stream are identical across flags.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::sort(cfg_.insert_stages.begin(), cfg_.insert_stages.end());
    cfg_.insert_stages.erase(std::unique(cfg_.insert_stages.begin(), cfg_.insert_stages.end()),
                             cfg_.insert_stages.end());
    Rng rng(derive_seed(seed, 0x1417u));
    spatial_enc_.build(params_, rng, "enc_s");
    temporal_enc_.build(params_, rng, "enc_t");
    text_enc_.build(params_, rng, "text", cfg_.vocab_size, cfg_.cm);
    for (int stage : cfg_.insert_stages) {
      auto& m = modules_[stage];
      m.build(params_, rng, "lbdt.s" + std::to_string(stage),
              kStageChannels[static_cast<size_t>(stage - 1)], cfg_.cm, cfg_.mlp_width(), cfg_.layers);
    }
    dec_s_.build(params_, rng, "dec_s", kStageChannels, cfg_.cd);
    dec_t_.build(params_, rng, "dec_t", kStageChannels, cfg_.cd);
    bca_.build(params_, rng, "bca", cfg_.cd, cfg_.cm);
    head_.build(params_, rng, "head", cfg_.cd);
  }

  // Returns the (1 x h0 x w0) probability map. The binder is handed back so
  // the caller can harvest parameter gradients after backward.
  Var<T> forward(Binder<T>& bind, const ModelInput<T>& in,
                 AttentionCapture<T>* capture = nullptr) const {
    Tape<T>& tape = bind.tape();
    detail::require(in.target.shape == Shape({3, cfg_.h0, cfg_.w0}), "model",
                    "target frame shape " + shape_str(in.target.shape) + " does not match config");
    detail::require(in.reference.shape == in.target.shape, "model",
                    "reference frame shape " + shape_str(in.reference.shape) + " differs from target");
    detail::require(static_cast<int>(in.tokens.size()) == cfg_.n_words, "model",
                    "token count " + std::to_string(in.tokens.size()) + " does not match configured " +
                        std::to_string(cfg_.n_words));
    Var<T> target = tape.constant(in.target);
    Var<T> moving = tape.constant(frame_difference(in.target, in.reference));
    WordFeatures<T> words = text_enc_.forward(bind, in.tokens);

    std::vector<Var<T>> s_stages, t_stages;
    Var<T> s = target, t = moving;
    for (int stage = 1; stage <= 5; ++stage) {
      s = relu(spatial_enc_.refine[static_cast<size_t>(stage - 1)].forward(
          bind, relu(spatial_enc_.down[static_cast<size_t>(stage - 1)].forward(bind, s))));
      t = relu(temporal_enc_.refine[static_cast<size_t>(stage - 1)].forward(
          bind, relu(temporal_enc_.down[static_cast<size_t>(stage - 1)].forward(bind, t))));
      auto it = modules_.find(stage);
      if (it != modules_.end()) {
        auto [s2, t2] = it->second.forward(bind, s, t, words, cfg_.enable_t2s, cfg_.enable_s2t, stage,
                                           capture);
        s = s2;
        t = t2;
      }
      s_stages.push_back(s);
      t_stages.push_back(t);
    }

    Var<T> d_s = dec_s_.forward(bind, s_stages);
    Var<T> d_t = dec_t_.forward(bind, t_stages);
    Var<T> sentence = sentence_feature(bind, words);
    auto [gated_t, gated_s] = bca_.forward(bind, d_s, d_t, sentence, cfg_.enable_ld, cfg_.enable_stc);
    return head_.forward(bind, gated_s, gated_t, cfg_.h0, cfg_.w0);
  }

  // Sum of the valid word rows of the raw word matrix.
  Var<T> sentence_feature(Binder<T>& bind, const WordFeatures<T>& words) const {
    Tape<T>& tape = bind.tape();
    int64_t n = words.rows.shape()[0];
    Tensor<T> picker({1, n});
    for (int64_t i = 0; i < n; ++i)
      picker.at2(0, i) = words.valid[static_cast<size_t>(i)] ? T(1) : T(0);
    return reshape(matmul(tape.constant(std::move(picker)), words.rows), {cfg_.cm});
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const std::map<int, LbdtModule<T>>& modules() const { return modules_; }

  void export_weights(Checkpoint& ck) const {
    for (size_t i = 0; i < params_.size(); ++i) {
      const Param<T>& p = params_.at(static_cast<int>(i));
      ck.tensors.emplace_back(p.name, p.value.template cast<float>());
      if (!p.adam_m.data.empty()) {
        ck.tensors.emplace_back(p.name + ".adam_m", p.adam_m.template cast<float>());
        ck.tensors.emplace_back(p.name + ".adam_v", p.adam_v.template cast<float>());
      }
    }
  }

  void import_weights(const Checkpoint& ck) {
    for (size_t i = 0; i < params_.size(); ++i) {
      Param<T>& p = params_.at(static_cast<int>(i));
      const Tensor<float>* v = ck.find(p.name);
      if (!v) throw std::runtime_error("checkpoint: missing tensor " + p.name);
      if (v->shape != p.value.shape)
        throw std::runtime_error("checkpoint: tensor " + p.name + " has shape " +
                                 shape_str(v->shape) + ", model expects " + shape_str(p.value.shape));
      p.value = v->template cast<T>();
      const Tensor<float>* m = ck.find(p.name + ".adam_m");
      const Tensor<float>* vv = ck.find(p.name + ".adam_v");
      if (m && vv) {
        p.adam_m = m->template cast<T>();
        p.adam_v = vv->template cast<T>();
      } else {
        p.adam_m = {};
        p.adam_v = {};
      }
    }
    size_t expected = 0;
    for (size_t i = 0; i < params_.size(); ++i) {
      const Param<T>& p = params_.at(static_cast<int>(i));
      expected += 1 + (p.adam_m.data.empty() ? 0 : 2);
    }
    if (ck.tensors.size() != expected)
      throw std::runtime_error("checkpoint: holds " + std::to_string(ck.tensors.size()) +
                               " tensors, model expects " + std::to_string(expected));
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  VisualEncoder<T> spatial_enc_, temporal_enc_;
  TextEncoder<T> text_enc_;
  std::map<int, LbdtModule<T>> modules_;
  PyramidDecoder<T> dec_s_, dec_t_;
  Bca<T> bca_;
  PredictHead<T> head_;
};

}  // namespace lbdt

#endif  // LBDT_MODEL_HPP

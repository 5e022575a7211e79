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

#ifndef LBDT_LBDT_HPP
#define LBDT_LBDT_HPP

#include <string>
#include <utility>
#include <vector>

#include "lbdt/encoders.hpp"
#include "lbdt/nn.hpp"
#include "lbdt/posenc.hpp"
#include "lbdt/serialize.hpp"

namespace lbdt {

enum class TransferDirection { kTemporalToSpatial, kSpatialToTemporal };

// Word matrix carrying attention-pooled visual content; the bottleneck the
// two visual streams exchange information through. Pad rows hold only their
// enhanced-word residual: the pooled visual term is masked off for them.
template <typename T>
struct LanguageMedium {
  Var<T> rows;  // n x c
  std::vector<uint8_t> valid;
  TransferDirection direction = TransferDirection::kTemporalToSpatial;
};

// Snapshot of attention matrices taken during a forward pass, for dumping
// and analysis. Weights are copies; rows sum to 1 over valid columns.
template <typename T>
struct AttentionCapture {
  struct Entry {
    int stage = 0;
    int layer = 0;          // 0 for the word self-attention
    std::string kind;       // word_self | agg_t2s | agg_s2t | transfer_t2s | transfer_s2t
    Tensor<T> weights;
  };
  std::vector<Entry> entries;

  const Entry* find(int stage, int layer, const std::string& kind) const {
    for (const auto& e : entries)
      if (e.stage == stage && e.layer == layer && e.kind == kind) return &e;
    return nullptr;
  }
};

// Self-attention refinement of the word matrix: queries/keys/values from the
// position-encoded words, pad columns masked, residual back onto the input.
template <typename T>
Var<T> enhance_words(Binder<T>& bind, const WordFeatures<T>& words, const Tensor<T>& pe,
                     const LinearLayer<T>& q, const LinearLayer<T>& k, const LinearLayer<T>& v,
                     Tensor<T>* capture = nullptr) {
  if (words.n_valid == 0) throw std::invalid_argument("enhance_words: no valid words");
  Tape<T>& t = bind.tape();
  const Shape& s = words.rows.shape();
  detail::require(pe.shape == s, "enhance_words",
                  "positional encoding " + shape_str(pe.shape) + " does not match words " + shape_str(s));
  T inv_sqrt = T(1) / static_cast<T>(std::sqrt(static_cast<double>(s[1])));
  Var<T> encoded = add(words.rows, t.constant(pe));
  Var<T> queries = q.forward(bind, encoded);
  Var<T> keys = k.forward(bind, encoded);
  Var<T> values = v.forward(bind, encoded);
  Var<T> attn = masked_softmax(scale(matmul(queries, transpose_last2(keys)), inv_sqrt), words.valid);
  if (capture) *capture = attn.value();
  return add(matmul(attn, values), words.rows);
}

template <typename T>
struct TransferWeights {
  LinearLayer<T> agg_query;    // enhanced words -> queries over pixels
  LinearLayer<T> agg_key;      // position-encoded pixels -> keys
  LinearLayer<T> agg_value;    // position-encoded pixels -> values
  LinearLayer<T> read_query;   // position-encoded pixels -> queries over words
  LinearLayer<T> read_key;     // medium -> keys
  LinearLayer<T> read_value;   // medium -> values
  Mlp<T> mlp;                  // closing layer zero-initialized

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t cm, int64_t mlp_hidden) {
    agg_query.build(ps, rng, prefix + ".agg_q", cm, cm);
    agg_key.build(ps, rng, prefix + ".agg_k", cm, cm);
    agg_value.build(ps, rng, prefix + ".agg_v", cm, cm);
    read_query.build(ps, rng, prefix + ".read_q", cm, cm);
    read_key.build(ps, rng, prefix + ".read_k", cm, cm);
    read_value.build(ps, rng, prefix + ".read_v", cm, cm);
    mlp.build(ps, rng, prefix + ".mlp", cm, mlp_hidden, cm, /*zero_last=*/true);
  }
};

namespace detail {

// Flattens a position-encoded map to pixel rows: (c x h x w) -> (hw x c).
template <typename T>
Var<T> pixel_rows(Binder<T>& bind, const Var<T>& x, const Tensor<T>& pe) {
  const Shape& s = x.shape();
  require(pe.shape == s, "pixel_rows",
          "positional encoding " + shape_str(pe.shape) + " does not match features " + shape_str(s));
  Var<T> encoded = add(x, bind.tape().constant(pe));
  return transpose_last2(reshape(encoded, {s[0], s[1] * s[2]}));
}

}  // namespace detail

// Pools pixel content into each word slot by word-to-pixel attention and adds
// the enhanced words residually, producing the language medium.
template <typename T>
LanguageMedium<T> aggregate_to_medium(Binder<T>& bind, const Var<T>& x, const Var<T>& enhanced,
                                      const std::vector<uint8_t>& valid, const Tensor<T>& pe,
                                      const TransferWeights<T>& w, TransferDirection direction,
                                      Tensor<T>* capture = nullptr) {
  Tape<T>& t = bind.tape();
  const Shape& xs = x.shape();
  const Shape& rs = enhanced.shape();
  detail::require(xs.size() == 3 && xs[0] == rs[1], "aggregate_to_medium",
                  "channel mismatch between features " + shape_str(xs) + " and words " + shape_str(rs));
  int64_t cm = xs[0], hw = xs[1] * xs[2], n = rs[0];
  T inv_sqrt = T(1) / static_cast<T>(std::sqrt(static_cast<double>(cm)));
  Var<T> pixels = detail::pixel_rows(bind, x, pe);
  Var<T> queries = w.agg_query.forward(bind, enhanced);
  Var<T> keys = w.agg_key.forward(bind, pixels);
  Var<T> values = w.agg_value.forward(bind, pixels);
  std::vector<uint8_t> all_pixels(static_cast<size_t>(hw), uint8_t(1));
  Var<T> attn = masked_softmax(scale(matmul(queries, transpose_last2(keys)), inv_sqrt), all_pixels);
  if (capture) *capture = attn.value();
  // Pad word slots contribute nothing downstream; keep their pooled term zero
  // so the medium's pad rows carry only the enhanced-word residual.
  Tensor<T> row_mask({n, cm});
  for (int64_t i = 0; i < n; ++i)
    if (valid[static_cast<size_t>(i)])
      for (int64_t j = 0; j < cm; ++j) row_mask.at2(i, j) = T(1);
  Var<T> pooled = mul(matmul(attn, values), t.constant(std::move(row_mask)));
  return LanguageMedium<T>{add(pooled, enhanced), valid, direction};
}

// Lets every pixel read from the medium by pixel-to-word attention; the MLP
// output re-enters the stream as a residual on the un-encoded features.
template <typename T>
Var<T> transfer_from_medium(Binder<T>& bind, const Var<T>& x, const LanguageMedium<T>& medium,
                            const Tensor<T>& pe, const TransferWeights<T>& w,
                            Tensor<T>* capture = nullptr) {
  const Shape& xs = x.shape();
  detail::require(!medium.valid.empty(), "transfer_from_medium", "medium mask absent");
  int64_t cm = xs[0], h = xs[1], wd = xs[2];
  T inv_sqrt = T(1) / static_cast<T>(std::sqrt(static_cast<double>(cm)));
  Var<T> pixels = detail::pixel_rows(bind, x, pe);
  Var<T> queries = w.read_query.forward(bind, pixels);
  Var<T> keys = w.read_key.forward(bind, medium.rows);
  Var<T> values = w.read_value.forward(bind, medium.rows);
  Var<T> attn = masked_softmax(scale(matmul(queries, transpose_last2(keys)), inv_sqrt), medium.valid);
  if (capture) *capture = attn.value();
  Var<T> read = w.mlp.forward(bind, matmul(attn, values));
  return add(reshape(transpose_last2(read), {cm, h, wd}), x);
}

// One duplex block for one pyramid stage: channel projections in, shared
// word enhancement, L layers of the two bridged transfers computed from each
// layer's common input, then zero-initialized projections back onto the
// original features. With both directions disabled it is a strict pass-through.
template <typename T>
struct LbdtModule {
  ChannelProj<T> in_proj_s, in_proj_t;
  LinearLayer<T> word_q, word_k, word_v;
  std::vector<TransferWeights<T>> t2s, s2t;
  ChannelProj<T> out_proj_s, out_proj_t;
  int64_t cm = 0;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t stage_channels,
             int64_t cm_in, int64_t mlp_hidden, int layers) {
    if (layers < 1) throw std::invalid_argument("LbdtModule: layer count must be >= 1");
    cm = cm_in;
    in_proj_s.build(ps, rng, prefix + ".in_s", stage_channels, cm);
    in_proj_t.build(ps, rng, prefix + ".in_t", stage_channels, cm);
    word_q.build(ps, rng, prefix + ".word_q", cm, cm);
    word_k.build(ps, rng, prefix + ".word_k", cm, cm);
    word_v.build(ps, rng, prefix + ".word_v", cm, cm);
    t2s.resize(static_cast<size_t>(layers));
    s2t.resize(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
      t2s[static_cast<size_t>(l)].build(ps, rng, prefix + ".l" + std::to_string(l + 1) + ".t2s", cm,
                                        mlp_hidden);
      s2t[static_cast<size_t>(l)].build(ps, rng, prefix + ".l" + std::to_string(l + 1) + ".s2t", cm,
                                        mlp_hidden);
    }
    out_proj_s.build(ps, rng, prefix + ".out_s", cm, stage_channels, Init::kZero);
    out_proj_t.build(ps, rng, prefix + ".out_t", cm, stage_channels, Init::kZero);
  }

  std::pair<Var<T>, Var<T>> forward(Binder<T>& bind, const Var<T>& s_in, const Var<T>& t_in,
                                    const WordFeatures<T>& words, bool enable_t2s, bool enable_s2t,
                                    int stage_index = 0, AttentionCapture<T>* capture = nullptr) const {
    detail::require(s_in.shape() == t_in.shape(), "lbdt_module",
                    "spatial " + shape_str(s_in.shape()) + " and temporal " + shape_str(t_in.shape()) +
                        " disagree");
    if (!enable_t2s && !enable_s2t) return {s_in, t_in};
    const Shape& shp = s_in.shape();
    Tensor<T> pe2d = sinusoid_2d<T>(shp[1], shp[2], cm);
    Tensor<T> pe1d = sinusoid_1d<T>(words.rows.shape()[0], cm);

    auto grab = [capture, stage_index](int layer, const char* kind) -> Tensor<T>* {
      if (!capture) return nullptr;
      capture->entries.push_back({stage_index, layer, kind, {}});
      return &capture->entries.back().weights;
    };

    Var<T> s = in_proj_s.forward(bind, s_in);
    Var<T> t = in_proj_t.forward(bind, t_in);
    Var<T> enhanced = enhance_words(bind, words, pe1d, word_q, word_k, word_v, grab(0, "word_self"));

    int layers = static_cast<int>(t2s.size());
    for (int l = 0; l < layers; ++l) {
      Var<T> s_cur = s, t_cur = t;
      if (enable_t2s) {
        LanguageMedium<T> medium =
            aggregate_to_medium(bind, t_cur, enhanced, words.valid, pe2d, t2s[static_cast<size_t>(l)],
                                TransferDirection::kTemporalToSpatial, grab(l + 1, "agg_t2s"));
        s = transfer_from_medium(bind, s_cur, medium, pe2d, t2s[static_cast<size_t>(l)],
                                 grab(l + 1, "transfer_t2s"));
      }
      if (enable_s2t) {
        LanguageMedium<T> medium =
            aggregate_to_medium(bind, s_cur, enhanced, words.valid, pe2d, s2t[static_cast<size_t>(l)],
                                TransferDirection::kSpatialToTemporal, grab(l + 1, "agg_s2t"));
        t = transfer_from_medium(bind, t_cur, medium, pe2d, s2t[static_cast<size_t>(l)],
                                 grab(l + 1, "transfer_s2t"));
      }
    }

    Var<T> s_out = enable_t2s ? add(out_proj_s.forward(bind, s), s_in) : s_in;
    Var<T> t_out = enable_s2t ? add(out_proj_t.forward(bind, t), t_in) : t_in;
    return {s_out, t_out};
  }
};

// Writes the per-word maps of a word-to-pixel attention matrix as one
// (n_valid x h x w) tensor file plus a text sidecar listing the words.
template <typename T>
void dump_attention(const Tensor<T>& attn, const std::vector<std::string>& words,
                    const std::vector<uint8_t>& valid, int64_t h, int64_t w,
                    const std::string& out_prefix) {
  if (attn.rank() != 2 || attn.shape[1] != h * w)
    throw std::invalid_argument("dump_attention: map " + shape_str(attn.shape) +
                                " does not cover a " + std::to_string(h) + "x" + std::to_string(w) +
                                " grid");
  int64_t n = attn.shape[0];
  if (static_cast<int64_t>(words.size()) != n || static_cast<int64_t>(valid.size()) != n)
    throw std::invalid_argument("dump_attention: word list does not match map rows");
  int64_t n_valid = 0;
  for (uint8_t v : valid) n_valid += v ? 1 : 0;
  if (n_valid == 0) throw std::invalid_argument("dump_attention: no valid words");
  Tensor<T> maps({n_valid, h, w});
  std::string sidecar;
  int64_t row = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (!valid[static_cast<size_t>(i)]) continue;
    for (int64_t p = 0; p < h * w; ++p) maps.data[static_cast<size_t>(row * h * w + p)] = attn.at2(i, p);
    sidecar += words[static_cast<size_t>(i)] + "\n";
    ++row;
  }
  save_tensor(out_prefix + ".bin", maps);
  write_file_bytes(out_prefix + ".words.txt", sidecar);
}

}  // namespace lbdt

#endif  // LBDT_LBDT_HPP

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

#ifndef LBDT_ENCODERS_HPP
#define LBDT_ENCODERS_HPP

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lbdt/nn.hpp"

namespace lbdt {

// Token table: line number in the vocabulary file is the id. Id 0 pads,
// id 1 absorbs unknown tokens.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
    if (tokens_.size() < 2) throw std::invalid_argument("Vocabulary: needs pad and unk entries");
  }

  static Vocabulary from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open vocabulary " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write vocabulary " + path);
    for (const auto& t : tokens_) f << t << "\n";
  }

  int id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const { return tokens_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(tokens_.size()); }

  // Whitespace tokenization, padded with id 0 to n slots.
  std::vector<int> encode(const std::string& expression, int n) const {
    std::istringstream is(expression);
    std::vector<int> ids;
    std::string tok;
    while (is >> tok) ids.push_back(id_of(tok));
    if (static_cast<int>(ids.size()) > n)
      throw std::invalid_argument("Vocabulary: expression longer than " + std::to_string(n) + " tokens");
    ids.resize(static_cast<size_t>(n), kPad);
    return ids;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

// |a - b| per pixel; symmetric, zero exactly where the frames agree.
template <typename T>
Tensor<T> frame_difference(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("frame_difference: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  Tensor<T> d(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) {
    T v = a.data[i] - b.data[i];
    d.data[i] = v < T(0) ? -v : v;
  }
  return d;
}

inline const std::array<int64_t, 5> kStageChannels = {16, 32, 64, 64, 64};

// Five-stage pyramid: each stage halves the spatial size with a stride-2
// 3x3 conv + relu, then refines with a stride-1 3x3 conv + relu. Stage s
// output is (channels[s] x h/2^s x w/2^s). The spatial and temporal
// encoders are two instances of this type and never share weights.
template <typename T>
struct VisualEncoder {
  std::array<Conv3x3Layer<T>, 5> down;
  std::array<Conv3x3Layer<T>, 5> refine;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix) {
    int64_t cin = 3;
    for (int s = 0; s < 5; ++s) {
      int64_t cout = kStageChannels[static_cast<size_t>(s)];
      down[static_cast<size_t>(s)].build(ps, rng, prefix + ".s" + std::to_string(s + 1) + ".down", cin,
                                         cout, 2);
      refine[static_cast<size_t>(s)].build(ps, rng, prefix + ".s" + std::to_string(s + 1) + ".refine",
                                           cout, cout, 1);
      cin = cout;
    }
  }

  // Returns stages 1..5 at indices 0..4.
  std::vector<Var<T>> forward(Binder<T>& bind, const Var<T>& image) const {
    std::vector<Var<T>> stages;
    Var<T> x = image;
    for (int s = 0; s < 5; ++s) {
      x = relu(down[static_cast<size_t>(s)].forward(bind, x));
      x = relu(refine[static_cast<size_t>(s)].forward(bind, x));
      stages.push_back(x);
    }
    return stages;
  }
};

// Word matrix with its validity mask; pad rows are exactly zero.
template <typename T>
struct WordFeatures {
  Var<T> rows;                 // n x c
  std::vector<uint8_t> valid;  // length n
  int n_valid = 0;
};

// Embedding lookup plus a single recurrent pass; word i's feature is the
// recurrent state after consuming it. Pad slots yield constant zero rows, so
// no gradient ever reaches them.
template <typename T>
struct TextEncoder {
  int embed = -1;
  GruCell<T> cell;
  int64_t c = 0;
  int vocab_size = 0;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int vocab, int64_t width) {
    c = width;
    vocab_size = vocab;
    Tensor<T> table({static_cast<int64_t>(vocab), width});
    double stddev = 1.0 / std::sqrt(static_cast<double>(width));
    for (auto& v : table.data) v = static_cast<T>(rng.normal(0.0, stddev));
    embed = ps.add(prefix + ".embed", std::move(table));
    cell.build(ps, rng, prefix + ".gru", width);
  }

  WordFeatures<T> forward(Binder<T>& bind, const std::vector<int>& tokens) const {
    Tape<T>& t = bind.tape();
    int64_t n = static_cast<int64_t>(tokens.size());
    WordFeatures<T> out;
    out.valid.resize(static_cast<size_t>(n));
    Var<T> table = bind(embed);
    Var<T> h = t.constant(Tensor<T>({c}));
    std::vector<Var<T>> rows;
    for (int64_t i = 0; i < n; ++i) {
      int id = tokens[static_cast<size_t>(i)];
      if (id < 0 || id >= vocab_size)
        throw std::invalid_argument("TextEncoder: token id " + std::to_string(id) + " outside vocabulary");
      bool is_pad = id == Vocabulary::kPad;
      out.valid[static_cast<size_t>(i)] = is_pad ? 0 : 1;
      if (is_pad) {
        rows.push_back(t.constant(Tensor<T>({1, c})));
        continue;
      }
      ++out.n_valid;
      Tensor<T> pick({1, static_cast<int64_t>(vocab_size)});
      pick.data[static_cast<size_t>(id)] = T(1);
      Var<T> x = reshape(matmul(t.constant(std::move(pick)), table), {c});
      h = cell.step(bind, x, h);
      rows.push_back(reshape(h, {1, c}));
    }
    out.rows = concat(rows);
    return out;
  }
};

}  // namespace lbdt

#endif  // LBDT_ENCODERS_HPP

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

#ifndef LBDT_NN_HPP
#define LBDT_NN_HPP

#include <map>
#include <string>
#include <vector>

#include "lbdt/autodiff.hpp"
#include "lbdt/rng.hpp"
#include "lbdt/tensor.hpp"

namespace lbdt {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> adam_m;  // sized on first optimizer step
  Tensor<T> adam_v;
};

// Registration-ordered parameter container. Iteration order is construction
// order, which fixes checkpoint layout and optimizer sweep order.
template <typename T>
class ParamStore {
 public:
  int add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    params_.push_back(Param<T>{name, std::move(init), {}, {}});
    int id = static_cast<int>(params_.size()) - 1;
    index_[name] = id;
    return id;
  }
  Param<T>& at(int id) { return params_[static_cast<size_t>(id)]; }
  const Param<T>& at(int id) const { return params_[static_cast<size_t>(id)]; }
  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  size_t size() const { return params_.size(); }

  int64_t total_values() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, int> index_;
};

// Lazily places parameters on a tape as leaves, one node per parameter per
// forward pass, so gradients can be harvested by parameter id afterwards.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParamStore<T>& store, bool trainable)
      : tape_(&tape), store_(&store), trainable_(trainable), bound_(store.size(), -1) {}

  Var<T> operator()(int param_id) {
    int& slot = bound_[static_cast<size_t>(param_id)];
    if (slot < 0) slot = tape_->leaf(store_->at(param_id).value, trainable_).id;
    return Var<T>{tape_, slot};
  }

  // -1 when the parameter never entered this graph.
  int var_of(int param_id) const { return bound_[static_cast<size_t>(param_id)]; }
  Tape<T>& tape() { return *tape_; }

 private:
  Tape<T>* tape_;
  ParamStore<T>* store_;
  bool trainable_;
  std::vector<int> bound_;
};

enum class Init { kZero, kXavier, kHe };

template <typename T>
Tensor<T> init_tensor(Shape shape, Init kind, int64_t fan_in, int64_t fan_out, Rng& rng) {
  Tensor<T> t(std::move(shape));
  switch (kind) {
    case Init::kZero:
      break;
    case Init::kXavier: {
      double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : t.data) v = static_cast<T>(rng.uniform(-limit, limit));
      break;
    }
    case Init::kHe: {
      double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
      break;
    }
  }
  return t;
}

// y = x W^T + b over the last axis.
template <typename T>
struct LinearLayer {
  int w = -1, b = -1;
  int64_t in = 0, out = 0;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t in_dim, int64_t out_dim,
             Init kind = Init::kXavier) {
    in = in_dim;
    out = out_dim;
    w = ps.add(prefix + ".w", init_tensor<T>({out_dim, in_dim}, kind, in_dim, out_dim, rng));
    b = ps.add(prefix + ".b", Tensor<T>({out_dim}));
  }
  Var<T> forward(Binder<T>& bind, const Var<T>& x) const { return linear(x, bind(w), bind(b)); }
};

template <typename T>
struct Conv3x3Layer {
  int w = -1, b = -1;
  int64_t stride = 1;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t cin, int64_t cout,
             int64_t stride_in, Init kind = Init::kHe) {
    stride = stride_in;
    w = ps.add(prefix + ".w", init_tensor<T>({cout, cin, 3, 3}, kind, cin * 9, cout * 9, rng));
    b = ps.add(prefix + ".b", Tensor<T>({cout}));
  }
  Var<T> forward(Binder<T>& bind, const Var<T>& x) const { return conv3x3(x, bind(w), bind(b), stride); }
};

// 1x1 channel projection of a (c x h x w) map, realized over flattened pixels.
template <typename T>
struct ChannelProj {
  LinearLayer<T> lin;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t cin, int64_t cout,
             Init kind = Init::kXavier) {
    lin.build(ps, rng, prefix, cin, cout, kind);
  }
  Var<T> forward(Binder<T>& bind, const Var<T>& x) const {
    const Shape& s = x.shape();
    int64_t c = s[0], h = s[1], w = s[2];
    Var<T> rows = transpose_last2(reshape(x, {c, h * w}));
    Var<T> projected = lin.forward(bind, rows);
    return reshape(transpose_last2(projected), {lin.out, h, w});
  }
};

// Two affine maps with a relu between; the closing map can start at zero so
// a residual branch using this block begins as the identity.
template <typename T>
struct Mlp {
  LinearLayer<T> first, second;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t in, int64_t hidden,
             int64_t out, bool zero_last) {
    first.build(ps, rng, prefix + ".fc1", in, hidden, Init::kXavier);
    second.build(ps, rng, prefix + ".fc2", hidden, out, zero_last ? Init::kZero : Init::kXavier);
  }
  Var<T> forward(Binder<T>& bind, const Var<T>& x) const {
    return second.forward(bind, relu(first.forward(bind, x)));
  }
};

// Single gated recurrent cell; processes one step of a (c)-vector sequence.
template <typename T>
struct GruCell {
  LinearLayer<T> update_gate, reset_gate, candidate;
  int64_t width = 0;

  void build(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int64_t c) {
    width = c;
    update_gate.build(ps, rng, prefix + ".update", 2 * c, c);
    reset_gate.build(ps, rng, prefix + ".reset", 2 * c, c);
    candidate.build(ps, rng, prefix + ".cand", 2 * c, c);
  }
  Var<T> step(Binder<T>& bind, const Var<T>& x, const Var<T>& h) const {
    Var<T> xh = concat(x, h);
    Var<T> z = sigmoid(update_gate.forward(bind, xh));
    Var<T> r = sigmoid(reset_gate.forward(bind, xh));
    Var<T> cand = tanh_val(candidate.forward(bind, concat(x, mul(r, h))));
    Var<T> keep = mul(z, h);
    Var<T> ones = bind.tape().constant(Tensor<T>::full({width}, T(1)));
    Var<T> blend = mul(sub(ones, z), cand);
    return add(keep, blend);
  }
};

}  // namespace lbdt

#endif  // LBDT_NN_HPP

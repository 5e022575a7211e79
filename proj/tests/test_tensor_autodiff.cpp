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

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "lbdt/autodiff.hpp"
#include "lbdt/gradcheck.hpp"
#include "lbdt/rng.hpp"
#include "lbdt/serialize.hpp"
#include "lbdt/tensor.hpp"

using namespace lbdt;
using T = double;

namespace {

Tensor<T> filled(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

void check_grads(const std::string& name, const std::function<Var<T>(Tape<T>&)>& builder) {
  GradCheckReport rep = gradient_check<T>(builder);
  INFO(name << ": checked " << rep.checked << ", max rel err " << rep.max_rel_err);
  if (!rep.failures.empty()) {
    const auto& f = rep.failures.front();
    INFO("first failure: leaf " << f.leaf << " element " << f.element << " analytic " << f.analytic
                                << " numeric " << f.numeric);
  }
  REQUIRE(rep.pass);
  REQUIRE(rep.checked > 0);
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<float> t({2, 3, 4});
  REQUIRE(t.numel() == 24);
  REQUIRE(t.rank() == 3);
  REQUIRE(t.data.size() == 24);
  t.at3(1, 2, 3) = 5.0f;
  REQUIRE(t.data[23] == 5.0f);
  REQUIRE(shape_str(t.shape) == "(2x3x4)");
  REQUIRE_THROWS_AS(Tensor<float>({2, 0}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor<float>({2, 2}, {1.0f, 2.0f}), std::invalid_argument);
  Tensor<float> s = Tensor<float>::scalar(3.5f);
  REQUIRE(s.shape == Shape{1});
  Tensor<double> d = t.cast<double>();
  REQUIRE(d.data[23] == 5.0);
}

TEST_CASE("rng determinism and state round-trip") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
  std::string state = a.save_state();
  std::vector<double> expect;
  for (int i = 0; i < 10; ++i) expect.push_back(a.normal());
  Rng c(7);
  c.load_state(state);
  for (int i = 0; i < 10; ++i) REQUIRE(c.normal() == expect[static_cast<size_t>(i)]);

  // derived streams differ from the base and from each other
  REQUIRE(derive_seed(1, 2) != derive_seed(1, 3));
  REQUIRE(derive_seed(1, 2) != derive_seed(2, 2));
}

TEST_CASE("rng distributions stay in range") {
  Rng rng(3);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    double g = rng.normal();
    sum += g;
    sq += g * g;
    int64_t k = rng.uniform_int(-3, 3);
    REQUIRE(k >= -3);
    REQUIRE(k <= 3);
  }
  REQUIRE(std::abs(sum / n) < 0.05);
  REQUIRE(std::abs(sq / n - 1.0) < 0.05);

  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  Rng r2(9);
  r2.shuffle(v.begin(), v.end());
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("tensor serialization round-trips byte-exactly") {
  Rng rng(11);
  Tensor<float> t32(Shape{3, 5});
  for (auto& v : t32.data) v = static_cast<float>(rng.uniform(-10, 10));
  std::string enc;
  append_tensor(enc, t32);
  REQUIRE(enc.substr(0, 4) == "LBDT");
  wire::Reader r1(enc, "buffer");
  Tensor<float> back = read_tensor<float>(r1);
  REQUIRE(back.shape == t32.shape);
  REQUIRE(std::memcmp(back.data.data(), t32.data.data(), t32.data.size() * sizeof(float)) == 0);
  std::string enc2;
  append_tensor(enc2, back);
  REQUIRE(enc == enc2);

  Tensor<double> t64 = filled({2, 2, 2}, rng);
  std::string e64;
  append_tensor(e64, t64);
  wire::Reader r2(e64, "buffer");
  Tensor<double> b64 = read_tensor<double>(r2);
  REQUIRE(std::memcmp(b64.data.data(), t64.data.data(), t64.data.size() * sizeof(double)) == 0);

  // dtype mismatch and truncation are loud
  wire::Reader r3(enc, "buffer");
  REQUIRE_THROWS_AS(read_tensor<double>(r3), std::runtime_error);
  std::string cut = enc.substr(0, enc.size() - 3);
  wire::Reader r4(cut, "buffer");
  REQUIRE_THROWS_AS(read_tensor<float>(r4), std::runtime_error);
  std::string bad = enc;
  bad[0] = 'X';
  wire::Reader r5(bad, "buffer");
  REQUIRE_THROWS_AS(read_tensor<float>(r5), std::runtime_error);
}

TEST_CASE("tensor file save and load") {
  auto dir = std::filesystem::temp_directory_path() / "lbdt_tensor_io";
  std::filesystem::create_directories(dir);
  Rng rng(5);
  Tensor<float> t(Shape{4, 3});
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1, 1));
  std::string path = (dir / "t.bin").string();
  save_tensor(path, t);
  Tensor<float> back = load_tensor<float>(path);
  REQUIRE(back.shape == t.shape);
  REQUIRE(std::memcmp(back.data.data(), t.data.data(), t.data.size() * sizeof(float)) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint container round-trips") {
  Checkpoint ck;
  ck.config_text = "alpha = 1\n";
  ck.epoch = 9;
  ck.opt_step = 1234567;
  ck.rng_state = "somestate 42 17";
  Rng rng(13);
  Tensor<float> w(Shape{2, 3});
  for (auto& v : w.data) v = static_cast<float>(rng.uniform(-1, 1));
  ck.tensors.emplace_back("layer.w", w);
  std::string enc = encode_checkpoint(ck);
  Checkpoint back = decode_checkpoint(enc, "buffer");
  REQUIRE(back.config_text == ck.config_text);
  REQUIRE(back.epoch == 9);
  REQUIRE(back.opt_step == 1234567);
  REQUIRE(back.rng_state == ck.rng_state);
  REQUIRE(back.tensors.size() == 1);
  REQUIRE(back.tensors[0].first == "layer.w");
  REQUIRE(encode_checkpoint(back) == enc);
  REQUIRE(back.find("layer.w") != nullptr);
  REQUIRE(back.find("missing") == nullptr);
}

TEST_CASE("matmul matches hand result and naive oracle") {
  Tape<T> tape;
  Var<T> a = tape.constant(Tensor<T>({2, 2}, {1, 2, 3, 4}));
  Var<T> b = tape.constant(Tensor<T>({2, 2}, {5, 6, 7, 8}));
  Var<T> c = matmul(a, b);
  REQUIRE(c.value().data == std::vector<T>{19, 22, 43, 50});

  // blocked kernel against a naive loop on sizes that straddle the k block
  Rng rng(21);
  for (auto [m, k, n] : std::vector<std::array<int64_t, 3>>{{1, 1, 1}, {3, 65, 2}, {5, 64, 7}, {2, 130, 3}}) {
    Tensor<T> x = filled({m, k}, rng), y = filled({k, n}, rng);
    Tape<T> t2;
    Tensor<T> got = matmul(t2.constant(x), t2.constant(y)).value();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        T acc = 0;
        for (int64_t p = 0; p < k; ++p) acc += x.at2(i, p) * y.at2(p, j);
        REQUIRE_THAT(got.at2(i, j), Catch::Matchers::WithinRel(acc, 1e-12));
      }
  }
  REQUIRE_THROWS_AS(matmul(tape.constant(Tensor<T>({2, 3})), tape.constant(Tensor<T>({2, 3}))),
                    std::invalid_argument);
}

TEST_CASE("elementwise forward values") {
  Tape<T> tape;
  Var<T> x = tape.constant(Tensor<T>({4}, {-2, -0.5, 0, 1.5}));
  REQUIRE(relu(x).value().data == std::vector<T>{0, 0, 0, 1.5});
  REQUIRE(abs_val(x).value().data == std::vector<T>{2, 0.5, 0, 1.5});
  REQUIRE(sigmoid(tape.constant(Tensor<T>::scalar(0))).value().data[0] == 0.5);
  REQUIRE(tanh_val(tape.constant(Tensor<T>::scalar(0))).value().data[0] == 0.0);
  REQUIRE(clamp(x, -1.0, 1.0).value().data == std::vector<T>{-1, -0.5, 0, 1});
  REQUIRE(add_scalar(x, 2.0).value().data == std::vector<T>{0, 1.5, 2, 3.5});
  REQUIRE(scale(x, -2.0).value().data == std::vector<T>{4, 1, 0, -3});
  REQUIRE_THROWS_AS(log_val(x), std::invalid_argument);

  Var<T> row = tape.constant(Tensor<T>({1, 2}, {0.0, std::log(2.0)}));
  Tensor<T> sm = softmax_rows(row).value();
  REQUIRE_THAT(sm.data[0], Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
  REQUIRE_THAT(sm.data[1], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
}

TEST_CASE("reductions and reshapes") {
  Tape<T> tape;
  Var<T> x = tape.constant(Tensor<T>({2, 3}, {1, 2, 3, 4, 5, 6}));
  REQUIRE(sum_all(x).value().data[0] == 21);
  REQUIRE(mean_all(x).value().data[0] == 3.5);
  REQUIRE(sum_axis(x, 0).value().data == std::vector<T>{5, 7, 9});
  REQUIRE(sum_axis(x, 1).value().data == std::vector<T>{6, 15});
  REQUIRE(reshape(x, {3, 2}).value().shape == Shape{3, 2});
  REQUIRE(transpose_last2(x).value().data == std::vector<T>{1, 4, 2, 5, 3, 6});
  Var<T> y = tape.constant(Tensor<T>({1, 3}, {7, 8, 9}));
  REQUIRE(concat(x, y).value().data == std::vector<T>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Var<T> g = global_avg_pool(tape.constant(Tensor<T>({2, 1, 2}, {1, 3, 10, 20})));
  REQUIRE(g.value().data == std::vector<T>{2, 15});
}

TEST_CASE("bilinear upsample frozen values") {
  Tape<T> tape;
  Var<T> x = tape.constant(Tensor<T>({1, 2, 2}, {1, 2, 3, 4}));
  Tensor<T> up = upsample_bilinear(x, 4, 4).value();
  REQUIRE(up.shape == Shape{1, 4, 4});
  // half-pixel centers with edge clamp
  REQUIRE(up.at3(0, 0, 0) == 1.0);
  REQUIRE(up.at3(0, 3, 3) == 4.0);
  REQUIRE_THAT(up.at3(0, 1, 1), Catch::Matchers::WithinAbs(1.75, 1e-12));
  REQUIRE_THAT(up.at3(0, 2, 1), Catch::Matchers::WithinAbs(2.75, 1e-12));
  REQUIRE_THAT(up.at3(0, 0, 2), Catch::Matchers::WithinAbs(1.75, 1e-12));
}

TEST_CASE("masked softmax zeroes masked columns and renormalizes") {
  Tape<T> tape;
  Var<T> logits = tape.constant(Tensor<T>({2, 3}, {0.0, std::log(2.0), 100.0, 5.0, 5.0, 5.0}));
  std::vector<uint8_t> mask{1, 1, 0};
  Tensor<T> sm = masked_softmax(logits, mask).value();
  REQUIRE_THAT(sm.at2(0, 0), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
  REQUIRE_THAT(sm.at2(0, 1), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
  REQUIRE(sm.at2(0, 2) == 0.0);
  REQUIRE(sm.at2(1, 2) == 0.0);
  REQUIRE_THAT(sm.at2(1, 0) + sm.at2(1, 1), Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THROWS_AS(masked_softmax(logits, std::vector<uint8_t>{0, 0, 0}), std::invalid_argument);
  REQUIRE_THROWS_AS(masked_softmax(logits, std::vector<uint8_t>{1, 1}), std::invalid_argument);
}

TEST_CASE("backward requires scalar output") {
  Tape<T> tape;
  Var<T> x = tape.leaf(Tensor<T>({2}, {1, 2}), true);
  REQUIRE_THROWS_AS(tape.backward(scale(x, 2.0)), std::invalid_argument);
}

TEST_CASE("graph replay is bit deterministic") {
  Rng rng(31);
  Tensor<T> a = filled({3, 4}, rng), b = filled({4, 2}, rng);
  auto build = [&](Tape<T>& t) {
    return sum_all(sigmoid(matmul(t.leaf(a, true), t.leaf(b, true))));
  };
  Tape<T> t1, t2;
  Var<T> o1 = build(t1), o2 = build(t2);
  REQUIRE(std::memcmp(o1.value().data.data(), o2.value().data.data(), sizeof(T)) == 0);
  t1.backward(o1);
  t2.backward(o2);
  for (size_t i = 0; i < t1.trainable_leaf_ids().size(); ++i) {
    const Tensor<T>& g1 = t1.grad(t1.trainable_leaf_ids()[i]);
    const Tensor<T>& g2 = t2.grad(t2.trainable_leaf_ids()[i]);
    REQUIRE(std::memcmp(g1.data.data(), g2.data.data(), g1.data.size() * sizeof(T)) == 0);
  }
}

TEST_CASE("perturbation shifts exactly one leaf element") {
  Rng rng(37);
  Tensor<T> a = filled({2, 2}, rng);
  Tape<T> base, nudged;
  nudged.set_perturbation({0, 3, 0.25});
  Var<T> vb = base.leaf(a, true);
  Var<T> vn = nudged.leaf(a, true);
  for (int64_t i = 0; i < 4; ++i) {
    double expect = a.data[static_cast<size_t>(i)] + (i == 3 ? 0.25 : 0.0);
    REQUIRE(vn.value().data[static_cast<size_t>(i)] == expect);
  }
  REQUIRE(vb.value().data == a.data);
}

TEST_CASE("finite checks catch poisoned values") {
  Tape<T> tape;
  tape.check_finite = true;
  Var<T> x = tape.constant(Tensor<T>({2}, {1e308, 1e308}));
  REQUIRE_THROWS_AS(add(x, x), std::runtime_error);
}

TEST_CASE("gradients: arithmetic and activations") {
  Rng rng(101);
  Tensor<T> a = filled({3, 4}, rng), b = filled({3, 4}, rng, 0.5, 2.0);
  check_grads("add", [&](Tape<T>& t) { return sum_all(add(t.leaf(a, true), t.leaf(b, true))); });
  check_grads("sub", [&](Tape<T>& t) { return sum_all(sub(t.leaf(a, true), t.leaf(b, true))); });
  check_grads("mul", [&](Tape<T>& t) { return sum_all(mul(t.leaf(a, true), t.leaf(b, true))); });
  check_grads("div", [&](Tape<T>& t) { return sum_all(div(t.leaf(a, true), t.leaf(b, true))); });
  check_grads("scale.addscalar",
              [&](Tape<T>& t) { return sum_all(add_scalar(scale(t.leaf(a, true), -1.7), 0.3)); });
  // keep probes away from the relu and abs kinks
  Tensor<T> away = a;
  for (auto& v : away.data) v = v < 0 ? v - 0.1 : v + 0.1;
  check_grads("relu", [&](Tape<T>& t) { return sum_all(relu(t.leaf(away, true))); });
  check_grads("abs", [&](Tape<T>& t) { return sum_all(abs_val(t.leaf(away, true))); });
  check_grads("sigmoid.tanh", [&](Tape<T>& t) {
    return sum_all(mul(sigmoid(t.leaf(a, true)), tanh_val(t.leaf(b, true))));
  });
  check_grads("log", [&](Tape<T>& t) { return sum_all(log_val(t.leaf(b, true))); });
  Tensor<T> inside = filled({3, 3}, rng, -0.8, 0.8);
  check_grads("clamp", [&](Tape<T>& t) { return sum_all(clamp(t.leaf(inside, true), -0.9, 0.9)); });
}

TEST_CASE("gradients: linear algebra and shape ops") {
  Rng rng(102);
  Tensor<T> a = filled({3, 4}, rng), m = filled({4, 5}, rng);
  Tensor<T> w = filled({5, 4}, rng), bias = filled({5}, rng);
  check_grads("matmul", [&](Tape<T>& t) { return sum_all(matmul(t.leaf(a, true), t.leaf(m, true))); });
  check_grads("linear", [&](Tape<T>& t) {
    return sum_all(linear(t.leaf(a, true), t.leaf(w, true), t.leaf(bias, true)));
  });
  Tensor<T> x1 = filled({4}, rng);
  check_grads("linear.vec", [&](Tape<T>& t) {
    return sum_all(linear(t.leaf(x1, true), t.leaf(w, true), t.leaf(bias, true)));
  });
  check_grads("reshape.transpose", [&](Tape<T>& t) {
    return sum_all(mul(transpose_last2(reshape(t.leaf(a, true), {4, 3})), t.leaf(a, true)));
  });
  Tensor<T> c1 = filled({2, 3}, rng), c2 = filled({4, 3}, rng);
  check_grads("concat", [&](Tape<T>& t) {
    Var<T> cc = concat(std::vector<Var<T>>{t.leaf(c1, true), t.leaf(c2, true)});
    return sum_all(mul(cc, cc));
  });
  check_grads("sum.axis", [&](Tape<T>& t) {
    Var<T> x = t.leaf(a, true);
    return sum_all(mul(sum_axis(x, 0), sum_axis(x, 0)));
  });
  check_grads("mean", [&](Tape<T>& t) { return mean_all(mul(t.leaf(a, true), t.leaf(a, true))); });
}

TEST_CASE("gradients: conv pool resize attention") {
  Rng rng(103);
  Tensor<T> img = filled({2, 4, 4}, rng);
  Tensor<T> w = filled({3, 2, 3, 3}, rng), b = filled({3}, rng);
  check_grads("conv3x3.s1", [&](Tape<T>& t) {
    return sum_all(conv3x3(t.leaf(img, true), t.leaf(w, true), t.leaf(b, true), 1));
  });
  check_grads("conv3x3.s2", [&](Tape<T>& t) {
    return sum_all(conv3x3(t.leaf(img, true), t.leaf(w, true), t.leaf(b, true), 2));
  });
  check_grads("gap", [&](Tape<T>& t) {
    Var<T> g = global_avg_pool(t.leaf(img, true));
    return sum_all(mul(g, g));
  });
  check_grads("upsample", [&](Tape<T>& t) {
    Var<T> u = upsample_bilinear(t.leaf(img, true), 7, 5);
    return sum_all(mul(u, u));
  });
  Tensor<T> logits = filled({3, 4}, rng);
  Tensor<T> vals = filled({3, 4}, rng);
  std::vector<uint8_t> mask{1, 1, 1, 0};
  check_grads("masked.softmax", [&](Tape<T>& t) {
    return sum_all(mul(masked_softmax(t.leaf(logits, true), mask), t.leaf(vals, true)));
  });
  check_grads("softmax.rows", [&](Tape<T>& t) {
    return sum_all(mul(softmax_rows(t.leaf(logits, true)), t.leaf(vals, true)));
  });
  Tensor<T> chan = filled({2}, rng);
  check_grads("channel.scale", [&](Tape<T>& t) {
    Var<T> s = channel_scale(t.leaf(img, true), t.leaf(chan, true));
    return sum_all(mul(s, s));
  });
}

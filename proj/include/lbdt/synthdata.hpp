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

#ifndef LBDT_SYNTHDATA_HPP
#define LBDT_SYNTHDATA_HPP

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lbdt/encoders.hpp"
#include "lbdt/rng.hpp"
#include "lbdt/serialize.hpp"
#include "lbdt/tensor.hpp"

namespace lbdt {

namespace synth {

inline const std::vector<std::string> kColors = {"red", "green", "blue", "yellow", "brown", "white"};
inline const std::vector<std::string> kShapes = {"square", "circle", "triangle"};
inline const std::vector<std::string> kMotions = {"moving-left", "moving-right", "moving-up",
                                                  "moving-down", "jumping", "standing"};

inline const double kColorRgb[6][3] = {
    {0.85, 0.10, 0.10},  // red
    {0.10, 0.75, 0.10},  // green
    {0.15, 0.15, 0.90},  // blue
    {0.90, 0.85, 0.10},  // yellow
    {0.55, 0.35, 0.15},  // brown
    {0.95, 0.95, 0.95},  // white
};

constexpr int kStanding = 5;
constexpr int kJumping = 4;

inline std::vector<std::string> vocabulary_tokens() {
  std::vector<std::string> v = {"<pad>", "<unk>"};
  v.insert(v.end(), kColors.begin(), kColors.end());
  v.insert(v.end(), kShapes.begin(), kShapes.end());
  v.insert(v.end(), kMotions.begin(), kMotions.end());
  return v;
}

}  // namespace synth

struct SceneObject {
  int color = 0, shape = 0, motion = 0;
  int size = 14;         // side / diameter in pixels
  int speed = 1;         // pixels per frame
  int x0 = 0, y0 = 0;    // bounding-box top-left at frame 0
  double rgb[3] = {0, 0, 0};  // jittered fill, constant across frames
};

// Full description of one tiny video: everything generate() needs,
// reproducible from the seed alone.
struct SceneSpec {
  uint64_t seed = 0;
  int64_t h = 64, w = 64;
  int frames = 7;  // delta + 1; frame 0 is the reference, the last is the target
  std::vector<SceneObject> objects;
  int referred = 0;
};

struct SampleData {
  Tensor<float> target, reference;  // 3 x h x w, values in [0, 1]
  Tensor<float> mask;               // 1 x h x w, referred footprint in the target frame
  Tensor<float> ref_mask;           // 1 x h x w, referred footprint in the reference frame
  std::string expression;
  int color = 0, shape = 0, motion = 0;
  int referred_id = 0;
};

namespace synth {

// Bounding-box top-left of an object at frame f. Jumping follows a period-4
// triangle wave of vertical offsets (0, v, 2v, v).
inline std::pair<int, int> position_at(const SceneObject& o, int f) {
  int x = o.x0, y = o.y0;
  switch (o.motion) {
    case 0: x -= o.speed * f; break;   // moving-left
    case 1: x += o.speed * f; break;   // moving-right
    case 2: y -= o.speed * f; break;   // moving-up
    case 3: y += o.speed * f; break;   // moving-down
    case kJumping: {
      static const int tri[4] = {0, 1, 2, 1};
      y -= o.speed * tri[f % 4];
      break;
    }
    case kStanding: break;
  }
  return {x, y};
}

// Swept bounding box over frames [0, frames).
inline void sweep_box(const SceneObject& o, int frames, int& x_lo, int& y_lo, int& x_hi, int& y_hi) {
  x_lo = y_lo = 1 << 30;
  x_hi = y_hi = -(1 << 30);
  for (int f = 0; f < frames; ++f) {
    auto [x, y] = position_at(o, f);
    x_lo = std::min(x_lo, x);
    y_lo = std::min(y_lo, y);
    x_hi = std::max(x_hi, x + o.size);
    y_hi = std::max(y_hi, y + o.size);
  }
}

inline bool inside_shape(const SceneObject& o, int row, int col) {
  int s = o.size;
  switch (o.shape) {
    case 0:  // square
      return true;
    case 1: {  // circle
      double c = (s - 1) * 0.5;
      double dy = row - c, dx = col - c;
      return dy * dy + dx * dx <= 0.25 * s * s;
    }
    case 2: {  // triangle, apex up, base = bottom row
      int span = row + 1;
      int left = (s - span) / 2;
      return col >= left && col < left + span;
    }
  }
  return false;
}

inline void rasterize(const SceneObject& o, int f, int64_t h, int64_t w, Tensor<float>* mask,
                      Tensor<float>* image) {
  auto [x, y] = position_at(o, f);
  for (int r = 0; r < o.size; ++r) {
    int64_t py = y + r;
    if (py < 0 || py >= h) continue;
    for (int c = 0; c < o.size; ++c) {
      int64_t px = x + c;
      if (px < 0 || px >= w) continue;
      if (!inside_shape(o, r, c)) continue;
      if (mask) mask->at3(0, py, px) = 1.0f;
      if (image)
        for (int ch = 0; ch < 3; ++ch)
          image->at3(ch, py, px) = static_cast<float>(o.rgb[ch]);
    }
  }
}

inline int opposite_motion(int motion) {
  switch (motion) {
    case 0: return 1;
    case 1: return 0;
    case 2: return 3;
    case 3: return 2;
  }
  return motion;
}

}  // namespace synth

// Draws a scene layout: a referred object, one critical distractor that
// shares appearance or motion with it (so the expression cannot be resolved
// from a single cue), and up to two free extras. No two objects share
// (color, shape, motion); swept boxes stay disjoint and inside the canvas.
inline SceneSpec sample_scene(uint64_t dataset_seed, uint64_t index, int64_t h, int64_t w, int delta) {
  if (delta < 1) throw std::invalid_argument("sample_scene: delta must be >= 1");
  SceneSpec spec;
  spec.seed = derive_seed(dataset_seed, index);
  spec.h = h;
  spec.w = w;
  spec.frames = delta + 1;
  Rng rng(derive_seed(spec.seed, 0x5cee));

  auto draw_attrs = [&rng](SceneObject& o) {
    o.color = static_cast<int>(rng.pick(synth::kColors.size()));
    o.shape = static_cast<int>(rng.pick(synth::kShapes.size()));
    o.motion = static_cast<int>(rng.pick(synth::kMotions.size()));
  };

  // Scene kinds: 0 = opposite-direction twin, 1 = moving/standing twin,
  // 2 = same-motion color twin, 3 = free.
  double mode_draw = rng.uniform();
  int mode = mode_draw < 0.30 ? 0 : (mode_draw < 0.50 ? 1 : (mode_draw < 0.80 ? 2 : 3));

  SceneObject referred, critical;
  draw_attrs(referred);
  draw_attrs(critical);
  switch (mode) {
    case 0:
      referred.motion = static_cast<int>(rng.pick(4));  // axis motions only
      critical.color = referred.color;
      critical.shape = referred.shape;
      critical.motion = synth::opposite_motion(referred.motion);
      break;
    case 1: {
      bool referred_stands = rng.uniform() < 0.5;
      critical.color = referred.color;
      critical.shape = referred.shape;
      if (referred_stands) {
        referred.motion = synth::kStanding;
        critical.motion = static_cast<int>(rng.pick(5));  // any moving kind
      } else {
        referred.motion = static_cast<int>(rng.pick(5));
        critical.motion = synth::kStanding;
      }
      break;
    }
    case 2:
      critical.shape = referred.shape;
      critical.motion = referred.motion;
      while (critical.color == referred.color)
        critical.color = static_cast<int>(rng.pick(synth::kColors.size()));
      break;
    case 3:
      critical.shape = referred.shape;
      while (critical.color == referred.color)
        critical.color = static_cast<int>(rng.pick(synth::kColors.size()));
      while (critical.motion == referred.motion)
        critical.motion = static_cast<int>(rng.pick(synth::kMotions.size()));
      break;
  }

  std::vector<SceneObject> objects = {referred, critical};
  double extra_draw = rng.uniform();
  int extras = extra_draw < 0.5 ? 0 : (extra_draw < 0.85 ? 1 : 2);
  for (int e = 0; e < extras; ++e) {
    SceneObject o;
    bool unique = false;
    for (int attempt = 0; attempt < 50 && !unique; ++attempt) {
      draw_attrs(o);
      unique = true;
      for (const auto& other : objects)
        if (other.color == o.color && other.shape == o.shape && other.motion == o.motion)
          unique = false;
    }
    if (unique) objects.push_back(o);
  }

  // Geometry: sizes and speeds first, then rejection-sampled placement with
  // disjoint swept boxes. On sustained failure shrink, then drop extras.
  for (auto& o : objects) {
    o.size = static_cast<int>(rng.uniform_int(14, 22));
    o.speed = static_cast<int>(rng.uniform_int(1, 2));
  }
  auto try_place = [&](std::vector<SceneObject>& placed, SceneObject& o) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      o.x0 = static_cast<int>(rng.uniform_int(1, static_cast<int64_t>(w) - o.size - 1));
      o.y0 = static_cast<int>(rng.uniform_int(1, static_cast<int64_t>(h) - o.size - 1));
      int xl, yl, xh, yh;
      synth::sweep_box(o, spec.frames, xl, yl, xh, yh);
      if (xl < 1 || yl < 1 || xh > w - 1 || yh > h - 1) continue;
      bool clear = true;
      for (const auto& other : placed) {
        int oxl, oyl, oxh, oyh;
        synth::sweep_box(other, spec.frames, oxl, oyl, oxh, oyh);
        if (xl < oxh + 2 && oxl < xh + 2 && yl < oyh + 2 && oyl < yh + 2) {
          clear = false;
          break;
        }
      }
      if (clear) return true;
    }
    return false;
  };
  std::vector<SceneObject> placed;
  for (size_t i = 0; i < objects.size(); ++i) {
    SceneObject o = objects[i];
    bool ok = false;
    while (!ok) {
      ok = try_place(placed, o);
      if (!ok && o.size > 10) {
        --o.size;
        continue;
      }
      if (!ok) break;
    }
    if (ok) {
      placed.push_back(o);
    } else if (i < 2) {
      throw std::runtime_error("sample_scene: cannot place required objects");
    }
  }
  spec.objects = placed;
  spec.referred = 0;
  return spec;
}

// Pure render: background gray 0.5 with uniform noise of standard deviation
// 0.02 redrawn per frame, objects filled with their jittered color (fixed
// across frames). Only the reference and target frames are materialized.
inline SampleData generate(const SceneSpec& spec) {
  if (spec.objects.empty()) throw std::invalid_argument("generate: scene has no objects");
  if (spec.referred < 0 || spec.referred >= static_cast<int>(spec.objects.size()))
    throw std::invalid_argument("generate: referred index out of range");
  SceneSpec scene = spec;  // local copy so jitter can be applied
  Rng rng(derive_seed(scene.seed, 0xA11D));
  const double jitter = 0.05;
  const double noise_half = 0.02 * std::sqrt(3.0);  // uniform half-width for stddev 0.02
  for (auto& o : scene.objects)
    for (int ch = 0; ch < 3; ++ch) {
      double v = synth::kColorRgb[o.color][ch] + rng.uniform(-jitter, jitter);
      o.rgb[ch] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }

  SampleData out;
  auto render = [&](int frame, Tensor<float>& image) {
    image = Tensor<float>({3, scene.h, scene.w});
    for (auto& v : image.data) v = static_cast<float>(0.5 + rng.uniform(-noise_half, noise_half));
    for (const auto& o : scene.objects) synth::rasterize(o, frame, scene.h, scene.w, nullptr, &image);
  };
  render(0, out.reference);
  render(scene.frames - 1, out.target);
  out.mask = Tensor<float>({1, scene.h, scene.w});
  out.ref_mask = Tensor<float>({1, scene.h, scene.w});
  const SceneObject& ref = scene.objects[static_cast<size_t>(scene.referred)];
  synth::rasterize(ref, scene.frames - 1, scene.h, scene.w, &out.mask, nullptr);
  synth::rasterize(ref, 0, scene.h, scene.w, &out.ref_mask, nullptr);
  out.color = ref.color;
  out.shape = ref.shape;
  out.motion = ref.motion;
  out.referred_id = scene.referred;
  out.expression = synth::kColors[static_cast<size_t>(ref.color)] + " " +
                   synth::kShapes[static_cast<size_t>(ref.shape)] + " " +
                   synth::kMotions[static_cast<size_t>(ref.motion)];
  return out;
}

// Writes samples index 0..count-1 into out_dir/train (first 80% by index)
// and out_dir/val (the rest), one manifest per split, plus the frozen
// vocabulary at out_dir/vocab.txt.
inline void build_split(int64_t count, uint64_t seed, int delta, int64_t h, int64_t w,
                        const std::string& out_dir) {
  if (count < 1) throw std::invalid_argument("build_split: count must be >= 1");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir + "/train");
  fs::create_directories(out_dir + "/val");
  Vocabulary vocab(synth::vocabulary_tokens());
  vocab.save(out_dir + "/vocab.txt");
  int64_t train_count = count * 8 / 10;
  if (train_count == 0) train_count = count;  // degenerate tiny sets stay in train
  std::ofstream train_manifest(out_dir + "/train/manifest.tsv", std::ios::trunc);
  std::ofstream val_manifest(out_dir + "/val/manifest.tsv", std::ios::trunc);
  if (!train_manifest || !val_manifest)
    throw std::runtime_error("build_split: cannot write manifests under " + out_dir);
  for (int64_t i = 0; i < count; ++i) {
    SceneSpec spec = sample_scene(seed, static_cast<uint64_t>(i), h, w, delta);
    SampleData sample = generate(spec);
    bool is_train = i < train_count;
    std::string split_dir = out_dir + (is_train ? "/train/" : "/val/");
    char stem[16];
    std::snprintf(stem, sizeof(stem), "s%05lld", static_cast<long long>(i));
    save_tensor(split_dir + stem + ".target.bin", sample.target);
    save_tensor(split_dir + stem + ".ref.bin", sample.reference);
    save_tensor(split_dir + stem + ".mask.bin", sample.mask);
    save_tensor(split_dir + stem + ".refmask.bin", sample.ref_mask);
    std::ofstream& manifest = is_train ? train_manifest : val_manifest;
    manifest << stem << "\t" << sample.expression << "\t"
             << synth::kColors[static_cast<size_t>(sample.color)] << "\t"
             << synth::kShapes[static_cast<size_t>(sample.shape)] << "\t"
             << synth::kMotions[static_cast<size_t>(sample.motion)] << "\t" << sample.referred_id
             << "\n";
  }
  if (!train_manifest || !val_manifest)
    throw std::runtime_error("build_split: short manifest write under " + out_dir);
}

}  // namespace lbdt

#endif  // LBDT_SYNTHDATA_HPP

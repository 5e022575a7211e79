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

#ifndef LBDT_TRAIN_HPP
#define LBDT_TRAIN_HPP

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "lbdt/config.hpp"
#include "lbdt/losses.hpp"
#include "lbdt/metrics.hpp"
#include "lbdt/model.hpp"
#include "lbdt/synthdata.hpp"

namespace lbdt {

struct LoadedSample {
  std::string stem, expression, motion_word;
  bool moving = false;
  ModelInput<float> input;
  Tensor<float> mask, ref_mask;
};

// Reads a split directory produced by build_split: manifest order defines
// iteration order, so downstream results are reproducible.
inline std::vector<LoadedSample> load_split(const std::string& split_dir, const Vocabulary& vocab,
                                            int n_words) {
  std::ifstream manifest(split_dir + "/manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot open manifest: " + split_dir + "/manifest.tsv");
  std::vector<LoadedSample> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 6)
      throw std::runtime_error("manifest line with " + std::to_string(cols.size()) +
                               " columns in " + split_dir);
    LoadedSample s;
    s.stem = cols[0];
    s.expression = cols[1];
    s.motion_word = cols[4];
    s.moving = s.motion_word != "standing";
    s.input.target = load_tensor<float>(split_dir + "/" + s.stem + ".target.bin");
    s.input.reference = load_tensor<float>(split_dir + "/" + s.stem + ".ref.bin");
    s.input.tokens = vocab.encode(s.expression, n_words);
    s.mask = load_tensor<float>(split_dir + "/" + s.stem + ".mask.bin");
    s.ref_mask = load_tensor<float>(split_dir + "/" + s.stem + ".refmask.bin");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("empty split: " + split_dir);
  return out;
}

// Base rate until halving starts, then halved once per period.
inline double lr_at_epoch(double base, int epoch_1based, int halve_start, int halve_period) {
  if (epoch_1based < halve_start || halve_period < 1) return base;
  int halvings = (epoch_1based - halve_start) / halve_period + 1;
  return base / static_cast<double>(int64_t{1} << halvings);
}

namespace traindetail {

// One Adam update over every parameter. Moments are allocated lazily so a
// never-trained model exports value tensors only.
template <typename T>
void adam_step(ParamStore<T>& store, const std::vector<std::vector<T>>& grads, double lr,
               uint64_t step) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
  double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (size_t i = 0; i < store.size(); ++i) {
    Param<T>& p = store.at(static_cast<int>(i));
    const std::vector<T>& g = grads[i];
    if (p.adam_m.data.empty()) {
      p.adam_m = Tensor<T>(p.value.shape);
      p.adam_v = Tensor<T>(p.value.shape);
    }
    for (size_t k = 0; k < g.size(); ++k) {
      double gv = static_cast<double>(g[k]);
      double m = b1 * static_cast<double>(p.adam_m.data[k]) + (1.0 - b1) * gv;
      double v = b2 * static_cast<double>(p.adam_v.data[k]) + (1.0 - b2) * gv * gv;
      p.adam_m.data[k] = static_cast<T>(m);
      p.adam_v.data[k] = static_cast<T>(v);
      double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
      p.value.data[k] = static_cast<T>(static_cast<double>(p.value.data[k]) - update);
    }
  }
}

inline BinaryMask mask_from_tensor(const Tensor<float>& t) {
  BinaryMask m(t.shape[t.rank() - 2], t.shape[t.rank() - 1]);
  for (size_t i = 0; i < m.on.size(); ++i) m.on[i] = t.data[i] > 0.5f ? 1 : 0;
  return m;
}

}  // namespace traindetail

template <typename T>
EvalReport evaluate_model(Model<T>& model, const std::vector<LoadedSample>& samples,
                          std::vector<double>* per_sample_iou = nullptr) {
  std::vector<BinaryMask> preds, gts;
  preds.reserve(samples.size());
  gts.reserve(samples.size());
  for (const auto& s : samples) {
    Tape<T> tape;
    Binder<T> bind(tape, model.params(), /*trainable=*/false);
    ModelInput<T> in{s.input.target.template cast<T>(), s.input.reference.template cast<T>(),
                     s.input.tokens};
    Var<T> pred = model.forward(bind, in);
    preds.push_back(threshold_mask(pred.value()));
    gts.push_back(traindetail::mask_from_tensor(s.mask));
  }
  if (per_sample_iou) {
    per_sample_iou->clear();
    for (size_t i = 0; i < preds.size(); ++i)
      per_sample_iou->push_back(metric_detail::pair_iou(preds[i], gts[i]));
  }
  return evaluate_masks(preds, gts);
}

inline void save_model_checkpoint(const Model<float>& model, const RunConfig& cfg, uint32_t epoch,
                                  uint64_t opt_step, const std::string& rng_state,
                                  const std::string& path) {
  Checkpoint ck;
  ck.config_text = serialize_config(cfg);
  ck.epoch = epoch;
  ck.opt_step = opt_step;
  ck.rng_state = rng_state;
  model.export_weights(ck);
  save_checkpoint(path, ck);
}

struct LoadedModel {
  RunConfig cfg;
  std::shared_ptr<Model<float>> model;
  uint32_t epoch = 0;
  uint64_t opt_step = 0;
  std::string rng_state;
};

// Rebuilds a model from a checkpoint: config text drives construction, the
// seed only shapes initial weights which are then overwritten.
inline LoadedModel load_model_checkpoint(const std::string& path, int64_t vocab_size) {
  Checkpoint ck = load_checkpoint(path);
  LoadedModel out;
  parse_config_text(ck.config_text, out.cfg);
  out.model = std::make_shared<Model<float>>(out.cfg.model_config(vocab_size), out.cfg.seed);
  out.model->import_weights(ck);
  out.epoch = ck.epoch;
  out.opt_step = ck.opt_step;
  out.rng_state = ck.rng_state;
  return out;
}

struct EpochLog {
  int epoch = 0;
  double loss = 0, lr = 0;
  bool has_val = false;
  EvalReport val;
};

struct TrainResult {
  std::shared_ptr<Model<float>> model;
  std::vector<EpochLog> history;
  EvalReport final_val;
  double best_mean_iou = 0;
  int best_epoch = 0;
  double seconds = 0;
};

struct TrainOptions {
  bool eval_each_epoch = true;
  bool save_checkpoints = true;
  bool write_log = true;
  std::ostream* progress = nullptr;
};

// Full training loop: per-sample tapes, gradients averaged over the batch,
// Adam with bias correction, optional per-epoch validation. Deterministic
// for a fixed config and dataset.
inline TrainResult train_model(const RunConfig& cfg, const TrainOptions& opt = {}) {
  auto t_start = std::chrono::steady_clock::now();
  Vocabulary vocab = Vocabulary::from_file(cfg.dataset_dir + "/vocab.txt");
  std::vector<LoadedSample> train = load_split(cfg.dataset_dir + "/train", vocab, cfg.max_words);
  std::vector<LoadedSample> val;
  if (std::filesystem::exists(cfg.dataset_dir + "/val/manifest.tsv"))
    val = load_split(cfg.dataset_dir + "/val", vocab, cfg.max_words);

  TrainResult result;
  result.model = std::make_shared<Model<float>>(cfg.model_config(vocab.size()), cfg.seed);
  Model<float>& model = *result.model;
  ParamStore<float>& params = model.params();
  Rng shuffle_rng(derive_seed(cfg.seed, 0x0BA7C4));

  std::ofstream log;
  if (opt.write_log) {
    std::filesystem::create_directories(cfg.out_dir);
    log.open(cfg.out_dir + "/train_log.ndjson", std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write log under " + cfg.out_dir);
  }

  std::vector<std::vector<float>> grads(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    grads[i].resize(params.at(static_cast<int>(i)).value.data.size());

  uint64_t opt_step = 0;
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double lr = lr_at_epoch(cfg.learning_rate, epoch, cfg.lr_halve_start, cfg.lr_halve_period);
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    size_t n_batches = (train.size() + static_cast<size_t>(cfg.batch_size) - 1) /
                       static_cast<size_t>(cfg.batch_size);
    for (size_t b = 0; b < n_batches; ++b) {
      size_t lo = b * static_cast<size_t>(cfg.batch_size);
      size_t hi = std::min(train.size(), lo + static_cast<size_t>(cfg.batch_size));
      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
      for (size_t k = lo; k < hi; ++k) {
        const LoadedSample& s = train[order[k]];
        Tape<float> tape;
        Binder<float> bind(tape, params, /*trainable=*/true);
        Var<float> pred = model.forward(bind, s.input);
        Var<float> loss = training_loss(pred, s.mask);
        double lv = static_cast<double>(loss.value().data[0]);
        if (!std::isfinite(lv))
          throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + " batch " + std::to_string(b));
        loss_sum += lv;
        tape.backward(scale(loss, 1.0f / static_cast<float>(hi - lo)));
        for (size_t i = 0; i < params.size(); ++i) {
          int vid = bind.var_of(static_cast<int>(i));
          if (vid < 0) continue;
          const Tensor<float>& g = tape.grad(vid);
          float* acc = grads[i].data();
          for (size_t e = 0; e < g.data.size(); ++e) acc[e] += g.data[e];
        }
      }
      ++opt_step;
      traindetail::adam_step(params, grads, lr, opt_step);
    }

    EpochLog el;
    el.epoch = epoch;
    el.loss = loss_sum / static_cast<double>(train.size());
    el.lr = lr;
    if (opt.eval_each_epoch && !val.empty()) {
      el.val = evaluate_model(model, val);
      el.has_val = true;
      if (el.val.mean_iou > result.best_mean_iou) {
        result.best_mean_iou = el.val.mean_iou;
        result.best_epoch = epoch;
        if (opt.save_checkpoints)
          save_model_checkpoint(model, cfg, static_cast<uint32_t>(epoch), opt_step,
                                shuffle_rng.save_state(), cfg.out_dir + "/best.ckpt");
      }
    }
    result.history.push_back(el);
    if (opt.write_log) {
      log << "{\"epoch\":" << epoch << ",\"loss\":" << el.loss << ",\"lr\":" << lr;
      if (el.has_val) log << ",\"val\":" << el.val.to_json();
      log << "}\n";
      log.flush();
    }
    if (opt.progress) {
      (*opt.progress) << "epoch " << epoch << "/" << cfg.epochs << " loss " << el.loss;
      if (el.has_val) (*opt.progress) << " val_mean_iou " << el.val.mean_iou;
      (*opt.progress) << "\n";
      opt.progress->flush();
    }
  }

  if (!val.empty()) result.final_val = evaluate_model(model, val);
  if (opt.save_checkpoints) {
    std::filesystem::create_directories(cfg.out_dir);
    save_model_checkpoint(model, cfg, static_cast<uint32_t>(cfg.epochs), opt_step,
                          shuffle_rng.save_state(), cfg.out_dir + "/final.ckpt");
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

struct AttentionStat {
  std::string stem, motion_word;
  bool moving = false;
  double mass = 0;  // motion-word attention mass inside the referred footprint
};

struct AttentionAnalysis {
  std::vector<AttentionStat> per_sample;
  int moving_total = 0;
  int concentrated = 0;  // moving samples with mass > 0.5
  double fraction_concentrated = 0;
};

// Measures where the motion word looks: take its aggregation row over the
// temporal grid at the given stage and sum the weight landing inside the
// referred object's swept footprint (union of its reference- and
// target-frame masks), with partial cells weighted by coverage.
template <typename T>
AttentionAnalysis analyze_attention(Model<T>& model, const std::vector<LoadedSample>& samples,
                                    int stage, int dump_first = 0,
                                    const std::string& out_dir = "") {
  const ModelConfig& mc = model.config();
  int64_t cell = int64_t{1} << stage;
  int64_t gh = mc.h0 >> stage, gw = mc.w0 >> stage;
  if (dump_first > 0 && !out_dir.empty()) std::filesystem::create_directories(out_dir);
  AttentionAnalysis out;
  int dumped = 0;
  for (const auto& s : samples) {
    Tape<T> tape;
    Binder<T> bind(tape, model.params(), /*trainable=*/false);
    AttentionCapture<T> cap;
    ModelInput<T> in{s.input.target.template cast<T>(), s.input.reference.template cast<T>(),
                     s.input.tokens};
    model.forward(bind, in, &cap);
    const auto* entry = cap.find(stage, 1, "agg_t2s");
    if (!entry) throw std::runtime_error("no aggregation attention captured at stage " +
                                         std::to_string(stage));
    const Tensor<T>& attn = entry->weights;  // n_words x gh*gw

    AttentionStat stat;
    stat.stem = s.stem;
    stat.motion_word = s.motion_word;
    stat.moving = s.moving;
    double mass = 0;
    for (int64_t gy = 0; gy < gh; ++gy)
      for (int64_t gx = 0; gx < gw; ++gx) {
        int64_t covered = 0;
        for (int64_t y = gy * cell; y < (gy + 1) * cell; ++y)
          for (int64_t x = gx * cell; x < (gx + 1) * cell; ++x) {
            size_t px = static_cast<size_t>(y * mc.w0 + x);
            if (s.mask.data[px] > 0.5f || s.ref_mask.data[px] > 0.5f) ++covered;
          }
        double frac = static_cast<double>(covered) / static_cast<double>(cell * cell);
        mass += static_cast<double>(attn.at2(2, gy * gw + gx)) * frac;
      }
    stat.mass = mass;
    out.per_sample.push_back(stat);
    if (stat.moving) {
      ++out.moving_total;
      if (mass > 0.5) ++out.concentrated;
    }

    if (dumped < dump_first && !out_dir.empty()) {
      std::vector<std::string> words;
      std::stringstream es(s.expression);
      std::string tok;
      while (es >> tok) words.push_back(tok);
      std::vector<uint8_t> valid(words.size(), 1);
      Tensor<T> rows({static_cast<int64_t>(words.size()), gh * gw});
      for (int64_t r = 0; r < rows.shape[0]; ++r)
        for (int64_t cidx = 0; cidx < gh * gw; ++cidx) rows.at2(r, cidx) = attn.at2(r, cidx);
      dump_attention(rows, words, valid, gh, gw, out_dir + "/" + s.stem + ".attn");
      for (size_t wi = 0; wi < words.size(); ++wi) {
        Tensor<float> img({gh, gw});
        T peak = T(0);
        for (int64_t cidx = 0; cidx < gh * gw; ++cidx) peak = std::max(peak, rows.at2(static_cast<int64_t>(wi), cidx));
        for (int64_t cidx = 0; cidx < gh * gw; ++cidx)
          img.data[static_cast<size_t>(cidx)] =
              peak > T(0) ? static_cast<float>(rows.at2(static_cast<int64_t>(wi), cidx) / peak) : 0.0f;
        write_pgm(out_dir + "/" + s.stem + "." + words[wi] + ".pgm", img);
      }
      ++dumped;
    }
  }
  if (out.moving_total > 0)
    out.fraction_concentrated =
        static_cast<double>(out.concentrated) / static_cast<double>(out.moving_total);
  return out;
}

struct AblationRun {
  std::string name;
  EvalReport val;
  double final_loss = 0;
  double seconds = 0;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  double total_seconds = 0;

  std::string tsv() const {
    std::string out = "name\tmean_iou\toverall_iou\tp@0.5\tap\tj\tf\tfinal_loss\tseconds\n";
    char buf[256];
    for (const auto& r : runs) {
      std::snprintf(buf, sizeof(buf), "%s\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%.1f\n",
                    r.name.c_str(), r.val.mean_iou, r.val.overall_iou, r.val.p_at[0], r.val.ap,
                    r.val.j_mean, r.val.f_mean, r.final_loss, r.seconds);
      out += buf;
    }
    return out;
  }

  const AblationRun* find(const std::string& name) const {
    for (const auto& r : runs)
      if (r.name == name) return &r;
    return nullptr;
  }
};

// Named flag combinations: the transfer chain ablates the two duplex
// directions, the fusion chain ablates the two decoder gates.
inline std::vector<std::pair<std::string, RunConfig>> ablation_grid(const RunConfig& base,
                                                                    const std::string& grid) {
  auto with_flags = [&base](const std::string& name, bool t2s, bool s2t, bool ld, bool stc) {
    RunConfig c = base;
    c.enable_t2s = t2s;
    c.enable_s2t = s2t;
    c.enable_bca_ld = ld;
    c.enable_bca_stc = stc;
    c.out_dir = base.out_dir + "/" + name;
    return std::make_pair(name, c);
  };
  std::vector<std::pair<std::string, RunConfig>> runs;
  if (grid == "trend") {
    runs.push_back(with_flags("full", true, true, true, true));
    runs.push_back(with_flags("t2s_only", true, false, true, true));
    runs.push_back(with_flags("s2t_only", false, true, true, true));
    runs.push_back(with_flags("no_transfer", false, false, true, true));
    runs.push_back(with_flags("ld_only", true, true, true, false));
    runs.push_back(with_flags("stc_only", true, true, false, true));
    runs.push_back(with_flags("no_bca", true, true, false, false));
  } else if (grid == "component") {
    for (int m = 0; m < 16; ++m) {
      bool t2s = m & 1, s2t = m & 2, ld = m & 4, stc = m & 8;
      std::string name = std::string(t2s ? "T" : "-") + (s2t ? "S" : "-") + (ld ? "L" : "-") +
                         (stc ? "C" : "-");
      runs.push_back(with_flags(name, t2s, s2t, ld, stc));
    }
  } else if (grid == "stages") {
    const std::vector<std::vector<int>> sets = {{5}, {4}, {3}, {2}, {4, 5}, {3, 4, 5}, {2, 3, 4, 5}};
    for (const auto& set : sets) {
      RunConfig c = base;
      c.insert_stages = set;
      std::string name = "stages_" + cfgdetail::join_ints(set);
      for (auto& ch : name)
        if (ch == ',') ch = '_';
      c.out_dir = base.out_dir + "/" + name;
      runs.emplace_back(name, c);
    }
  } else if (grid == "delta") {
    for (int d = 1; d <= 7; ++d) {
      RunConfig c = base;
      c.delta = d;
      c.dataset_dir = base.dataset_dir + "-delta" + std::to_string(d);
      c.out_dir = base.out_dir + "/delta" + std::to_string(d);
      runs.emplace_back("delta" + std::to_string(d), c);
    }
  } else {
    throw std::invalid_argument("unknown ablation grid: '" + grid +
                                "' (expected trend, component, stages, or delta)");
  }
  return runs;
}

// Trains every configuration in the grid with the shared seed and collects
// held-out metrics. The delta grid generates one dataset per offset.
inline AblationResult run_ablation(const RunConfig& base, const std::string& grid,
                                   std::ostream* progress = nullptr,
                                   std::vector<TrainResult>* keep_results = nullptr) {
  auto grid_runs = ablation_grid(base, grid);
  AblationResult result;
  for (auto& [name, cfg] : grid_runs) {
    if (grid == "delta" && !std::filesystem::exists(cfg.dataset_dir + "/vocab.txt"))
      build_split(cfg.sample_count, cfg.seed, cfg.delta, cfg.height, cfg.width, cfg.dataset_dir);
    if (progress) {
      (*progress) << "[" << grid << "] training " << name << "\n";
      progress->flush();
    }
    TrainOptions opt;
    opt.eval_each_epoch = false;
    opt.save_checkpoints = true;
    opt.write_log = true;
    TrainResult tr = train_model(cfg, opt);
    AblationRun run;
    run.name = name;
    run.val = tr.final_val;
    run.final_loss = tr.history.empty() ? 0 : tr.history.back().loss;
    run.seconds = tr.seconds;
    result.total_seconds += tr.seconds;
    result.runs.push_back(run);
    if (progress) {
      (*progress) << "[" << grid << "] " << name << " mean_iou " << run.val.mean_iou << " ("
                  << run.seconds << "s)\n";
      progress->flush();
    }
    if (keep_results)
      keep_results->push_back(std::move(tr));
  }
  return result;
}

}  // namespace lbdt

#endif  // LBDT_TRAIN_HPP

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

// Command-line entry point. Subcommands cover the full workflow: dataset
// generation, training, evaluation, ablation grids, gradient checking,
// operation counting, benchmarking, and attention-map export.

#include <cstring>
#include <iostream>
#include <map>

#include "lbdt/config.hpp"
#include "lbdt/flops.hpp"
#include "lbdt/gradcheck.hpp"
#include "lbdt/train.hpp"

namespace {

constexpr const char* kUsage = R"(usage: lbdt <command> [--config FILE] [--key=value ...] [options]

commands:
  gen-data    write the synthetic dataset (train/val splits, vocab, manifests)
  train       train a model, logging per-epoch metrics
  eval        evaluate a checkpoint (--ckpt, --split train|val) or mask
              directories (--pred-dir, --gt-dir)
  ablate      train a named grid (--grid trend|component|stages|delta)
  gradcheck   finite-difference audit of the differentiable operations
  flops       analytic operation counts and scaling comparison
  bench       wall-clock matmul benchmark for both attention routings
  dump-attn   export attention maps and concentration stats (--ckpt, --out)

Config keys can come from --config FILE and/or repeated --key=value
overrides; the file is applied first. Unknown keys and commands fail.
)";

struct Args {
  lbdt::RunConfig cfg;
  std::map<std::string, std::string> opts;  // subcommand options, no leading dashes
};

const std::map<std::string, int> kCliOnly = {
    {"ckpt", 0}, {"split", 0}, {"pred-dir", 0}, {"gt-dir", 0}, {"grid", 0},
    {"stage", 0}, {"dump", 0}, {"out", 0}, {"reps", 0},
};

Args parse_args(int argc, char** argv) {
  Args args;
  std::vector<std::pair<std::string, std::string>> pending;
  std::string config_path;
  for (int i = 2; i < argc; ++i) {
    std::string a = argv[i];
    if (a.rfind("--", 0) != 0) throw std::invalid_argument("unexpected argument: " + a);
    a = a.substr(2);
    std::string key, value;
    size_t eq = a.find('=');
    if (eq != std::string::npos) {
      key = a.substr(0, eq);
      value = a.substr(eq + 1);
    } else {
      key = a;
      if (i + 1 >= argc) throw std::invalid_argument("option --" + key + " needs a value");
      value = argv[++i];
    }
    if (key == "config") config_path = value;
    else if (kCliOnly.count(key)) args.opts[key] = value;
    else pending.emplace_back(key, value);
  }
  if (!config_path.empty()) args.cfg = lbdt::load_config(config_path);
  for (const auto& [k, v] : pending) lbdt::set_config_key(args.cfg, k, v);
  return args;
}

std::string opt_or(const Args& args, const std::string& key, const std::string& fallback) {
  auto it = args.opts.find(key);
  return it == args.opts.end() ? fallback : it->second;
}

int cmd_gen_data(const Args& args) {
  const auto& c = args.cfg;
  lbdt::build_split(c.sample_count, c.seed, c.delta, c.height, c.width, c.dataset_dir);
  std::cout << "wrote " << c.sample_count << " samples under " << c.dataset_dir << " (delta "
            << c.delta << ", seed " << c.seed << ")\n";
  return 0;
}

int cmd_train(const Args& args) {
  lbdt::TrainOptions opt;
  opt.progress = &std::cerr;
  lbdt::TrainResult r = lbdt::train_model(args.cfg, opt);
  std::cout << r.final_val.to_json() << "\n";
  std::cerr << "best mean IoU " << r.best_mean_iou << " at epoch " << r.best_epoch << "; "
            << "checkpoints under " << args.cfg.out_dir << "\n";
  return 0;
}

int cmd_eval(const Args& args) {
  std::string pred_dir = opt_or(args, "pred-dir", "");
  if (!pred_dir.empty()) {
    std::string gt_dir = opt_or(args, "gt-dir", "");
    if (gt_dir.empty()) throw std::invalid_argument("eval: --pred-dir needs --gt-dir");
    std::vector<std::string> names;
    for (const auto& e : std::filesystem::directory_iterator(pred_dir))
      if (e.path().extension() == ".bin") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw std::runtime_error("eval: no .bin masks in " + pred_dir);
    std::vector<lbdt::BinaryMask> preds, gts;
    for (const auto& n : names) {
      preds.push_back(lbdt::threshold_mask(lbdt::load_tensor<float>(pred_dir + "/" + n)));
      gts.push_back(lbdt::threshold_mask(lbdt::load_tensor<float>(gt_dir + "/" + n)));
    }
    std::cout << lbdt::evaluate_masks(preds, gts).to_json() << "\n";
    return 0;
  }
  std::string ckpt = opt_or(args, "ckpt", "");
  if (ckpt.empty()) throw std::invalid_argument("eval: need --ckpt or --pred-dir/--gt-dir");
  lbdt::Vocabulary vocab = lbdt::Vocabulary::from_file(args.cfg.dataset_dir + "/vocab.txt");
  lbdt::LoadedModel lm = lbdt::load_model_checkpoint(ckpt, vocab.size());
  std::string split = opt_or(args, "split", "val");
  auto samples = lbdt::load_split(args.cfg.dataset_dir + "/" + split, vocab, lm.cfg.max_words);
  std::cout << lbdt::evaluate_model(*lm.model, samples).to_json() << "\n";
  return 0;
}

int cmd_ablate(const Args& args) {
  std::string grid = opt_or(args, "grid", "trend");
  lbdt::AblationResult r = lbdt::run_ablation(args.cfg, grid, &std::cerr);
  std::filesystem::create_directories(args.cfg.out_dir);
  std::string tsv = r.tsv();
  std::ofstream(args.cfg.out_dir + "/ablation_" + grid + ".tsv") << tsv;
  std::cout << tsv;
  if (grid == "trend") {
    auto miou = [&r](const char* name) { return r.find(name)->val.mean_iou; };
    bool transfer_ok = miou("full") >= miou("t2s_only") && miou("full") >= miou("s2t_only") &&
                       miou("t2s_only") >= miou("no_transfer") &&
                       miou("s2t_only") >= miou("no_transfer");
    bool fusion_ok = miou("full") >= miou("ld_only") && miou("full") >= miou("stc_only") &&
                     miou("ld_only") >= miou("no_bca") && miou("stc_only") >= miou("no_bca");
    bool margin_ok = miou("full") - miou("no_transfer") >= 0.02;
    std::cout << "transfer ordering: " << (transfer_ok ? "ok" : "VIOLATED") << "\n"
              << "fusion ordering: " << (fusion_ok ? "ok" : "VIOLATED") << "\n"
              << "full vs no-transfer margin >= 2 points: " << (margin_ok ? "ok" : "VIOLATED")
              << "\n";
  }
  return 0;
}

int cmd_gradcheck() {
  using lbdt::Tape;
  using lbdt::Var;
  using T = double;
  lbdt::Rng rng(29);
  auto fill = [&rng](lbdt::Shape shape) {
    lbdt::Tensor<T> t(shape);
    for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
  };
  int failures = 0;
  auto run = [&](const std::string& name, std::function<Var<T>(Tape<T>&)> builder,
                 int64_t max_per_leaf = 0, double eps = 1e-3) {
    lbdt::GradCheckReport rep = lbdt::gradient_check<T>(builder, eps, 1e-4, max_per_leaf);
    std::cout << name << ": " << (rep.pass ? "ok" : "FAIL") << " (" << rep.checked
              << " elements, max rel err " << rep.max_rel_err << ")\n";
    for (size_t f = 0; f < rep.failures.size() && f < 5; ++f) {
      const auto& fail = rep.failures[f];
      std::cout << "  leaf " << fail.leaf << " element " << fail.element << ": analytic "
                << fail.analytic << " numeric " << fail.numeric << " rel " << fail.rel_err << "\n";
    }
    if (!rep.pass) ++failures;
  };

  lbdt::Tensor<T> a = fill({3, 4}), b = fill({3, 4}), m = fill({4, 5});
  run("add.mul.relu", [&](Tape<T>& t) {
    Var<T> x = t.leaf(a, true), y = t.leaf(b, true);
    return sum_all(relu(mul(add(x, y), y)));
  });
  run("matmul.sigmoid", [&](Tape<T>& t) {
    return sum_all(sigmoid(matmul(t.leaf(a, true), t.leaf(m, true))));
  });
  run("softmax.rows", [&](Tape<T>& t) { return sum_all(mul(softmax_rows(t.leaf(a, true)), t.leaf(b, true))); });
  lbdt::Tensor<T> img = fill({2, 6, 6}), w1 = fill({3, 2, 3, 3}), bias = fill({3});
  run("conv3x3.pool", [&](Tape<T>& t) {
    return sum_all(global_avg_pool(conv3x3(t.leaf(img, true), t.leaf(w1, true), t.leaf(bias, true), 2)));
  });
  run("upsample.bilinear", [&](Tape<T>& t) {
    return mean_all(upsample_bilinear(t.leaf(img, true), 9, 9));
  });
  lbdt::ModelConfig mc;
  mc.h0 = mc.w0 = 32;
  mc.n_words = 4;
  mc.cm = 8;
  mc.cd = 8;
  mc.layers = 2;
  mc.insert_stages = {4, 5};
  mc.vocab_size = 17;
  lbdt::Model<T> model(mc, 5);
  lbdt::ModelInput<T> in;
  in.target = fill({3, 32, 32});
  in.reference = fill({3, 32, 32});
  in.tokens = {3, 9, 12, 0};
  lbdt::Tensor<T> target_mask({1, 32, 32});
  for (auto& v : target_mask.data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  // The deep composite runs a finer step: finite-difference truncation
  // through the loss log terms dominates at 1e-3 even when every analytic
  // gradient is right.
  run(
      "model.loss",
      [&](Tape<T>& t) {
        lbdt::Binder<T> bind(t, model.params(), true);
        return lbdt::training_loss(model.forward(bind, in), target_mask);
      },
      2, 5e-4);
  if (failures) {
    std::cerr << failures << " gradient check group(s) failed\n";
    return 1;
  }
  return 0;
}

int cmd_flops(const Args& args) {
  using namespace lbdt;
  ModelConfig mc = args.cfg.model_config(17);
  FlopsLedger ledger = count_model_flops<float>(mc);
  std::cout << "component\tflops\n";
  for (const auto& [label, f] : ledger.items)
    std::cout << label << "\t" << static_cast<long long>(f) << "\n";
  std::cout << "total\t" << static_cast<long long>(ledger.total()) << "\n\n";

  double n = static_cast<double>(mc.n_words), c = static_cast<double>(mc.cm);
  std::cout << "hw\tbridged\tdirect\tratio\n";
  for (double hw : {64.0, 256.0, 1024.0}) {
    double br = flops::bridged_transfer(hw, n, c, static_cast<double>(mc.mlp_width()));
    double dr = flops::direct_transfer(hw, c);
    std::cout << static_cast<long long>(hw) << "\t" << static_cast<long long>(br) << "\t"
              << static_cast<long long>(dr) << "\t" << dr / br << "\n";
  }
  auto coeff = [&](auto&& f) {
    return flops::quadratic_coeff(64, f(64.0), 256, f(256.0), 1024, f(1024.0));
  };
  double ca = coeff([&](double hw) { return flops::bridged_transfer(hw, n, c, 2 * c); });
  double cb = coeff([&](double hw) { return flops::direct_transfer(hw, c); });
  std::cout << "quadratic coefficient bridged " << ca << ", direct " << cb << "\n";
  std::cout << "score-product example (hw=256, n=10, c=64): bridged "
            << static_cast<long long>(flops::bridged_attention_product(10, 64, 256)) << ", direct "
            << static_cast<long long>(flops::direct_attention_product(256, 64)) << ", ratio "
            << flops::direct_attention_product(256, 64) / flops::bridged_attention_product(10, 64, 256)
            << "\n";
  return 0;
}

int cmd_bench(const Args& args) {
  int reps = static_cast<int>(std::stol(opt_or(args, "reps", "9")));
  int64_t hw = 1024, n = 25, c = 64;
  lbdt::BenchResult bridged = lbdt::bench_matmul(n, c, hw, reps);
  lbdt::BenchResult direct = lbdt::bench_matmul(hw, c, hw, reps);
  std::cout << "routing\tshape\tmedian_ms\tmin_ms\tmax_ms\tgflops_s\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf), "bridged\t%lldx%lldx%lld\t%.3f\t%.3f\t%.3f\t%.2f\n",
                static_cast<long long>(n), static_cast<long long>(c), static_cast<long long>(hw),
                bridged.median_ms, bridged.min_ms, bridged.max_ms, bridged.gflops_s);
  std::cout << buf;
  std::snprintf(buf, sizeof(buf), "direct\t%lldx%lldx%lld\t%.3f\t%.3f\t%.3f\t%.2f\n",
                static_cast<long long>(hw), static_cast<long long>(c), static_cast<long long>(hw),
                direct.median_ms, direct.min_ms, direct.max_ms, direct.gflops_s);
  std::cout << buf;
  std::cout << "median speedup " << direct.median_ms / bridged.median_ms << "x\n";
  return 0;
}

int cmd_dump_attn(const Args& args) {
  std::string ckpt = opt_or(args, "ckpt", "");
  if (ckpt.empty()) throw std::invalid_argument("dump-attn: need --ckpt");
  std::string out_dir = opt_or(args, "out", args.cfg.out_dir + "/attn");
  int stage = static_cast<int>(std::stol(opt_or(args, "stage", "4")));
  int dump = static_cast<int>(std::stol(opt_or(args, "dump", "8")));
  std::string split = opt_or(args, "split", "val");
  lbdt::Vocabulary vocab = lbdt::Vocabulary::from_file(args.cfg.dataset_dir + "/vocab.txt");
  lbdt::LoadedModel lm = lbdt::load_model_checkpoint(ckpt, vocab.size());
  auto samples = lbdt::load_split(args.cfg.dataset_dir + "/" + split, vocab, lm.cfg.max_words);
  lbdt::AttentionAnalysis an = lbdt::analyze_attention(*lm.model, samples, stage, dump, out_dir);
  std::filesystem::create_directories(out_dir);
  std::ofstream nd(out_dir + "/concentration.ndjson", std::ios::trunc);
  for (const auto& s : an.per_sample)
    nd << "{\"stem\":\"" << s.stem << "\",\"motion\":\"" << s.motion_word << "\",\"moving\":"
       << (s.moving ? "true" : "false") << ",\"mass\":" << s.mass << "}\n";
  std::cout << "{\"moving_total\":" << an.moving_total << ",\"concentrated\":" << an.concentrated
            << ",\"fraction_concentrated\":" << an.fraction_concentrated << "}\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  std::string cmd = argv[1];
  try {
    Args args = parse_args(argc, argv);
    if (cmd == "gen-data") return cmd_gen_data(args);
    if (cmd == "train") return cmd_train(args);
    if (cmd == "eval") return cmd_eval(args);
    if (cmd == "ablate") return cmd_ablate(args);
    if (cmd == "gradcheck") return cmd_gradcheck();
    if (cmd == "flops") return cmd_flops(args);
    if (cmd == "bench") return cmd_bench(args);
    if (cmd == "dump-attn") return cmd_dump_attn(args);
    std::cerr << "unknown command: " << cmd << "\n" << kUsage;
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n" << kUsage;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

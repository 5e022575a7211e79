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

#ifndef LBDT_CONFIG_HPP
#define LBDT_CONFIG_HPP

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lbdt/model.hpp"

namespace lbdt {

// Every run-level knob in one place. Files use "key = value" lines with '#'
// comments; unknown keys are rejected so typos cannot silently revert to
// defaults. serialize_config() emits keys in one fixed order, which makes the
// config text embedded in checkpoints byte-stable.
struct RunConfig {
  std::string dataset_dir = "data";
  std::string out_dir = "runs/default";
  int64_t sample_count = 625;
  int64_t height = 64, width = 64;
  int delta = 6;
  int max_words = 25;
  int medium_channels = 64;
  int decoder_channels = 32;
  int layers = 1;
  std::vector<int> insert_stages = {4, 5};
  int mlp_hidden = 0;  // 0 picks 2 * medium_channels
  int64_t batch_size = 8;
  double learning_rate = 1e-4;
  int epochs = 15;
  int lr_halve_start = 10;  // 1-based epoch where halving begins
  int lr_halve_period = 2;
  uint64_t seed = 17;
  bool enable_t2s = true;
  bool enable_s2t = true;
  bool enable_bca_ld = true;
  bool enable_bca_stc = true;

  ModelConfig model_config(int64_t vocab_size) const {
    ModelConfig mc;
    mc.h0 = height;
    mc.w0 = width;
    mc.n_words = max_words;
    mc.cm = medium_channels;
    mc.cd = decoder_channels;
    mc.layers = layers;
    mc.insert_stages = insert_stages;
    mc.mlp_hidden = mlp_hidden;
    mc.vocab_size = vocab_size;
    mc.enable_t2s = enable_t2s;
    mc.enable_s2t = enable_s2t;
    mc.enable_ld = enable_bca_ld;
    mc.enable_stc = enable_bca_stc;
    return mc;
  }
};

namespace cfgdetail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int64_t out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': not an integer: '" + v + "'");
  }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    uint64_t out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': not an unsigned integer: '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': not a number: '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config key '" + key + "': not a boolean: '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) throw std::invalid_argument("config key '" + key + "': empty list entry");
    out.push_back(static_cast<int>(parse_int(key, part)));
  }
  if (out.empty()) throw std::invalid_argument("config key '" + key + "': empty list");
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace cfgdetail

inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using namespace cfgdetail;
  if (key == "dataset_dir") cfg.dataset_dir = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "sample_count") cfg.sample_count = parse_int(key, value);
  else if (key == "height") cfg.height = parse_int(key, value);
  else if (key == "width") cfg.width = parse_int(key, value);
  else if (key == "delta") cfg.delta = static_cast<int>(parse_int(key, value));
  else if (key == "max_words") cfg.max_words = static_cast<int>(parse_int(key, value));
  else if (key == "medium_channels") cfg.medium_channels = static_cast<int>(parse_int(key, value));
  else if (key == "decoder_channels") cfg.decoder_channels = static_cast<int>(parse_int(key, value));
  else if (key == "layers") cfg.layers = static_cast<int>(parse_int(key, value));
  else if (key == "insert_stages") cfg.insert_stages = parse_int_list(key, value);
  else if (key == "mlp_hidden") cfg.mlp_hidden = static_cast<int>(parse_int(key, value));
  else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
  else if (key == "learning_rate") cfg.learning_rate = parse_double(key, value);
  else if (key == "epochs") cfg.epochs = static_cast<int>(parse_int(key, value));
  else if (key == "lr_halve_start") cfg.lr_halve_start = static_cast<int>(parse_int(key, value));
  else if (key == "lr_halve_period") cfg.lr_halve_period = static_cast<int>(parse_int(key, value));
  else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "enable_t2s") cfg.enable_t2s = parse_bool(key, value);
  else if (key == "enable_s2t") cfg.enable_s2t = parse_bool(key, value);
  else if (key == "enable_bca_ld") cfg.enable_bca_ld = parse_bool(key, value);
  else if (key == "enable_bca_stc") cfg.enable_bca_stc = parse_bool(key, value);
  else throw std::invalid_argument("unknown config key: '" + key + "'");
}

inline void parse_config_text(const std::string& text, RunConfig& cfg) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = cfgdetail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = cfgdetail::trim(line.substr(0, eq));
    std::string value = cfgdetail::trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    set_config_key(cfg, key, value);
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  RunConfig cfg;
  parse_config_text(buf.str(), cfg);
  return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
  char lr[64];
  std::snprintf(lr, sizeof(lr), "%.10g", cfg.learning_rate);
  std::string out;
  out += "dataset_dir = " + cfg.dataset_dir + "\n";
  out += "out_dir = " + cfg.out_dir + "\n";
  out += "sample_count = " + std::to_string(cfg.sample_count) + "\n";
  out += "height = " + std::to_string(cfg.height) + "\n";
  out += "width = " + std::to_string(cfg.width) + "\n";
  out += "delta = " + std::to_string(cfg.delta) + "\n";
  out += "max_words = " + std::to_string(cfg.max_words) + "\n";
  out += "medium_channels = " + std::to_string(cfg.medium_channels) + "\n";
  out += "decoder_channels = " + std::to_string(cfg.decoder_channels) + "\n";
  out += "layers = " + std::to_string(cfg.layers) + "\n";
  out += "insert_stages = " + cfgdetail::join_ints(cfg.insert_stages) + "\n";
  out += "mlp_hidden = " + std::to_string(cfg.mlp_hidden) + "\n";
  out += "batch_size = " + std::to_string(cfg.batch_size) + "\n";
  out += std::string("learning_rate = ") + lr + "\n";
  out += "epochs = " + std::to_string(cfg.epochs) + "\n";
  out += "lr_halve_start = " + std::to_string(cfg.lr_halve_start) + "\n";
  out += "lr_halve_period = " + std::to_string(cfg.lr_halve_period) + "\n";
  out += "seed = " + std::to_string(cfg.seed) + "\n";
  out += "enable_t2s = " + std::string(cfg.enable_t2s ? "true" : "false") + "\n";
  out += "enable_s2t = " + std::string(cfg.enable_s2t ? "true" : "false") + "\n";
  out += "enable_bca_ld = " + std::string(cfg.enable_bca_ld ? "true" : "false") + "\n";
  out += "enable_bca_stc = " + std::string(cfg.enable_bca_stc ? "true" : "false") + "\n";
  return out;
}

}  // namespace lbdt

#endif  // LBDT_CONFIG_HPP

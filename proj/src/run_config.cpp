// Copyright 2026 The DMM Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dmm/run_config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dmm {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    require(pos == v.size(), "config: bad integer for " + key + ": " + v);
    return r;
  } catch (const std::exception&) {
    throw Error("config: bad integer for " + key + ": " + v);
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    require(pos == v.size(), "config: bad integer for " + key + ": " + v);
    return r;
  } catch (const std::exception&) {
    throw Error("config: bad integer for " + key + ": " + v);
  }
}

double parse_f64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    require(pos == v.size(), "config: bad number for " + key + ": " + v);
    return r;
  } catch (const std::exception&) {
    throw Error("config: bad number for " + key + ": " + v);
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config: bad boolean for " + key + ": " + v);
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_f64(key, item));
  }
  require(!out.empty(), "config: empty list for " + key);
  return out;
}

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_num(v[i]);
  return s;
}

struct Entry {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::map<std::string, Entry>& registry() {
  static const std::map<std::string, Entry> table = [] {
    std::map<std::string, Entry> t;
    auto str = [&t](const std::string& key, std::string RunConfig::* f) {
      t[key] = {[f](RunConfig& c, const std::string&, const std::string& v) { c.*f = v; },
                [f](const RunConfig& c) { return c.*f; }};
    };
    auto i64 = [&t](const std::string& key, int64_t RunConfig::* f) {
      t[key] = {[f](RunConfig& c, const std::string& k, const std::string& v) {
                  c.*f = parse_i64(k, v);
                },
                [f](const RunConfig& c) { return std::to_string(c.*f); }};
    };
    auto u64 = [&t](const std::string& key, uint64_t RunConfig::* f) {
      t[key] = {[f](RunConfig& c, const std::string& k, const std::string& v) {
                  c.*f = parse_u64(k, v);
                },
                [f](const RunConfig& c) { return std::to_string(c.*f); }};
    };
    auto f64 = [&t](const std::string& key, double RunConfig::* f) {
      t[key] = {[f](RunConfig& c, const std::string& k, const std::string& v) {
                  c.*f = parse_f64(k, v);
                },
                [f](const RunConfig& c) { return fmt_num(c.*f); }};
    };
    auto boolean = [&t](const std::string& key, bool RunConfig::* f) {
      t[key] = {[f](RunConfig& c, const std::string& k, const std::string& v) {
                  c.*f = parse_bool(k, v);
                },
                [f](const RunConfig& c) { return (c.*f) ? "true" : "false"; }};
    };
    auto list = [&t](const std::string& key, std::vector<double> RunConfig::* f) {
      t[key] = {[f](RunConfig& c, const std::string& k, const std::string& v) {
                  c.*f = parse_list(k, v);
                },
                [f](const RunConfig& c) { return fmt_list(c.*f); }};
    };

    u64("seed", &RunConfig::seed);
    str("out_dir", &RunConfig::out_dir);
    str("data_dir", &RunConfig::data_dir);
    str("supervisor_ckpt", &RunConfig::supervisor_ckpt);
    str("model_ckpt", &RunConfig::model_ckpt);
    str("resume", &RunConfig::resume);
    str("flow_field", &RunConfig::flow_field);
    str("image_format", &RunConfig::image_format);
    str("synth_mode", &RunConfig::synth_mode);

    i64("pairs", &RunConfig::pairs);
    i64("image_size", &RunConfig::image_size);
    f64("phantom_g0", &RunConfig::phantom_g0);
    f64("phantom_g1", &RunConfig::phantom_g1);
    f64("phantom_o_max", &RunConfig::phantom_o_max);
    f64("phantom_noise_sigma", &RunConfig::phantom_noise_sigma);

    i64("sup_per_class", &RunConfig::sup_per_class);
    i64("sup_epochs", &RunConfig::sup_epochs);
    i64("sup_batch", &RunConfig::sup_batch);
    f64("sup_lr", &RunConfig::sup_lr);
    f64("sup_target_accuracy", &RunConfig::sup_target_accuracy);
    f64("sup_lo_min", &RunConfig::sup_lo_min);
    f64("sup_lo_max", &RunConfig::sup_lo_max);
    f64("sup_hi_min", &RunConfig::sup_hi_min);
    f64("sup_hi_max", &RunConfig::sup_hi_max);

    f64("lambda1", &RunConfig::lambda1);
    f64("lambda2", &RunConfig::lambda2);
    f64("lr_denoiser", &RunConfig::lr_denoiser);
    f64("lr_regnet", &RunConfig::lr_regnet);
    i64("epochs", &RunConfig::epochs);
    i64("max_steps", &RunConfig::max_steps);
    i64("batch_size", &RunConfig::batch_size);
    i64("t_max", &RunConfig::t_max);
    f64("beta_start", &RunConfig::beta_start);
    f64("beta_end", &RunConfig::beta_end);
    i64("flow_avg_window", &RunConfig::flow_avg_window);
    boolean("stop_grad_at_nhat", &RunConfig::stop_grad_at_nhat);
    boolean("t_per_epoch", &RunConfig::t_per_epoch);
    f64("dropout", &RunConfig::dropout);
    i64("threads", &RunConfig::threads);
    i64("checkpoint_interval", &RunConfig::checkpoint_interval);

    i64("denoiser_base", &RunConfig::denoiser_base);
    i64("denoiser_levels", &RunConfig::denoiser_levels);
    i64("denoiser_res_blocks", &RunConfig::denoiser_res_blocks);
    i64("regnet_base", &RunConfig::regnet_base);

    list("etas", &RunConfig::etas);
    list("eval_etas", &RunConfig::eval_etas);
    i64("eval_t", &RunConfig::eval_t);
    f64("psnr_max_i", &RunConfig::psnr_max_i);

    list("sweep_lambda1", &RunConfig::sweep_lambda1);
    list("sweep_lambda2", &RunConfig::sweep_lambda2);
    i64("sweep_steps", &RunConfig::sweep_steps);
    return t;
  }();
  return table;
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = registry().find(key);
  if (it == registry().end()) throw Error("config: unknown key '" + key + "'");
  it->second.set(cfg, key, value);
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw Error("config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    apply_config_entry(cfg, key, value);
  }
  return cfg;
}

void write_resolved_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("config: cannot write " + path);
  for (const auto& [key, entry] : registry()) os << key << "=" << entry.get(cfg) << "\n";
  if (!os) throw IoError("config: write failed for " + path);
}

}  // namespace dmm

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

#pragma once

#include <string>
#include <vector>

#include "dmm/common.hpp"

namespace dmm {

/// Flat key=value run configuration ("#" comments, one pair per line).
/// Unknown keys are an error; every command writes its resolved
/// configuration next to its outputs.
struct RunConfig {
  uint64_t seed = 7;
  std::string out_dir = "out";
  std::string data_dir;
  std::string supervisor_ckpt;
  std::string model_ckpt;
  std::string resume;
  std::string flow_field;
  std::string image_format = "png";   // png | pgm
  std::string synth_mode = "paired";  // paired | source-only

  // phantom generation
  int64_t pairs = 60;
  int64_t image_size = 64;
  double phantom_g0 = -1.0;  // < 0: scaled default for image_size
  double phantom_g1 = -1.0;
  double phantom_o_max = -1.0;
  double phantom_noise_sigma = 0.02;

  // supervisor pre-training
  int64_t sup_per_class = 120;
  int64_t sup_epochs = 40;
  int64_t sup_batch = 16;
  double sup_lr = 1e-3;
  double sup_target_accuracy = 0.95;
  double sup_lo_min = 0.45, sup_lo_max = 0.55;  // class 0 severity range
  double sup_hi_min = 0.70, sup_hi_max = 0.80;  // class 1 severity range

  // training
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  double lr_denoiser = 2e-4;
  double lr_regnet = 1e-3;
  int64_t epochs = 1000;
  int64_t max_steps = 300;
  int64_t batch_size = 8;
  int64_t t_max = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int64_t flow_avg_window = 5;
  bool stop_grad_at_nhat = false;
  bool t_per_epoch = false;
  double dropout = 0.0;
  int64_t threads = 2;
  int64_t checkpoint_interval = 0;

  // architecture
  int64_t denoiser_base = 32;
  int64_t denoiser_levels = 3;
  int64_t denoiser_res_blocks = 2;
  int64_t regnet_base = 16;

  // synthesis / evaluation
  std::vector<double> etas = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> eval_etas = {0.25, 0.5, 0.75};
  int64_t eval_t = -1;  // -1 = t_max / 2
  double psnr_max_i = 2.0;

  // lambda sweep
  std::vector<double> sweep_lambda1 = {0.0, 0.1};
  std::vector<double> sweep_lambda2 = {0.0, 0.01};
  int64_t sweep_steps = 80;
};

/// Parses a config file; throws Error naming the first unknown key or
/// malformed line.
RunConfig parse_run_config(const std::string& path);

/// Applies one "key=value" override (used by --seed etc.).
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

/// Writes the fully-resolved configuration (all keys, current values).
void write_resolved_config(const RunConfig& cfg, const std::string& path);

}  // namespace dmm

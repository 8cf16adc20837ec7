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

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmm/diffusion.hpp"
#include "dmm/morphing.hpp"
#include "dmm/phantom.hpp"
#include "dmm/supervision.hpp"

namespace dmm {

/// Hyper-parameters of one training run. The desk defaults (300 steps,
/// batch 8, 64x64, T_max 200) keep a full run in the minutes range; the
/// full-scale values (500 epochs, batch 16, 224x224, T_max 2000) stay
/// legal configuration.
struct TrainConfig {
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  double lr_denoiser = 2e-4;
  double lr_regnet = 1e-3;
  int64_t epochs = 1000;
  int64_t max_steps = 300;  // 0 = epochs alone govern
  int64_t batch_size = 8;
  int64_t t_max = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  uint64_t seed = 7;
  int64_t flow_avg_window = 5;  // k fields kept for the unified flow
  /// When set, the registration net consumes a detached copy of the
  /// predicted noise, so morphing/supervision gradients stop at n_hat
  /// instead of reaching the denoiser.
  bool stop_grad_at_nhat = false;
  /// Resample one shared t per epoch instead of per (step, sample).
  bool t_per_epoch = false;
  double dropout = 0.0;
  int64_t threads = 2;
  int64_t checkpoint_interval = 0;  // steps between checkpoints; 0 = final only

  void validate() const;
};

// --- optimization ------------------------------------------------------------

/// Adam first/second moments plus the shared step counter of one network.
struct AdamState {
  int64_t step = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

/// Standard bias-corrected Adam update, applied in place to every entry of
/// `grads` (parameters without a gradient entry are untouched).
void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// --- the model and its training state ------------------------------------------

struct DmmModel {
  DenoiserNet denoiser;
  RegNet regnet;
};

/// Builds both nets with Kaiming-initialized parameters from the "init"
/// sub-stream of the given seed.
DmmModel make_model(const DenoiserConfig& dcfg, const RegConfig& rcfg, uint64_t seed);

struct LossBreakdown {
  double l_diff = 0.0;
  double l_mph = 0.0;
  double l_sup = 0.0;
  double l_hybrid = 0.0;
};

struct TrainState {
  AdamState adam_denoiser;
  AdamState adam_regnet;
  int64_t global_step = 0;
  int64_t epoch = 0;
  int64_t step_in_epoch = 0;
  /// Last k per-step flow fields; each entry is the mean of that step's
  /// per-pair predicted fields.
  std::deque<FlowField> flow_history;
};

/// One optimizer step over a batch of (x_S, x_T) pairs: sample (n, t) per
/// pair, form x_t, predict n_hat, predict the flow, warp at eta = 1 for the
/// morphing loss and at eta = 0.5 / 0.75 for the supervision loss, combine
/// as L_diff + lambda1 L_mph + lambda2 L_sup, backpropagate, and apply one
/// Adam step per net at its own learning rate. Per-sample passes may run on
/// worker threads; gradient reduction is ordered by sample index, so the
/// result is bit-identical for any thread count. A non-finite loss aborts
/// the step.
LossBreakdown train_step(DmmModel& model, const SupervisorNet& supervisor,
                         const std::vector<const PairRecord*>& batch,
                         const NoiseSchedule& schedule, const TrainConfig& cfg,
                         TrainState& state);

struct LossRow {
  int64_t step = 0;
  int64_t epoch = 0;
  LossBreakdown losses;
};

struct FitResult {
  std::vector<LossRow> log;
};

/// Epoch loop over deterministically shuffled batches. Appends one CSV row
/// per step to `log_csv_path` (header step,epoch,l_diff,l_mph,l_sup,l_hybrid;
/// created fresh when state.global_step == 0, appended to on resume) and
/// writes periodic + final checkpoints into `checkpoint_dir` when set.
FitResult fit(DmmModel& model, const SupervisorNet& supervisor, const PairDataset& dataset,
              const TrainConfig& cfg, TrainState& state, const std::string& log_csv_path = "",
              const std::string& checkpoint_dir = "");

/// Elementwise arithmetic mean of the last k fields.
FlowField average_flow(const std::deque<FlowField>& history, int64_t k);
FlowField average_flow(const std::vector<FlowField>& history, int64_t k);

/// Frames warp(x_S, eta * flow) in eta order; eta = 0 reproduces x_S
/// exactly. Default etas are {0, 0.25, 0.5, 0.75, 1}.
std::vector<Tensor> synthesize_sequence(const Tensor& x_s, const FlowField& flow,
                                        const std::vector<double>& etas = {0.0, 0.25, 0.5, 0.75,
                                                                           1.0});

// --- checkpointing ----------------------------------------------------------------
// Binary format "DMMC": magic, version u32, role tag (length-prefixed
// ASCII), parameter table (name, dtype code, shape, raw little-endian
// payload), optimizer table, rng state, flow history.

struct RngCursor {
  uint64_t master_seed = 0;
  int64_t global_step = 0;
  int64_t epoch = 0;
  int64_t step_in_epoch = 0;
};

struct Checkpoint {
  uint32_t version = 1;
  std::string role;  // "dmm" or "supervisor"
  std::map<std::string, Tensor> params;
  std::map<std::string, AdamState> optimizers;
  RngCursor rng;
  std::vector<FlowField> flow_history;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Model/state <-> checkpoint bridges (parameters prefixed "denoiser." /
/// "regnet."; architecture descriptors ride in the parameter table under
/// "meta.").
Checkpoint snapshot_model(const DmmModel& model, const TrainState& state,
                          const TrainConfig& cfg);
void restore_model(const Checkpoint& ckpt, DmmModel& model, TrainState& state);

Checkpoint snapshot_supervisor(const SupervisorNet& net);
SupervisorNet restore_supervisor(const Checkpoint& ckpt);

}  // namespace dmm

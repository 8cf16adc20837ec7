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

#include <vector>

#include "dmm/nn.hpp"
#include "dmm/tensor.hpp"

namespace dmm {

/// Small convolutional severity classifier: stride-2 conv blocks with
/// group norm and swish, global average pooling, and a 2-logit head
/// (class 0 = KL-2-like, class 1 = KL-3-like). Once frozen it receives no
/// optimizer updates, but gradients still flow through it to the frames
/// it scores.
struct SupervisorConfig {
  int64_t base_channels = 16;
  int blocks = 4;
  int groups = 8;
};

class SupervisorNet {
 public:
  SupervisorNet() = default;
  SupervisorNet(const SupervisorConfig& cfg, Rng& init_rng);

  const SupervisorConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool initialized() const { return !params_.map().empty(); }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  double validation_accuracy() const { return val_accuracy_; }
  void set_validation_accuracy(double a) { val_accuracy_ = a; }

  /// Graph-building forward; image is (H,W) or already-on-tape (1,1,H,W);
  /// returns (1,2) logits.
  Tensor forward(Tape& tape, const ParamView& pv, const Tensor& image) const;

 private:
  SupervisorConfig cfg_;
  ParamStore params_;
  bool frozen_ = false;
  double val_accuracy_ = 0.0;
};

/// Eval-mode classification of an (H,W) image in [-1,1]; returns the two
/// logits. Deterministic under fixed weights.
Tensor classify(const SupervisorNet& net, const Tensor& image);

struct PretrainConfig {
  int epochs = 40;
  int batch_size = 16;
  double lr = 1e-3;
  uint64_t seed = 1;
  double target_accuracy = 0.95;  // stop early once the validation set clears this
  double min_accuracy = 0.8;      // below this after max epochs is an error
  double validation_fraction = 0.25;
};

struct PretrainResult {
  SupervisorNet net;
  double validation_accuracy = 0.0;
  int epochs_run = 0;
};

/// Trains the two-class severity classifier on the given image sets
/// (class 0 = KL-2-like, class 1 = KL-3-like), holding out a validation
/// split. The returned net is frozen. Non-convergence (validation accuracy
/// below min_accuracy after all epochs) is an error, not silently accepted.
PretrainResult pretrain_supervisor(const std::vector<Tensor>& dataset_kl2,
                                   const std::vector<Tensor>& dataset_kl3,
                                   const PretrainConfig& config,
                                   const SupervisorConfig& arch = SupervisorConfig{});

/// L_sup = CE(classify(frame at eta=0.5), class 0)
///       + CE(classify(frame at eta=0.75), class 1).
/// Graph variant: frames must already be on the tape; gradients flow into
/// the frames (and everything upstream) but never into the frozen net.
Tensor supervision_loss(Tape&, const SupervisorNet& net, const Tensor& frame_half,
                        const Tensor& frame_three_quarter);
double supervision_loss(const SupervisorNet& net, const Tensor& frame_half,
                        const Tensor& frame_three_quarter);

}  // namespace dmm

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

#include "dmm/nn.hpp"
#include "dmm/tensor.hpp"

namespace dmm {

/// Per-step variances of the forward noising chain and their cumulative
/// products. Step arrays are 0-based: beta[j] is the variance of chain
/// step j+1, and alpha_bar[j] = prod_{i<=j} alpha[i].
struct NoiseSchedule {
  int64_t t_max = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// Cumulative product over the first `t` chain steps; t = 0 means no
  /// noising at all (empty product = 1). Both the closed-form perturbation
  /// and the iterated chain index time this way, so their distributions
  /// coincide at every t.
  double alpha_bar_at(int64_t t) const {
    require(t >= 0 && t < t_max, "schedule: t out of range");
    return t == 0 ? 1.0 : alpha_bar[t - 1];
  }
};

/// Linear interpolation of beta over the steps. 0 < beta_start <= beta_end < 1.
NoiseSchedule make_schedule(int64_t t_max, double beta_start, double beta_end);

/// Closed-form perturbation after t steps:
/// x_t = sqrt(abar_t) x + sqrt(1 - abar_t) n, with n standard normal of the
/// same shape.
Tensor forward_perturb(const Tensor& x, int64_t t, const Tensor& n, const NoiseSchedule& s);

/// Applies the single-step kernel x_i = sqrt(1-beta_i) x_{i-1} + sqrt(beta_i) n_i
/// for the first t steps, drawing fresh noise each step. t = 0 returns x
/// unchanged. Distributionally equivalent to forward_perturb at equal t.
Tensor iterated_forward(const Tensor& x, int64_t t, Rng& rng, const NoiseSchedule& s);

/// Sinusoidal step embedding: entry 2k = sin(t / 10000^(2k/dim)),
/// entry 2k+1 = cos(t / 10000^(2k/dim)). dim must be even.
Tensor time_embed(int64_t t, int64_t dim);

/// Mean over all elements of (n - n_hat)^2.
Tensor diffusion_loss(Tape&, const Tensor& n, const Tensor& n_hat);
double diffusion_loss(const Tensor& n, const Tensor& n_hat);

/// Conditional denoising U-Net: consumes the 3-channel stack
/// (x_S, x_T, x_t) plus the step embedding and predicts the 1-channel
/// noise at input resolution. Stride-2 convs halve spatial dims between
/// encoder levels; stride-2 transposed convs restore them with skip
/// concatenation; the middle block carries self-attention.
struct DenoiserConfig {
  int64_t base_channels = 32;
  int levels = 3;  // channel multipliers 1,2,4,...
  int res_blocks = 2;
  int64_t temb_dim = 128;
  int groups = 8;
  bool middle_attention = true;
  double dropout = 0.0;
};

class DenoiserNet {
 public:
  DenoiserNet() = default;
  DenoiserNet(const DenoiserConfig& cfg, Rng& init_rng);

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool initialized() const { return !params_.map().empty(); }

  /// Graph-building forward. Images are (H,W); output is (1,1,H,W).
  Tensor forward(Tape& tape, const ParamView& pv, const Tensor& x_s, const Tensor& x_t_img,
                 const Tensor& x_t, int64_t t, bool training, Rng& dropout_rng) const;

 private:
  DenoiserConfig cfg_;
  ParamStore params_;
};

/// Eval-mode noise prediction; deterministic under fixed weights.
/// Returns an (H,W) image.
Tensor predict_noise(const DenoiserNet& denoiser, const Tensor& x_s, const Tensor& x_t_img,
                     const Tensor& x_t, int64_t t);

}  // namespace dmm

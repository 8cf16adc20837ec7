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

#include "dmm/nn.hpp"
#include "dmm/tensor.hpp"

namespace dmm {

/// Per-pixel displacement field in pixel units, stored as a (2,H,W)
/// tensor: plane 0 = dx (column offset), plane 1 = dy (row offset).
/// The zero field is the identity transform.
struct FlowField {
  Tensor field;  // (2,H,W)

  FlowField() = default;
  explicit FlowField(Tensor f) : field(std::move(f)) {
    require(field.shape().rank() == 3 && field.shape().dim(0) == 2,
            "FlowField: (2,H,W) tensor expected");
    require(all_finite(field.vec()), "FlowField: displacements must be finite");
  }
  static FlowField zero(int64_t h, int64_t w) {
    return FlowField(Tensor::zeros(Shape{2, h, w}));
  }
  int64_t height() const { return field.shape().dim(1); }
  int64_t width() const { return field.shape().dim(2); }
  double mean_abs() const;
};

/// phi_eta = eta * phi with eta in [0, 1].
FlowField scale_flow(const FlowField& phi, double eta);
Tensor scale_flow(Tape&, const Tensor& phi, double eta);

/// Bilinear warp of an (H,W) image by a flow field (value-level variant of
/// the differentiable op).
Tensor warp(const Tensor& x, const FlowField& phi);

/// 1 - ZNCC(a, b) where ZNCC is the zero-normalized (global) cross
/// correlation with an epsilon-guarded denominator; range [0, 2] up to eps.
Tensor ncc_loss(Tape&, const Tensor& a, const Tensor& b, double eps = 1e-8);
double ncc_loss(const Tensor& a, const Tensor& b, double eps = 1e-8);

/// Image-gradient loss: mean |d a/dx - d b/dx| over the H x (W-1) forward
/// differences plus mean |d a/dy - d b/dy| over the (H-1) x W ones.
Tensor ig_loss(Tape&, const Tensor& a, const Tensor& b);
double ig_loss(const Tensor& a, const Tensor& b);

/// ncc_loss + ig_loss of the fully-warped source against the target.
Tensor morph_loss(Tape&, const Tensor& warped_full, const Tensor& x_t_img);
double morph_loss(const Tensor& warped_full, const Tensor& x_t_img);

/// Registration U-Net: consumes the 2-channel stack (x_S, n_hat) and
/// produces a flow field at input resolution. The output block weights
/// start near zero so training begins at the identity warp.
struct RegConfig {
  int64_t base_channels = 16;
  int levels = 3;  // downsampling steps
  int groups = 8;
  double output_scale = 1e-3;
};

class RegNet {
 public:
  RegNet() = default;
  RegNet(const RegConfig& cfg, Rng& init_rng);

  const RegConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool initialized() const { return !params_.map().empty(); }

  /// Graph-building forward; images are (H,W); output is (1,2,H,W).
  Tensor forward(Tape& tape, const ParamView& pv, const Tensor& x_s, const Tensor& n_hat) const;

 private:
  RegConfig cfg_;
  ParamStore params_;
};

/// Eval-mode flow prediction; deterministic under fixed weights.
FlowField predict_flow(const RegNet& regnet, const Tensor& x_s, const Tensor& n_hat);

/// Flow-field file format "DMMF": magic, version u32 = 1, H u32, W u32,
/// then H*W little-endian f32 for the dx plane followed by H*W for dy.
void write_flow_field(const std::string& path, const FlowField& f);
FlowField read_flow_field(const std::string& path);

}  // namespace dmm

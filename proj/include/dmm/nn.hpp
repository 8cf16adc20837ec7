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

#include <map>
#include <string>

#include "dmm/tensor.hpp"

namespace dmm {

/// He-normal initialization: samples Normal(0, 2/fan_in). Biases use
/// zeros(), by convention.
Tensor kaiming_init(const Shape& shape, int64_t fan_in, Rng& rng);

/// Named parameter collection of one network.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  Tensor& get_mutable(const std::string& name);
  bool has(const std::string& name) const { return params_.find(name) != params_.end(); }

  const std::map<std::string, Tensor>& map() const { return params_; }
  std::map<std::string, Tensor>& map_mutable() { return params_; }

  int64_t total_elements() const;

  /// FNV-1a over (name, shape, raw bytes) in name order; detects any
  /// parameter change bit-exactly.
  uint64_t digest() const;

 private:
  std::map<std::string, Tensor> params_;
};

/// Per-step binding of a ParamStore onto a tape. Trainable views watch
/// every parameter (gradients accumulate); frozen views pass parameters
/// through as constants, so gradients still flow across them to upstream
/// inputs but never into them.
class ParamView {
 public:
  ParamView(Tape& tape, const ParamStore& store, bool trainable);
  const Tensor& operator[](const std::string& name) const;
  const std::map<std::string, Tensor>& bound() const { return bound_; }

 private:
  std::map<std::string, Tensor> bound_;
};

// --- layer parameter construction --------------------------------------------

void init_conv(ParamStore&, const std::string& prefix, int64_t cin, int64_t cout, int64_t k,
               Rng&, double weight_scale = 1.0);
void init_conv_transpose(ParamStore&, const std::string& prefix, int64_t cin, int64_t cout,
                         Rng&);  // kernel = stride = 2
void init_group_norm(ParamStore&, const std::string& prefix, int64_t channels);
void init_linear(ParamStore&, const std::string& prefix, int64_t in, int64_t out, Rng&);
void init_attention(ParamStore&, const std::string& prefix, int64_t channels, Rng&);

// --- layer forward helpers -----------------------------------------------------

Tensor conv_fwd(Tape&, const ParamView&, const std::string& prefix, const Tensor& x,
                int stride, int padding);
Tensor conv_transpose_fwd(Tape&, const ParamView&, const std::string& prefix, const Tensor& x);
Tensor group_norm_fwd(Tape&, const ParamView&, const std::string& prefix, const Tensor& x,
                      int groups);
Tensor linear_fwd(Tape&, const ParamView&, const std::string& prefix, const Tensor& x);
Tensor attention_fwd(Tape&, const ParamView&, const std::string& prefix, const Tensor& x);

/// (H,W) image -> plain (1,1,H,W) tensor (no tape involvement).
Tensor as_nchw(const Tensor& img);
/// (1,1,H,W) or (1,C,H,W) with C=1 -> (H,W) image view copy.
Tensor as_image(const Tensor& t);
/// Canonicalizes a net input to (1,1,H,W), keeping the tape binding of
/// on-tape tensors (in-graph reshape) so gradients keep flowing.
Tensor to_nchw(Tape&, const Tensor& t);

}  // namespace dmm

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

#include "dmm/nn.hpp"

#include <cmath>

namespace dmm {

Tensor kaiming_init(const Shape& shape, int64_t fan_in, Rng& rng) {
  require(fan_in >= 1, "kaiming_init: fan_in must be >= 1");
  double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(static_cast<size_t>(shape.numel()));
  for (double& x : v) x = std * rng.gaussian();
  return Tensor::from(shape, std::move(v));
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  require(params_.find(name) == params_.end(), "ParamStore: duplicate parameter " + name);
  t.set_requires_grad(true);
  auto [it, ok] = params_.emplace(name, std::move(t));
  (void)ok;
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  require(it != params_.end(), "ParamStore: unknown parameter " + name);
  return it->second;
}

Tensor& ParamStore::get_mutable(const std::string& name) {
  auto it = params_.find(name);
  require(it != params_.end(), "ParamStore: unknown parameter " + name);
  return it->second;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

uint64_t ParamStore::digest() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : params_) {
    h = fnv1a(name, h);
    h = fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
  }
  return h;
}

ParamView::ParamView(Tape& tape, const ParamStore& store, bool trainable) {
  for (const auto& [name, t] : store.map()) {
    if (trainable) {
      bound_.emplace(name, tape.watch(t));
    } else {
      bound_.emplace(name, t.detached());
    }
  }
}

const Tensor& ParamView::operator[](const std::string& name) const {
  auto it = bound_.find(name);
  require(it != bound_.end(), "ParamView: unknown parameter " + name);
  return it->second;
}

void init_conv(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout, int64_t k,
               Rng& rng, double weight_scale) {
  Tensor w = kaiming_init(Shape{cout, cin, k, k}, cin * k * k, rng);
  if (weight_scale != 1.0) {
    double* p = w.mutable_data();
    for (int64_t i = 0; i < w.numel(); ++i) p[i] *= weight_scale;
  }
  ps.add(prefix + ".w", std::move(w));
  ps.add(prefix + ".b", Tensor::zeros(Shape{cout}));
}

void init_conv_transpose(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout,
                         Rng& rng) {
  // Each output pixel receives exactly one tap per input channel.
  ps.add(prefix + ".w", kaiming_init(Shape{cin, cout, 2, 2}, cin, rng));
  ps.add(prefix + ".b", Tensor::zeros(Shape{cout}));
}

void init_group_norm(ParamStore& ps, const std::string& prefix, int64_t channels) {
  ps.add(prefix + ".g", Tensor::ones(Shape{channels}));
  ps.add(prefix + ".be", Tensor::zeros(Shape{channels}));
}

void init_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng) {
  ps.add(prefix + ".w", kaiming_init(Shape{out, in}, in, rng));
  ps.add(prefix + ".b", Tensor::zeros(Shape{out}));
}

void init_attention(ParamStore& ps, const std::string& prefix, int64_t c, Rng& rng) {
  ps.add(prefix + ".wq", kaiming_init(Shape{c, c}, c, rng));
  ps.add(prefix + ".wk", kaiming_init(Shape{c, c}, c, rng));
  ps.add(prefix + ".wv", kaiming_init(Shape{c, c}, c, rng));
  ps.add(prefix + ".wo", kaiming_init(Shape{c, c}, c, rng));
}

Tensor conv_fwd(Tape& tp, const ParamView& pv, const std::string& prefix, const Tensor& x,
                int stride, int padding) {
  return conv2d(tp, x, pv[prefix + ".w"], pv[prefix + ".b"], stride, padding);
}

Tensor conv_transpose_fwd(Tape& tp, const ParamView& pv, const std::string& prefix,
                          const Tensor& x) {
  return conv_transpose2d(tp, x, pv[prefix + ".w"], pv[prefix + ".b"], 2);
}

Tensor group_norm_fwd(Tape& tp, const ParamView& pv, const std::string& prefix, const Tensor& x,
                      int groups) {
  return group_norm(tp, x, groups, pv[prefix + ".g"], pv[prefix + ".be"]);
}

Tensor linear_fwd(Tape& tp, const ParamView& pv, const std::string& prefix, const Tensor& x) {
  return linear(tp, x, pv[prefix + ".w"], pv[prefix + ".b"]);
}

Tensor attention_fwd(Tape& tp, const ParamView& pv, const std::string& prefix, const Tensor& x) {
  return self_attention(tp, x, pv[prefix + ".wq"], pv[prefix + ".wk"], pv[prefix + ".wv"],
                        pv[prefix + ".wo"]);
}

Tensor as_nchw(const Tensor& img) {
  require(img.shape().rank() == 2, "as_nchw: (H,W) image expected");
  return Tensor::from(Shape{1, 1, img.shape().dim(0), img.shape().dim(1)}, img.vec());
}

Tensor as_image(const Tensor& t) {
  require(t.shape().rank() == 4 && t.shape().dim(0) == 1 && t.shape().dim(1) == 1,
          "as_image: (1,1,H,W) tensor expected");
  return Tensor::from(Shape{t.shape().dim(2), t.shape().dim(3)}, t.vec());
}

Tensor to_nchw(Tape& tp, const Tensor& t) {
  if (t.shape().rank() == 4) return t;
  require(t.shape().rank() == 2, "to_nchw: (H,W) or (B,C,H,W) tensor expected");
  Shape s{1, 1, t.shape().dim(0), t.shape().dim(1)};
  if (t.on_tape(tp) || t.requires_grad()) return reshape(tp, t, s);
  return as_nchw(t);
}

}  // namespace dmm

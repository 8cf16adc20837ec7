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

#include "dmm/morphing.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace dmm {

double FlowField::mean_abs() const {
  double acc = 0.0;
  for (int64_t i = 0; i < field.numel(); ++i) acc += std::fabs(field.at(i));
  return acc / static_cast<double>(field.numel());
}

FlowField scale_flow(const FlowField& phi, double eta) {
  require(eta >= 0.0 && eta <= 1.0, "scale_flow: eta out of [0,1]");
  std::vector<double> v(static_cast<size_t>(phi.field.numel()));
  for (int64_t i = 0; i < phi.field.numel(); ++i) v[i] = eta * phi.field.at(i);
  return FlowField(Tensor::from(phi.field.shape(), std::move(v)));
}

Tensor scale_flow(Tape& tp, const Tensor& phi, double eta) {
  require(eta >= 0.0 && eta <= 1.0, "scale_flow: eta out of [0,1]");
  return scale(tp, phi, eta);
}

Tensor warp(const Tensor& x, const FlowField& phi) {
  require(x.shape().rank() == 2, "warp: (H,W) image expected");
  require(phi.height() == x.shape().dim(0) && phi.width() == x.shape().dim(1),
          "warp: shape mismatch");
  Tape tp;
  return warp(tp, x.detached(), phi.field.detached());
}

Tensor ncc_loss(Tape& tp, const Tensor& a, const Tensor& b, double eps) {
  require(a.shape() == b.shape(), "ncc_loss: shape mismatch");
  int64_t n = a.numel();
  require(n > 0, "ncc_loss: empty tensor");
  double dn = static_cast<double>(n);
  // ZNCC from raw sums: S_ab - N a_mean b_mean over the centered norms.
  Tensor ma = mean(tp, a);
  Tensor mb = mean(tp, b);
  Tensor s_ab = sub(tp, sum(tp, mul(tp, a, b)), scale(tp, mul(tp, ma, mb), dn));
  Tensor s_aa = sub(tp, sum(tp, square(tp, a)), scale(tp, square(tp, ma), dn));
  Tensor s_bb = sub(tp, sum(tp, square(tp, b)), scale(tp, square(tp, mb), dn));
  // Rounding can push a zero-variance product slightly negative; the eps
  // guard must still see a non-negative radicand.
  Tensor prod = mul(tp, s_aa, s_bb);
  Tensor prod_pos = scale(tp, add(tp, prod, abs(tp, prod)), 0.5);
  Tensor den = sqrt(tp, add(tp, prod_pos, Tensor::scalar(eps)));
  Tensor zncc = div(tp, s_ab, den);
  return sub(tp, Tensor::scalar(1.0), zncc);
}

double ncc_loss(const Tensor& a, const Tensor& b, double eps) {
  Tape tp;
  return ncc_loss(tp, a.detached(), b.detached(), eps).at(0);
}

Tensor ig_loss(Tape& tp, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "ig_loss: shape mismatch");
  int r = a.shape().rank();
  require(r >= 2 && a.shape().dim(r - 1) >= 2 && a.shape().dim(r - 2) >= 2,
          "ig_loss: image smaller than 2x2");
  Tensor tx = mean(tp, abs(tp, sub(tp, diff_x(tp, a), diff_x(tp, b))));
  Tensor ty = mean(tp, abs(tp, sub(tp, diff_y(tp, a), diff_y(tp, b))));
  return add(tp, tx, ty);
}

double ig_loss(const Tensor& a, const Tensor& b) {
  Tape tp;
  return ig_loss(tp, a.detached(), b.detached()).at(0);
}

Tensor morph_loss(Tape& tp, const Tensor& warped_full, const Tensor& x_t_img) {
  return add(tp, ncc_loss(tp, warped_full, x_t_img), ig_loss(tp, warped_full, x_t_img));
}

double morph_loss(const Tensor& warped_full, const Tensor& x_t_img) {
  Tape tp;
  return morph_loss(tp, warped_full.detached(), x_t_img.detached()).at(0);
}

// -----------------------------------------------------------------------------
// RegNet
// -----------------------------------------------------------------------------

RegNet::RegNet(const RegConfig& cfg, Rng& rng) : cfg_(cfg) {
  require(cfg.levels >= 1, "RegNet: levels must be >= 1");
  auto ch = [&](int level) {
    // base, 2x, 4x, then capped at 4x
    return cfg.base_channels << std::min(level, 2);
  };
  for (int l = 0; l <= cfg.levels; ++l)
    require(ch(l) % cfg.groups == 0, "RegNet: channels not divisible by groups");

  init_conv(params_, "in.conv", 2, ch(0), 3, rng);
  for (int l = 0; l < cfg.levels; ++l) {
    init_conv(params_, "down" + std::to_string(l), ch(l), ch(l + 1), 3, rng);
    init_group_norm(params_, "down" + std::to_string(l) + ".gn", ch(l + 1));
  }
  init_conv(params_, "bottom", ch(cfg.levels), ch(cfg.levels), 3, rng);
  init_group_norm(params_, "bottom.gn", ch(cfg.levels));
  for (int l = cfg.levels - 1; l >= 0; --l) {
    init_conv_transpose(params_, "up" + std::to_string(l), ch(l + 1), ch(l), rng);
    init_conv(params_, "dec" + std::to_string(l), ch(l) + ch(l), ch(l), 3, rng);
    init_group_norm(params_, "dec" + std::to_string(l) + ".gn", ch(l));
  }
  init_conv(params_, "refine", ch(0), ch(0), 3, rng);
  init_conv(params_, "out", ch(0), 2, 3, rng, cfg.output_scale);
}

Tensor RegNet::forward(Tape& tp, const ParamView& pv, const Tensor& x_s,
                       const Tensor& n_hat) const {
  require(initialized(), "RegNet: uninitialized parameters");
  // Inputs arrive as plain (H,W) images or as in-graph (1,1,H,W) tensors
  // (the predicted noise keeps its tape binding so gradients reach the
  // denoiser).
  Tensor xs4 = to_nchw(tp, x_s);
  Tensor nh4 = to_nchw(tp, n_hat);
  require(xs4.shape().rank() == 4 && xs4.shape().dim(1) == 1 && xs4.shape() == nh4.shape(),
          "RegNet: x_s and n_hat must share one single-channel shape");
  auto ch = [&](int level) { return cfg_.base_channels << std::min(level, 2); };

  Tensor h = concat_channels(tp, {xs4, nh4});
  h = conv_fwd(tp, pv, "in.conv", h, 1, 1);
  h = swish(tp, h);
  std::vector<Tensor> skips;
  for (int l = 0; l < cfg_.levels; ++l) {
    skips.push_back(h);
    h = conv_fwd(tp, pv, "down" + std::to_string(l), h, 2, 1);
    h = group_norm_fwd(tp, pv, "down" + std::to_string(l) + ".gn", h, cfg_.groups);
    h = swish(tp, h);
  }
  h = conv_fwd(tp, pv, "bottom", h, 1, 1);
  h = group_norm_fwd(tp, pv, "bottom.gn", h, cfg_.groups);
  h = swish(tp, h);
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    h = conv_transpose_fwd(tp, pv, "up" + std::to_string(l), h);
    h = concat_channels(tp, {h, skips[static_cast<size_t>(l)]});
    h = conv_fwd(tp, pv, "dec" + std::to_string(l), h, 1, 1);
    h = group_norm_fwd(tp, pv, "dec" + std::to_string(l) + ".gn", h, cfg_.groups);
    h = swish(tp, h);
    (void)ch;
  }
  h = conv_fwd(tp, pv, "refine", h, 1, 1);
  h = swish(tp, h);
  return conv_fwd(tp, pv, "out", h, 1, 1);
}

FlowField predict_flow(const RegNet& regnet, const Tensor& x_s, const Tensor& n_hat) {
  Tape tape;
  ParamView pv(tape, regnet.params(), /*trainable=*/false);
  Tensor out = regnet.forward(tape, pv, x_s, n_hat);
  return FlowField(Tensor::from(Shape{2, out.shape().dim(2), out.shape().dim(3)}, out.vec()));
}

// -----------------------------------------------------------------------------
// DMMF flow-field file format
// -----------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

float get_f32(std::istream& is) {
  uint32_t u = get_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace

void write_flow_field(const std::string& path, const FlowField& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_flow_field: cannot open " + path);
  os.write("DMMF", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<uint32_t>(f.height()));
  put_u32(os, static_cast<uint32_t>(f.width()));
  for (int64_t i = 0; i < f.field.numel(); ++i)
    put_f32(os, static_cast<float>(f.field.at(i)));
  if (!os) throw IoError("write_flow_field: write failed for " + path);
}

FlowField read_flow_field(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_flow_field: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DMMF", 4) != 0)
    throw IoError("read_flow_field: bad magic in " + path);
  uint32_t version = get_u32(is);
  if (version != 1) throw IoError("read_flow_field: unsupported version in " + path);
  uint32_t h = get_u32(is), w = get_u32(is);
  std::vector<double> v(static_cast<size_t>(2) * h * w);
  for (double& x : v) x = static_cast<double>(get_f32(is));
  if (!is) throw IoError("read_flow_field: truncated file " + path);
  return FlowField(Tensor::from(Shape{2, h, w}, std::move(v)));
}

}  // namespace dmm

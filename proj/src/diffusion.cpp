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

#include "dmm/diffusion.hpp"

#include <cmath>

namespace dmm {

NoiseSchedule make_schedule(int64_t t_max, double beta_start, double beta_end) {
  require(t_max >= 1, "make_schedule: t_max must be >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.t_max = t_max;
  s.beta.resize(t_max);
  s.alpha.resize(t_max);
  s.alpha_bar.resize(t_max);
  double prod = 1.0;
  for (int64_t i = 0; i < t_max; ++i) {
    double f = t_max == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(t_max - 1);
    s.beta[i] = beta_start + f * (beta_end - beta_start);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

Tensor forward_perturb(const Tensor& x, int64_t t, const Tensor& n, const NoiseSchedule& s) {
  require(n.shape() == x.shape(), "forward_perturb: shape mismatch");
  double abar = s.alpha_bar_at(t);
  double a = std::sqrt(abar);
  double b = std::sqrt(1.0 - abar);
  std::vector<double> out(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = a * x.at(i) + b * n.at(i);
  return Tensor::from(x.shape(), std::move(out));
}

Tensor iterated_forward(const Tensor& x, int64_t t, Rng& rng, const NoiseSchedule& s) {
  require(t >= 0 && t < s.t_max, "iterated_forward: t out of range");
  std::vector<double> cur = x.vec();
  for (int64_t i = 0; i < t; ++i) {
    double a = std::sqrt(1.0 - s.beta[i]);
    double b = std::sqrt(s.beta[i]);
    for (double& v : cur) v = a * v + b * rng.gaussian();
  }
  return Tensor::from(x.shape(), std::move(cur));
}

Tensor time_embed(int64_t t, int64_t dim) {
  require(dim >= 2 && dim % 2 == 0, "time_embed: dim must be even");
  std::vector<double> v(static_cast<size_t>(dim));
  for (int64_t k = 0; k < dim / 2; ++k) {
    double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
    double a = static_cast<double>(t) * freq;
    v[2 * k] = std::sin(a);
    v[2 * k + 1] = std::cos(a);
  }
  return Tensor::from(Shape{1, dim}, std::move(v));
}

Tensor diffusion_loss(Tape& tp, const Tensor& n, const Tensor& n_hat) {
  require(n.shape() == n_hat.shape(), "diffusion_loss: shape mismatch");
  return mean(tp, square(tp, sub(tp, n, n_hat)));
}

double diffusion_loss(const Tensor& n, const Tensor& n_hat) {
  Tape tp;
  return diffusion_loss(tp, n.detached(), n_hat.detached()).at(0);
}

namespace {

struct ResBlockSpec {
  std::string prefix;
  int64_t cin, cout;
};

void init_res_block(ParamStore& ps, const ResBlockSpec& rb, int64_t temb_dim, Rng& rng) {
  init_group_norm(ps, rb.prefix + ".gn1", rb.cin);
  init_conv(ps, rb.prefix + ".conv1", rb.cin, rb.cout, 3, rng);
  init_linear(ps, rb.prefix + ".temb", temb_dim, rb.cout, rng);
  init_group_norm(ps, rb.prefix + ".gn2", rb.cout);
  init_conv(ps, rb.prefix + ".conv2", rb.cout, rb.cout, 3, rng);
  if (rb.cin != rb.cout) init_conv(ps, rb.prefix + ".skip", rb.cin, rb.cout, 1, rng);
}

Tensor res_block_fwd(Tape& tp, const ParamView& pv, const ResBlockSpec& rb, const Tensor& x,
                     const Tensor& temb, int groups, double dropout_p, bool training,
                     Rng& rng) {
  Tensor h = group_norm_fwd(tp, pv, rb.prefix + ".gn1", x, groups);
  h = swish(tp, h);
  h = conv_fwd(tp, pv, rb.prefix + ".conv1", h, 1, 1);
  Tensor e = linear_fwd(tp, pv, rb.prefix + ".temb", swish(tp, temb));
  h = channel_bias(tp, h, reshape(tp, e, Shape{rb.cout}));
  h = group_norm_fwd(tp, pv, rb.prefix + ".gn2", h, groups);
  h = swish(tp, h);
  if (dropout_p > 0.0) h = dropout(tp, h, dropout_p, training, rng);
  h = conv_fwd(tp, pv, rb.prefix + ".conv2", h, 1, 1);
  Tensor skip = rb.cin == rb.cout ? x : conv_fwd(tp, pv, rb.prefix + ".skip", x, 1, 0);
  return add(tp, h, skip);
}

}  // namespace

DenoiserNet::DenoiserNet(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
  require(cfg.levels >= 1 && cfg.res_blocks >= 1, "DenoiserNet: bad level/block counts");
  require(cfg.temb_dim % 2 == 0, "DenoiserNet: temb_dim must be even");
  auto ch = [&](int level) { return cfg.base_channels << level; };
  for (int l = 0; l < cfg.levels; ++l)
    require(ch(l) % cfg.groups == 0, "DenoiserNet: channels not divisible by groups");

  init_linear(params_, "temb.l0", cfg.temb_dim, cfg.temb_dim, rng);
  init_linear(params_, "temb.l1", cfg.temb_dim, cfg.temb_dim, rng);
  init_conv(params_, "stem", 3, ch(0), 3, rng);
  int64_t cur = ch(0);
  for (int l = 0; l < cfg.levels; ++l) {
    for (int r = 0; r < cfg.res_blocks; ++r) {
      init_res_block(params_, {"enc" + std::to_string(l) + ".res" + std::to_string(r), cur, ch(l)},
                     cfg.temb_dim, rng);
      cur = ch(l);
    }
    if (l + 1 < cfg.levels) init_conv(params_, "down" + std::to_string(l), cur, cur, 3, rng);
  }
  init_res_block(params_, {"mid.res0", cur, cur}, cfg.temb_dim, rng);
  if (cfg.middle_attention) init_attention(params_, "mid.attn", cur, rng);
  init_res_block(params_, {"mid.res1", cur, cur}, cfg.temb_dim, rng);
  for (int l = cfg.levels - 1; l >= 0; --l) {
    int64_t skip_c = ch(l);
    for (int r = 0; r < cfg.res_blocks; ++r) {
      int64_t cin = r == 0 ? cur + skip_c : ch(l);
      init_res_block(params_, {"dec" + std::to_string(l) + ".res" + std::to_string(r), cin, ch(l)},
                     cfg.temb_dim, rng);
      cur = ch(l);
    }
    if (l > 0) init_conv_transpose(params_, "up" + std::to_string(l), cur, ch(l - 1), rng);
    if (l > 0) cur = ch(l - 1);
  }
  init_group_norm(params_, "head.gn", ch(0));
  init_conv(params_, "head.conv", ch(0), 1, 3, rng);
}

Tensor DenoiserNet::forward(Tape& tp, const ParamView& pv, const Tensor& x_s,
                            const Tensor& x_t_img, const Tensor& x_t, int64_t t, bool training,
                            Rng& rng) const {
  require(initialized(), "DenoiserNet: uninitialized parameters");
  require(x_s.shape().rank() == 2, "DenoiserNet: images must be (H,W)");
  require(x_s.shape() == x_t_img.shape() && x_s.shape() == x_t.shape(),
          "DenoiserNet: input images must share one shape");
  auto ch = [&](int level) { return cfg_.base_channels << level; };

  Tensor temb = time_embed(t, cfg_.temb_dim);
  temb = linear_fwd(tp, pv, "temb.l0", temb);
  temb = swish(tp, temb);
  temb = linear_fwd(tp, pv, "temb.l1", temb);

  Tensor h = concat_channels(tp, {as_nchw(x_s), as_nchw(x_t_img), as_nchw(x_t)});
  h = conv_fwd(tp, pv, "stem", h, 1, 1);
  std::vector<Tensor> skips;
  int64_t cur = ch(0);
  for (int l = 0; l < cfg_.levels; ++l) {
    for (int r = 0; r < cfg_.res_blocks; ++r) {
      h = res_block_fwd(tp, pv, {"enc" + std::to_string(l) + ".res" + std::to_string(r), cur, ch(l)},
                        h, temb, cfg_.groups, cfg_.dropout, training, rng);
      cur = ch(l);
    }
    skips.push_back(h);
    if (l + 1 < cfg_.levels) h = conv_fwd(tp, pv, "down" + std::to_string(l), h, 2, 1);
  }
  h = res_block_fwd(tp, pv, {"mid.res0", cur, cur}, h, temb, cfg_.groups, cfg_.dropout, training,
                    rng);
  if (cfg_.middle_attention) h = attention_fwd(tp, pv, "mid.attn", h);
  h = res_block_fwd(tp, pv, {"mid.res1", cur, cur}, h, temb, cfg_.groups, cfg_.dropout, training,
                    rng);
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    h = concat_channels(tp, {h, skips[static_cast<size_t>(l)]});
    int64_t cin = cur + ch(l);
    for (int r = 0; r < cfg_.res_blocks; ++r) {
      h = res_block_fwd(tp, pv, {"dec" + std::to_string(l) + ".res" + std::to_string(r), cin, ch(l)},
                        h, temb, cfg_.groups, cfg_.dropout, training, rng);
      cin = ch(l);
      cur = ch(l);
    }
    if (l > 0) {
      h = conv_transpose_fwd(tp, pv, "up" + std::to_string(l), h);
      cur = ch(l - 1);
    }
  }
  h = group_norm_fwd(tp, pv, "head.gn", h, cfg_.groups);
  h = swish(tp, h);
  h = conv_fwd(tp, pv, "head.conv", h, 1, 1);
  return h;
}

Tensor predict_noise(const DenoiserNet& denoiser, const Tensor& x_s, const Tensor& x_t_img,
                     const Tensor& x_t, int64_t t) {
  Tape tape;
  ParamView pv(tape, denoiser.params(), /*trainable=*/false);
  Rng unused(0);
  Tensor out = denoiser.forward(tape, pv, x_s, x_t_img, x_t, t, /*training=*/false, unused);
  return as_image(out);
}

}  // namespace dmm

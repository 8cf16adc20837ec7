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

#include <doctest.h>

#include <cmath>

#include "dmm/diffusion.hpp"

using namespace dmm;

TEST_CASE("make_schedule closed forms") {
  NoiseSchedule s1 = make_schedule(1, 0.5, 0.5);
  CHECK(s1.alpha_bar.size() == 1);
  CHECK(s1.alpha_bar[0] == doctest::Approx(0.5).epsilon(1e-15));

  NoiseSchedule s2 = make_schedule(2, 0.5, 0.5);
  CHECK(s2.alpha_bar[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s2.alpha_bar[1] == doctest::Approx(0.25).epsilon(1e-15));

  // full-scale setting stays legal
  NoiseSchedule big = make_schedule(2000, 1e-4, 0.02);
  CHECK(big.t_max == 2000);

  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), Error);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), Error);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), Error);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 1.0), Error);
}

TEST_CASE("alpha_bar is a strictly decreasing exact cumulative product") {
  for (uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    double b0 = rng.uniform(1e-5, 0.01);
    double b1 = rng.uniform(b0, 0.2);
    NoiseSchedule s = make_schedule(50, b0, b1);
    double prod = 1.0;
    for (int64_t i = 0; i < s.t_max; ++i) {
      CHECK(s.beta[i] > 0.0);
      CHECK(s.beta[i] < 1.0);
      prod *= s.alpha[i];
      CHECK(s.alpha_bar[i] == prod);  // bit-exact running product
      if (i > 0) CHECK(s.alpha_bar[i] < s.alpha_bar[i - 1]);
    }
  }
}

TEST_CASE("forward_perturb basics") {
  NoiseSchedule s = make_schedule(200, 1e-4, 0.02);
  Rng rng(11);
  Tensor x = rand_uniform(Shape{4, 4}, rng, -1.0, 1.0);
  Tensor zero_n = Tensor::zeros(x.shape());

  // n = 0 -> sqrt(abar_t) x
  Tensor y = forward_perturb(x, 10, zero_n, s);
  double a = std::sqrt(s.alpha_bar_at(10));
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.at(i) == doctest::Approx(a * x.at(i)).epsilon(1e-15));

  // t = 0: empty product, x unchanged (abar -> 1 limit)
  Tensor y0 = forward_perturb(x, 0, zero_n, s);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y0.at(i) == x.at(i));

  CHECK_THROWS_AS(forward_perturb(x, 200, zero_n, s), Error);
  CHECK_THROWS_AS(forward_perturb(x, -1, zero_n, s), Error);
  CHECK_THROWS_AS(forward_perturb(x, 3, Tensor::zeros(Shape{2, 2}), s), Error);
}

TEST_CASE("iterated_forward trivial cases") {
  NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  Rng rng(12);
  Tensor x = rand_uniform(Shape{3, 3}, rng, -1.0, 1.0);
  Tensor y = iterated_forward(x, 0, rng, s);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  // tiny-beta limit: stays close to x
  NoiseSchedule tiny = make_schedule(10, 1e-12, 1e-12);
  Tensor z = iterated_forward(x, 9, rng, tiny);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(z.at(i) == doctest::Approx(x.at(i)).epsilon(1e-4));
}

TEST_CASE("closed-form and iterated forward agree in first two moments") {
  // Monte-Carlo oracle (reduced draw count here; the acceptance suite runs
  // the full 1e5-draw version at t in {1, 50, 199}).
  const int64_t kDraws = 20000;
  NoiseSchedule s = make_schedule(200, 1e-4, 0.02);
  Tensor x = Tensor::from(Shape{1, 2}, {0.8, -0.4});
  int64_t t = 50;

  Rng rng_a(100), rng_b(200);
  double sum_a = 0, sq_a = 0, sum_b = 0, sq_b = 0;
  int64_t n_samples = kDraws * x.numel();
  for (int64_t k = 0; k < kDraws; ++k) {
    Tensor n = randn(x.shape(), rng_a);
    Tensor ya = forward_perturb(x, t, n, s);
    Tensor yb = iterated_forward(x, t, rng_b, s);
    for (int64_t i = 0; i < x.numel(); ++i) {
      double da = ya.at(i) - std::sqrt(s.alpha_bar_at(t)) * x.at(i);
      double db = yb.at(i) - std::sqrt(s.alpha_bar_at(t)) * x.at(i);
      sum_a += da;
      sq_a += da * da;
      sum_b += db;
      sq_b += db * db;
    }
  }
  double n_f = static_cast<double>(n_samples);
  double mean_a = sum_a / n_f, mean_b = sum_b / n_f;
  double var_a = sq_a / n_f - mean_a * mean_a;
  double var_b = sq_b / n_f - mean_b * mean_b;
  double se_mean = std::sqrt(var_a / n_f + var_b / n_f);
  double se_var = std::sqrt(2.0 / (n_f - 1.0)) * std::max(var_a, var_b) * std::sqrt(2.0);
  CHECK(std::fabs(mean_a - mean_b) < 3.0 * se_mean);
  CHECK(std::fabs(var_a - var_b) < 3.0 * se_var);
  // both variances near the closed-form value
  CHECK(var_a == doctest::Approx(1.0 - s.alpha_bar_at(t)).epsilon(0.05));
}

TEST_CASE("time_embed") {
  Tensor e0 = time_embed(0, 8);
  for (int64_t k = 0; k < 4; ++k) {
    CHECK(e0.at(2 * k) == 0.0);
    CHECK(e0.at(2 * k + 1) == 1.0);
  }
  double norm = 0.0;
  for (int64_t i = 0; i < 8; ++i) norm += e0.at(i) * e0.at(i);
  CHECK(std::sqrt(norm) == doctest::Approx(std::sqrt(4.0)).epsilon(1e-12));

  // direct-evaluation oracle: t=1 and t=2 differ in every sin component
  Tensor e1 = time_embed(1, 8), e2 = time_embed(2, 8);
  for (int64_t k = 0; k < 4; ++k) {
    double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / 8.0);
    CHECK(e1.at(2 * k) == doctest::Approx(std::sin(freq)).epsilon(1e-12));
    CHECK(e2.at(2 * k) == doctest::Approx(std::sin(2 * freq)).epsilon(1e-12));
    CHECK(e1.at(2 * k) != e2.at(2 * k));
  }
  CHECK_THROWS_AS(time_embed(1, 7), Error);
}

TEST_CASE("diffusion_loss closed forms and oracle") {
  Rng rng(13);
  Tensor n = randn(Shape{3, 4}, rng);
  CHECK(diffusion_loss(n, n) == 0.0);

  Tensor n1 = n;
  {
    double* p = n1.mutable_data();
    for (int64_t i = 0; i < n1.numel(); ++i) p[i] += 1.0;
  }
  CHECK(diffusion_loss(n, n1) == doctest::Approx(1.0).epsilon(1e-12));

  // scalar accumulation oracle
  Tensor a = randn(Shape{5, 5}, rng), b = randn(Shape{5, 5}, rng);
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.at(i) - b.at(i);
    acc += d * d;
  }
  acc /= static_cast<double>(a.numel());
  CHECK(diffusion_loss(a, b) == doctest::Approx(acc).epsilon(1e-12));

  Tape tp;
  CHECK_THROWS_AS(diffusion_loss(tp, a.detached(), randn(Shape{2, 2}, rng)), Error);
}

TEST_CASE("denoiser contracts on a tiny config") {
  DenoiserConfig cfg;
  cfg.base_channels = 8;
  cfg.levels = 2;
  cfg.res_blocks = 1;
  cfg.temb_dim = 16;
  cfg.groups = 4;
  Rng init(21);
  DenoiserNet net(cfg, init);

  Rng rng(22);
  Tensor x_s = rand_uniform(Shape{16, 16}, rng, -1.0, 1.0);
  Tensor x_t_img = rand_uniform(Shape{16, 16}, rng, -1.0, 1.0);
  Tensor x_t = rand_uniform(Shape{16, 16}, rng, -1.0, 1.0);

  Tensor n_hat = predict_noise(net, x_s, x_t_img, x_t, 5);
  CHECK(n_hat.shape() == Shape{16, 16});
  for (int64_t i = 0; i < n_hat.numel(); ++i) CHECK(std::isfinite(n_hat.at(i)));

  // eval-mode determinism: bit-identical repeat
  Tensor again = predict_noise(net, x_s, x_t_img, x_t, 5);
  for (int64_t i = 0; i < n_hat.numel(); ++i) CHECK(n_hat.at(i) == again.at(i));

  CHECK_THROWS_AS(predict_noise(net, x_s, x_t_img, rand_uniform(Shape{8, 8}, rng), 5), Error);
  DenoiserNet empty;
  CHECK_THROWS_AS(predict_noise(empty, x_s, x_t_img, x_t, 5), Error);
}

TEST_CASE("diffusion loss backward reaches every denoiser parameter") {
  DenoiserConfig cfg;
  cfg.base_channels = 8;
  cfg.levels = 2;
  cfg.res_blocks = 1;
  cfg.temb_dim = 16;
  cfg.groups = 4;
  Rng init(31);
  DenoiserNet net(cfg, init);

  Rng rng(32);
  Tensor x_s = rand_uniform(Shape{8, 8}, rng, -1.0, 1.0);
  Tensor x_t_img = rand_uniform(Shape{8, 8}, rng, -1.0, 1.0);
  Tensor n = randn(Shape{8, 8}, rng);
  NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
  Tensor x_t = forward_perturb(x_t_img, 7, n, s);

  Tape tape;
  ParamView pv(tape, net.params(), /*trainable=*/true);
  Rng drop(33);
  Tensor n_hat = net.forward(tape, pv, x_s, x_t_img, x_t, 7, true, drop);
  Tensor loss = diffusion_loss(tape, as_nchw(n), n_hat);
  tape.backward(loss);
  int64_t nonzero_params = 0;
  for (const auto& [name, leaf] : pv.bound()) {
    Tensor g = tape.grad_of(leaf);
    double s_abs = 0.0;
    for (int64_t i = 0; i < g.numel(); ++i) s_abs += std::fabs(g.at(i));
    if (s_abs > 0.0) ++nonzero_params;
  }
  CHECK(nonzero_params == static_cast<int64_t>(net.params().map().size()));
}

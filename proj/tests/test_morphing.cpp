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
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dmm/morphing.hpp"
#include "support/gradcheck.hpp"

using namespace dmm;
using dmm::testing::grad_check;

namespace {

Tensor randu(const Shape& s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return rand_uniform(s, rng, lo, hi);
}

FlowField const_flow(int64_t h, int64_t w, double dx, double dy) {
  std::vector<double> v(static_cast<size_t>(2 * h * w));
  for (int64_t i = 0; i < h * w; ++i) {
    v[i] = dx;
    v[h * w + i] = dy;
  }
  return FlowField(Tensor::from(Shape{2, h, w}, std::move(v)));
}

}  // namespace

TEST_CASE("scale_flow") {
  FlowField phi = const_flow(3, 3, 1.5, -0.5);
  CHECK(scale_flow(phi, 0.0).mean_abs() == 0.0);
  FlowField full = scale_flow(phi, 1.0);
  for (int64_t i = 0; i < full.field.numel(); ++i) CHECK(full.field.at(i) == phi.field.at(i));
  FlowField half = scale_flow(phi, 0.5);
  for (int64_t i = 0; i < half.field.numel(); ++i)
    CHECK(half.field.at(i) == 0.5 * phi.field.at(i));
  CHECK_THROWS_AS(scale_flow(phi, 1.5), Error);
  CHECK_THROWS_AS(scale_flow(phi, -0.1), Error);
}

TEST_CASE("warp identity is bit-exact") {
  Tensor x = randu(Shape{5, 7}, 41);
  Tensor y = warp(x, FlowField::zero(5, 7));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("warp hand oracles") {
  {
    // unit shift right with border clamp
    Tensor x = Tensor::from(Shape{2, 2}, {1, 2, 3, 4});
    Tensor y = warp(x, const_flow(2, 2, 1.0, 0.0));
    CHECK(y.at(0, 0) == 2.0);
    CHECK(y.at(0, 1) == 2.0);
    CHECK(y.at(1, 0) == 4.0);
    CHECK(y.at(1, 1) == 4.0);
  }
  {
    // half-pixel bilinear + clamp
    Tensor x = Tensor::from(Shape{1, 2}, {0, 1});
    Tensor y = warp(x, const_flow(1, 2, 0.5, 0.0));
    CHECK(y.at(0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-15));
  }
  {
    // dy moves rows
    Tensor x = Tensor::from(Shape{2, 1}, {0, 1});
    Tensor y = warp(x, const_flow(2, 1, 0.0, 0.5));
    CHECK(y.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  }
  {
    Tape tp;
    CHECK_THROWS_AS(warp(tp, Tensor::zeros(Shape{2, 2}), Tensor::zeros(Shape{2, 3, 3})), Error);
  }
}

TEST_CASE("warp gradient vs finite differences (off integer coordinates)") {
  // keep sampling points away from bilinear kinks
  Tensor x = randu(Shape{5, 5}, 42);
  Tensor phi = Tensor::from(Shape{2, 5, 5}, std::vector<double>(50, 0.0));
  {
    Rng rng(43);
    double* p = phi.mutable_data();
    for (int64_t i = 0; i < 50; ++i) p[i] = rng.uniform(0.2, 0.45);
  }
  auto fn = [](Tape& tp, const std::vector<Tensor>& in) {
    return mean(tp, square(tp, warp(tp, in[0], in[1])));
  };
  auto res = grad_check(fn, {x, phi}, 1e-5);
  CHECK_MESSAGE(res.max_rel_err < 1e-3, res.worst);
}

TEST_CASE("ncc_loss closed forms") {
  Tensor a = randu(Shape{6, 6}, 44);
  CHECK(ncc_loss(a, a) == doctest::Approx(0.0).epsilon(1e-6));

  // positive-affine invariance of ZNCC
  Tensor b = a;
  {
    double* p = b.mutable_data();
    for (int64_t i = 0; i < b.numel(); ++i) p[i] = 2.0 * p[i] + 3.0;
  }
  CHECK(ncc_loss(a, b) == doctest::Approx(0.0).epsilon(1e-6));

  Tensor neg = a;
  {
    double* p = neg.mutable_data();
    for (int64_t i = 0; i < neg.numel(); ++i) p[i] = -p[i];
  }
  CHECK(ncc_loss(a, neg) == doctest::Approx(2.0).epsilon(1e-6));

  Tape tp;
  CHECK_THROWS_AS(ncc_loss(tp, a.detached(), Tensor::zeros(Shape{2, 2})), Error);
}

TEST_CASE("ncc_loss stays within [0, 2] on random pairs") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor a = randu(Shape{8, 8}, 100 + seed);
    Tensor b = randu(Shape{8, 8}, 200 + seed);
    double v = ncc_loss(a, b);
    CHECK(v >= -1e-6);
    CHECK(v <= 2.0 + 1e-6);
  }
}

TEST_CASE("ig_loss closed forms and pinned normalization") {
  Tensor a = randu(Shape{5, 5}, 45);
  CHECK(ig_loss(a, a) == 0.0);

  // distinct constants: both gradient fields vanish
  CHECK(ig_loss(Tensor::full(Shape{4, 4}, 0.2), Tensor::full(Shape{4, 4}, -0.7)) == 0.0);

  // hand finite-difference oracle: a = [[0,1],[0,1]], b = 0
  // d/dx wise |1-0| on the two rows -> mean 1; d/dy terms all zero -> 0
  Tensor ax = Tensor::from(Shape{2, 2}, {0, 1, 0, 1});
  Tensor bx = Tensor::zeros(Shape{2, 2});
  CHECK(ig_loss(ax, bx) == doctest::Approx(1.0).epsilon(1e-12));

  Tape tp;
  CHECK_THROWS_AS(ig_loss(tp, Tensor::zeros(Shape{1, 4}), Tensor::zeros(Shape{1, 4})), Error);
}

TEST_CASE("morph_loss composition") {
  Tensor t = randu(Shape{6, 6}, 46);
  CHECK(morph_loss(t, t) == doctest::Approx(0.0).epsilon(1e-6));

  Tensor w = randu(Shape{6, 6}, 47);
  double recomposed = ncc_loss(w, t) + ig_loss(w, t);
  CHECK(morph_loss(w, t) == doctest::Approx(recomposed).epsilon(1e-10));
}

TEST_CASE("flow scaling properties") {
  // mean |phi_eta| = eta * mean |phi| exactly for representable eta
  Rng rng(48);
  FlowField phi(rand_uniform(Shape{2, 6, 6}, rng, -3.0, 3.0));
  for (double eta : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    FlowField s = scale_flow(phi, eta);
    CHECK(s.mean_abs() == eta * phi.mean_abs());
  }
  // warp endpoints
  Tensor x = randu(Shape{6, 6}, 49);
  Tensor w0 = warp(x, scale_flow(phi, 0.0));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(w0.at(i) == x.at(i));
  Tensor w1 = warp(x, scale_flow(phi, 1.0));
  Tensor w_direct = warp(x, phi);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(w1.at(i) == w_direct.at(i));
}

TEST_CASE("regnet contracts") {
  RegConfig cfg;
  cfg.base_channels = 8;
  cfg.levels = 2;
  cfg.groups = 4;
  Rng init(50);
  RegNet net(cfg, init);

  Tensor x_s = randu(Shape{16, 16}, 51);
  Tensor n_hat = randu(Shape{16, 16}, 52);
  FlowField phi = predict_flow(net, x_s, n_hat);
  CHECK(phi.field.shape() == Shape{2, 16, 16});
  CHECK(all_finite(phi.field.vec()));
  // near-zero output initialization: training starts at identity warp
  CHECK(phi.mean_abs() < 1e-2);
  // eval determinism
  FlowField again = predict_flow(net, x_s, n_hat);
  for (int64_t i = 0; i < phi.field.numel(); ++i)
    CHECK(phi.field.at(i) == again.field.at(i));

  CHECK_THROWS_AS(predict_flow(net, x_s, randu(Shape{8, 8}, 53)), Error);
}

TEST_CASE("flow field file round-trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "dmm_flow_test";
  fs::create_directories(dir);
  std::string path = (dir / "f.dmmf").string();

  Rng rng(54);
  FlowField f(rand_uniform(Shape{2, 5, 4}, rng, -2.0, 2.0));
  write_flow_field(path, f);
  FlowField r = read_flow_field(path);
  CHECK(r.field.shape() == f.field.shape());
  // values round to f32 on disk
  for (int64_t i = 0; i < f.field.numel(); ++i)
    CHECK(r.field.at(i) == static_cast<double>(static_cast<float>(f.field.at(i))));

  // write(read(write(f))) is byte-identical
  std::string path2 = (dir / "f2.dmmf").string();
  write_flow_field(path2, r);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);

  CHECK_THROWS_AS(read_flow_field((dir / "missing.dmmf").string()), IoError);
  fs::remove_all(dir);
}

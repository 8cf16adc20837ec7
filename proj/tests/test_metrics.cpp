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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dmm/metrics.hpp"

using namespace dmm;

namespace {

Tensor randu(const Shape& s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return rand_uniform(s, rng, lo, hi);
}

}  // namespace

TEST_CASE("mse closed forms and loop oracle") {
  Tensor a = randu(Shape{4, 4}, 1);
  CHECK(mse(a, a) == 0.0);

  Tensor b = a;
  {
    double* p = b.mutable_data();
    for (int64_t i = 0; i < b.numel(); ++i) p[i] += 0.1;
  }
  CHECK(mse(a, b) == doctest::Approx(0.01).epsilon(1e-12));

  Tensor c = randu(Shape{4, 4}, 2);
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.at(i) - c.at(i);
    acc += d * d;
  }
  acc /= 16.0;
  CHECK(mse(a, c) == doctest::Approx(acc).epsilon(1e-12));
  CHECK(mse(a, c) == mse(c, a));

  CHECK_THROWS_AS(mse(a, randu(Shape{2, 2}, 3)), Error);
}

TEST_CASE("psnr closed forms") {
  Tensor a = randu(Shape{4, 4}, 4);
  CHECK(std::isinf(psnr(a, a, 1.0)));

  // max 1, mse 0.01 -> 20 dB
  Tensor b = a;
  {
    double* p = b.mutable_data();
    for (int64_t i = 0; i < b.numel(); ++i) p[i] += 0.1;
  }
  CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-9));

  // max 2, constant difference 0.2 -> 10 log10(4 / 0.04) = 20 dB
  Tensor c = a;
  {
    double* p = c.mutable_data();
    for (int64_t i = 0; i < c.numel(); ++i) p[i] += 0.2;
  }
  CHECK(psnr(a, c, 2.0) == doctest::Approx(20.0).epsilon(1e-9));

  CHECK_THROWS_AS(psnr(a, b, 0.0), Error);
}

TEST_CASE("nmse closed forms, mean predictor, asymmetry") {
  Tensor y = randu(Shape{5, 5}, 5);
  CHECK(nmse(y, y) == 0.0);

  double mean_y = 0.0;
  for (int64_t i = 0; i < y.numel(); ++i) mean_y += y.at(i);
  mean_y /= static_cast<double>(y.numel());
  Tensor mean_pred = Tensor::full(y.shape(), mean_y);
  CHECK(nmse(y, mean_pred) == doctest::Approx(1.0).epsilon(1e-9));

  // loop oracle + explicit asymmetry (the normalizer is the real image)
  Tensor s = randu(Shape{5, 5}, 6);
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    num += (y.at(i) - s.at(i)) * (y.at(i) - s.at(i));
    den += (y.at(i) - mean_y) * (y.at(i) - mean_y);
  }
  CHECK(nmse(y, s) == doctest::Approx(num / den).epsilon(1e-12));
  CHECK(nmse(y, s) != nmse(s, y));

  CHECK_THROWS_AS(nmse(Tensor::full(Shape{3, 3}, 0.7), s), Error);
}

TEST_CASE("quantile type-7 against a sort-based oracle") {
  std::vector<double> v = {5, 1, 9, 3, 7};
  // sorted: 1 3 5 7 9; h = 4p
  CHECK(quantile_type7(v, 0.5) == 5.0);
  CHECK(quantile_type7(v, 0.25) == 3.0);
  CHECK(quantile_type7(v, 0.75) == 7.0);
  CHECK(quantile_type7(v, 0.1) == doctest::Approx(1.0 + 0.4 * 2.0).epsilon(1e-12));
  CHECK(quantile_type7({4.0}, 0.5) == 4.0);
  std::vector<double> two = {2.0, 8.0};
  CHECK(quantile_type7(two, 0.5) == 5.0);
}

TEST_CASE("evaluate_run with a unified flow") {
  PairDataset ds = generate_pair_dataset(4, 32, 9, PhantomParams::defaults_for(32));
  FlowField unified = FlowField::zero(32, 32);
  EvalFlowSource src;
  src.unified = &unified;
  EvalResult res = evaluate_run(src, ds);

  CHECK(res.records.size() == 4 * 3);  // pairs x 3 etas
  for (const EvalRecord& r : res.records) {
    if (r.mse > 0.0)
      CHECK(r.psnr_db == doctest::Approx(10.0 * std::log10(4.0 / r.mse)).epsilon(1e-9));
    CHECK(r.nmse >= 0.0);
  }
  // summary medians match an independent sort-based oracle
  for (double eta : {0.25, 0.5, 0.75}) {
    std::vector<double> ps;
    for (const EvalRecord& r : res.records)
      if (r.eta == eta) ps.push_back(r.psnr_db);
    std::sort(ps.begin(), ps.end());
    double median = 0.5 * (ps[1] + ps[2]);  // 4 records: type-7 median is the midpoint
    for (const SummaryRow& row : res.summary)
      if (row.eta == eta && row.metric == "psnr_db")
        CHECK(row.median == doctest::Approx(median).epsilon(1e-12));
  }

  // missing ground truth for a requested eta
  CHECK_THROWS_AS(evaluate_run(src, ds, {0.9}), Error);
}

TEST_CASE("evaluation CSV formats") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "dmm_metrics_test";
  fs::create_directories(dir);

  std::vector<EvalRecord> recs = {{0, 0.25, 20.5, 0.1, 0.01}, {0, 0.5, 18.25, 0.2, 0.02}};
  write_eval_csv((dir / "records.csv").string(), recs);
  std::ifstream is(dir / "records.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "pair_id,eta,psnr_db,nmse,mse");
  std::string row;
  std::getline(is, row);
  CHECK(row.substr(0, 7) == "0,0.25,");

  std::vector<SummaryRow> summary = {{0.25, "psnr_db", 20.0, 19.0, 21.0, 20.1}};
  write_summary_csv((dir / "summary.csv").string(), summary);
  std::ifstream is2(dir / "summary.csv");
  std::getline(is2, header);
  CHECK(header == "eta,metric,median,q1,q3,mean");
  fs::remove_all(dir);
}

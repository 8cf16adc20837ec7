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
#include <vector>

#include "dmm/morphing.hpp"
#include "dmm/phantom.hpp"
#include "dmm/training.hpp"

namespace dmm {

/// Mean of squared differences between the real and synthesized images.
double mse(const Tensor& real, const Tensor& synth);

/// 10 log10(max_i^2 / mse) in dB. Zero MSE returns +infinity. For [-1,1]
/// images the default peak-to-peak convention is max_i = 2.
double psnr(const Tensor& real, const Tensor& synth, double max_i = 2.0);

/// sum (y - y_hat)^2 / sum (y - y_mean)^2; the normalizer is the variance
/// of the REAL image, so nmse is deliberately asymmetric. The real image
/// must be non-constant.
double nmse(const Tensor& real, const Tensor& synth);

struct EvalRecord {
  int64_t pair_id = 0;
  double eta = 0.0;
  double psnr_db = 0.0;
  double nmse = 0.0;
  double mse = 0.0;
};

struct SummaryRow {
  double eta = 0.0;
  std::string metric;  // "psnr_db" | "nmse" | "mse"
  double median = 0.0, q1 = 0.0, q3 = 0.0, mean = 0.0;
};

struct EvalResult {
  std::vector<EvalRecord> records;  // ordered by (pair_id, eta)
  std::vector<SummaryRow> summary;
};

/// Where the flow applied at evaluation time comes from: the trained model
/// (paired mode, one predicted field per pair, deterministic via a fixed
/// eval step and a per-pair seeded noise draw) or a single unified field
/// (source-only mode).
struct EvalFlowSource {
  const DmmModel* model = nullptr;
  const FlowField* unified = nullptr;
  int64_t t_max = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int64_t eval_t = -1;  // -1 = t_max / 2
  uint64_t seed = 7;

  FlowField flow_for(const PairRecord& pair) const;
};

/// One record per (pair, eta) against the dataset's ground-truth frame at
/// severity s = eta; missing ground truth is an error. Summary rows carry
/// per-eta median/quartiles (type-7 linear interpolation) and mean.
EvalResult evaluate_run(const EvalFlowSource& source, const PairDataset& dataset,
                        const std::vector<double>& etas = {0.25, 0.5, 0.75},
                        double max_i = 2.0);

/// Linear interpolation between closest ranks (quantile type 7).
double quantile_type7(std::vector<double> values, double p);

/// CSV writers. Records: header pair_id,eta,psnr_db,nmse,mse.
/// Summary: header eta,metric,median,q1,q3,mean.
void write_eval_csv(const std::string& path, const std::vector<EvalRecord>& records);
void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& summary);

}  // namespace dmm

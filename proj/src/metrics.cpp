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

#include "dmm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "dmm/diffusion.hpp"

namespace dmm {

double mse(const Tensor& real, const Tensor& synth) {
  require(real.shape() == synth.shape(), "mse: shape mismatch");
  require(real.numel() > 0, "mse: empty image");
  double acc = 0.0;
  for (int64_t i = 0; i < real.numel(); ++i) {
    double d = real.at(i) - synth.at(i);
    acc += d * d;
  }
  return acc / static_cast<double>(real.numel());
}

double psnr(const Tensor& real, const Tensor& synth, double max_i) {
  require(max_i > 0.0, "psnr: max_i must be positive");
  double m = mse(real, synth);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_i * max_i / m);
}

double nmse(const Tensor& real, const Tensor& synth) {
  require(real.shape() == synth.shape(), "nmse: shape mismatch");
  require(real.numel() > 0, "nmse: empty image");
  double mean_r = 0.0;
  for (int64_t i = 0; i < real.numel(); ++i) mean_r += real.at(i);
  mean_r /= static_cast<double>(real.numel());
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < real.numel(); ++i) {
    double d = real.at(i) - synth.at(i);
    num += d * d;
    double c = real.at(i) - mean_r;
    den += c * c;
  }
  require(den > 0.0, "nmse: constant real image");
  return num / den;
}

double quantile_type7(std::vector<double> v, double p) {
  require(!v.empty(), "quantile: empty sample");
  require(p >= 0.0 && p <= 1.0, "quantile: p out of [0,1]");
  std::sort(v.begin(), v.end());
  double h = (static_cast<double>(v.size()) - 1.0) * p;
  size_t lo = static_cast<size_t>(std::floor(h));
  size_t hi = std::min(lo + 1, v.size() - 1);
  double frac = h - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

FlowField EvalFlowSource::flow_for(const PairRecord& pair) const {
  if (unified) return *unified;
  require(model != nullptr, "evaluate: no flow source configured");
  // Deterministic eval-time diffusion input: fixed step, per-pair seeded noise.
  int64_t t = eval_t >= 0 ? eval_t : t_max / 2;
  NoiseSchedule sched = make_schedule(t_max, beta_start, beta_end);
  Rng noise_rng = substream(seed, "eval-noise", static_cast<uint64_t>(pair.pair_id));
  Tensor n = randn(pair.target.shape(), noise_rng);
  Tensor x_t = forward_perturb(pair.target, t, n, sched);
  Tensor n_hat = predict_noise(model->denoiser, pair.source, pair.target, x_t, t);
  return predict_flow(model->regnet, pair.source, n_hat);
}

EvalResult evaluate_run(const EvalFlowSource& source, const PairDataset& dataset,
                        const std::vector<double>& etas, double max_i) {
  require(!etas.empty(), "evaluate_run: empty eta list");
  EvalResult res;
  for (const PairRecord& pair : dataset.pairs) {
    FlowField flow = source.flow_for(pair);
    for (double eta : etas) {
      const Tensor* truth = pair.truth_at(eta);
      require(truth != nullptr,
              "evaluate_run: missing ground truth for eta=" + std::to_string(eta));
      Tensor frame = warp(pair.source, scale_flow(flow, eta));
      EvalRecord rec;
      rec.pair_id = pair.pair_id;
      rec.eta = eta;
      rec.mse = mse(*truth, frame);
      rec.psnr_db = psnr(*truth, frame, max_i);
      rec.nmse = nmse(*truth, frame);
      res.records.push_back(rec);
    }
  }
  // per-eta summaries
  for (double eta : etas) {
    std::vector<double> ps, ns, ms;
    for (const EvalRecord& r : res.records)
      if (r.eta == eta) {
        ps.push_back(r.psnr_db);
        ns.push_back(r.nmse);
        ms.push_back(r.mse);
      }
    auto push = [&](const std::string& name, const std::vector<double>& v) {
      SummaryRow row;
      row.eta = eta;
      row.metric = name;
      row.median = quantile_type7(v, 0.5);
      row.q1 = quantile_type7(v, 0.25);
      row.q3 = quantile_type7(v, 0.75);
      double m = 0.0;
      for (double x : v) m += x;
      row.mean = m / static_cast<double>(v.size());
      res.summary.push_back(row);
    };
    push("psnr_db", ps);
    push("nmse", ns);
    push("mse", ms);
  }
  return res;
}

namespace {

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_eval_csv(const std::string& path, const std::vector<EvalRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("write_eval_csv: cannot open " + path);
  os << "pair_id,eta,psnr_db,nmse,mse\n";
  for (const EvalRecord& r : records)
    os << r.pair_id << "," << fmt_g17(r.eta) << "," << fmt_g17(r.psnr_db) << ","
       << fmt_g17(r.nmse) << "," << fmt_g17(r.mse) << "\n";
  if (!os) throw IoError("write_eval_csv: write failed for " + path);
}

void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& summary) {
  std::ofstream os(path);
  if (!os) throw IoError("write_summary_csv: cannot open " + path);
  os << "eta,metric,median,q1,q3,mean\n";
  for (const SummaryRow& r : summary)
    os << fmt_g17(r.eta) << "," << r.metric << "," << fmt_g17(r.median) << "," << fmt_g17(r.q1)
       << "," << fmt_g17(r.q3) << "," << fmt_g17(r.mean) << "\n";
  if (!os) throw IoError("write_summary_csv: write failed for " + path);
}

}  // namespace dmm

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

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmm/tensor.hpp"

namespace dmm::testing {

// Scalar-valued function of a list of input tensors. The callable must
// build its graph on the given tape using the given (already watched)
// inputs and return the scalar output.
using ScalarFn =
    std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // description of the worst entry
};

// Central finite differences against reverse-mode gradients. `step` is the
// FD half-interval. Relative error per entry is |a - n| / max(1, |a|, |n|).
inline GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor> inputs,
                                  double step = 1e-5) {
  // Analytic gradients.
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(inputs.size());
    for (const Tensor& t : inputs) watched.push_back(tape.watch(t));
    Tensor loss = fn(tape, watched);
    GradientMap grads = tape.backward(loss);
    for (const Tensor& w : watched) analytic.push_back(grads.at(w));
  }

  auto eval = [&fn](const std::vector<Tensor>& ins) {
    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(ins.size());
    for (const Tensor& t : ins) watched.push_back(tape.watch(t));
    return fn(tape, watched).at(0);
  };

  GradCheckResult res;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      double orig = inputs[k].at(i);
      inputs[k].mutable_data()[i] = orig + step;
      double up = eval(inputs);
      inputs[k].mutable_data()[i] = orig - step;
      double dn = eval(inputs);
      inputs[k].mutable_data()[i] = orig;
      double numeric = (up - dn) / (2.0 * step);
      double a = analytic[k].at(i);
      double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      double rel = std::fabs(a - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(k) + " entry " + std::to_string(i) +
                    " analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace dmm::testing

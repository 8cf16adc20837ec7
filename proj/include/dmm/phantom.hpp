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

#include <vector>

#include "dmm/tensor.hpp"

namespace dmm {

/// Parametric synthetic knee phantom: two textured "bone" bands separated
/// by a dark joint gap. Severity s narrows the gap linearly
/// (half-width g(s) = g0 + s (g1 - g0)) and grows lateral osteophyte bumps
/// (amplitude o(s) = s o_max). Rendered intensities lie in [-1, 1].
struct PhantomParams {
  double severity = 0.0;  // s in [0, 1]
  double g0 = 7.0;        // base joint-space half-width (px)
  double g1 = 2.0;        // minimum half-width (px), g1 < g0
  double o_max = 3.0;     // osteophyte amplitude cap (px)
  uint64_t texture_seed = 0;
  int64_t height = 64;
  int64_t width = 64;
  double noise_sigma = 0.02;

  /// Gap/bump geometry scaled to a given square image size.
  static PhantomParams defaults_for(int64_t size) {
    PhantomParams p;
    p.height = size;
    p.width = size;
    p.g0 = 0.11 * static_cast<double>(size);
    p.g1 = 0.03 * static_cast<double>(size);
    p.o_max = 0.05 * static_cast<double>(size);
    return p;
  }

  double gap_half_width() const { return g0 + severity * (g1 - g0); }
  double osteophyte_amplitude() const { return severity * o_max; }
  void validate() const;
};

/// Renders one phantom; fully determined by the parameter set (texture and
/// pixel noise both derive from texture_seed).
Tensor generate_phantom(const PhantomParams& params);

/// One synthetic "patient": source (s = 0), target (s = 1) and held-out
/// ground-truth intermediates, all sharing one texture seed.
struct PairRecord {
  int64_t pair_id = 0;
  uint64_t texture_seed = 0;
  Tensor source;
  Tensor target;
  std::vector<double> truth_severities;
  std::vector<Tensor> truths;  // aligned with truth_severities

  const Tensor* truth_at(double s) const;
};

struct PairDataset {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<PairRecord> pairs;
};

/// n_pairs records with ground-truth frames at s in {0.25, 0.5, 0.75}
/// (evaluation only, never used in training). Bit-identical regeneration
/// for equal (n_pairs, size, seed, proto).
PairDataset generate_pair_dataset(int64_t n_pairs, int64_t size, uint64_t seed,
                                  const PhantomParams& proto = PhantomParams::defaults_for(64));

/// v -> 2 v / (2^bit_depth - 1) - 1 for raw integer samples.
Tensor normalize_intensity(const Tensor& raw, int bit_depth);
/// Nearest-integer inverse of normalize_intensity.
Tensor denormalize_intensity(const Tensor& img, int bit_depth);

/// Column-scan gap oracle: length (pixels) of the below-threshold run
/// containing the joint line at the centre column.
int64_t measure_joint_gap(const Tensor& img, double threshold = -0.15);

}  // namespace dmm

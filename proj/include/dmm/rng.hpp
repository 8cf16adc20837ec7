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

#include <cstdint>
#include <random>
#include <string>

#include "dmm/common.hpp"

namespace dmm {

/// Deterministic random stream. Gaussian draws use Box-Muller on the
/// engine's uniform output so the draw sequence is fully defined by the
/// seed (no reliance on std::normal_distribution internals).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t bits() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() {
    // 53 mantissa bits from the top of the 64-bit word.
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    require(hi >= lo, "uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling for an unbiased draw.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<int64_t>(r % span);
  }

  /// Standard normal via Box-Muller with a cached spare.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Serialize engine + spare state as text (resume support).
  std::string save_state() const;
  void load_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives the seed of a named sub-stream from a master seed. All project
/// randomness flows from one config seed through these names ("data",
/// "init", "dropout", "diffusion-t", "noise", ...), optionally keyed by
/// counters such as (step, sample) so streams can be re-opened at any
/// point of a resumed run.
uint64_t substream_seed(uint64_t master, const std::string& name);
uint64_t substream_seed(uint64_t master, const std::string& name, uint64_t k0);
uint64_t substream_seed(uint64_t master, const std::string& name, uint64_t k0, uint64_t k1);

/// Convenience: a fresh Rng on the named sub-stream.
inline Rng substream(uint64_t master, const std::string& name) {
  return Rng(substream_seed(master, name));
}
inline Rng substream(uint64_t master, const std::string& name, uint64_t k0) {
  return Rng(substream_seed(master, name, k0));
}
inline Rng substream(uint64_t master, const std::string& name, uint64_t k0, uint64_t k1) {
  return Rng(substream_seed(master, name, k0, k1));
}

}  // namespace dmm

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

#include "dmm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dmm/rng.hpp"

namespace dmm {

void PhantomParams::validate() const {
  require(severity >= 0.0 && severity <= 1.0, "phantom: severity out of [0,1]");
  require(g1 < g0, "phantom: g1 must be < g0");
  require(g1 > 0.0, "phantom: g1 must be positive");
  require(o_max >= 0.0, "phantom: o_max must be >= 0");
  require(height >= 16 && width >= 16, "phantom: non-positive or degenerate size");
  require(noise_sigma >= 0.0, "phantom: noise sigma must be >= 0");
}

namespace {

constexpr double kBackground = -0.85;
constexpr double kBoneLevel = 0.55;
constexpr double kTextureAmplitude = 0.18;
constexpr double kEdgeWidth = 1.2;  // px over which bone edges blend

// Coarse random grid, bilinearly upsampled: smooth per-seed bone texture.
class ValueNoise {
 public:
  ValueNoise(uint64_t seed, int64_t cells) : cells_(cells), grid_((cells + 1) * (cells + 1)) {
    Rng rng(substream_seed(seed, "phantom-texture"));
    for (double& v : grid_) v = rng.uniform(-1.0, 1.0);
  }
  double at(double u, double v) const {  // u, v in [0,1]
    double x = u * static_cast<double>(cells_);
    double y = v * static_cast<double>(cells_);
    int64_t x0 = std::min(static_cast<int64_t>(x), cells_ - 1);
    int64_t y0 = std::min(static_cast<int64_t>(y), cells_ - 1);
    double tx = x - static_cast<double>(x0);
    double ty = y - static_cast<double>(y0);
    double a = grid_[y0 * (cells_ + 1) + x0];
    double b = grid_[y0 * (cells_ + 1) + x0 + 1];
    double c = grid_[(y0 + 1) * (cells_ + 1) + x0];
    double d = grid_[(y0 + 1) * (cells_ + 1) + x0 + 1];
    return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
  }

 private:
  int64_t cells_;
  std::vector<double> grid_;
};

double coverage(double signed_dist) {
  // < 0 inside the band; blends over kEdgeWidth around the edge
  double c = 0.5 - signed_dist / kEdgeWidth;
  return std::clamp(c, 0.0, 1.0);
}

}  // namespace

Tensor generate_phantom(const PhantomParams& p) {
  p.validate();
  int64_t H = p.height, W = p.width;
  double yc = 0.5 * static_cast<double>(H - 1);
  double g = p.gap_half_width();
  double o = p.osteophyte_amplitude();
  double top_margin = 0.12 * static_cast<double>(H);
  double xl = 0.18 * static_cast<double>(W);
  double xr = 0.82 * static_cast<double>(W);
  double bump_sigma = 0.06 * static_cast<double>(W);

  ValueNoise texture(p.texture_seed, 8);
  uint64_t sev_bits;
  double sev = p.severity;
  std::memcpy(&sev_bits, &sev, sizeof(sev));
  Rng noise(substream_seed(p.texture_seed, "phantom-noise", sev_bits));

  std::vector<double> img(static_cast<size_t>(H * W));
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      double fx = static_cast<double>(x);
      double fy = static_cast<double>(y);
      double bump = std::exp(-0.5 * (fx - xl) * (fx - xl) / (bump_sigma * bump_sigma)) +
                    std::exp(-0.5 * (fx - xr) * (fx - xr) / (bump_sigma * bump_sigma));
      // Osteophyte lobes grow outward at the lateral margins, so they never
      // collide with the narrowing joint gap.
      double femur_top = top_margin - o * bump;
      double femur_low = yc - g;
      double tibia_high = yc + g;
      double tibia_bottom = static_cast<double>(H - 1) - top_margin + o * bump;
      double d_femur = std::max(femur_top - fy, fy - femur_low);
      double d_tibia = std::max(tibia_high - fy, fy - tibia_bottom);
      double cov = std::max(coverage(d_femur), coverage(d_tibia));
      double tex = kTextureAmplitude *
                   texture.at(fx / static_cast<double>(W - 1), fy / static_cast<double>(H - 1));
      double v = kBackground + (kBoneLevel + tex - kBackground) * cov;
      if (p.noise_sigma > 0.0) v += p.noise_sigma * noise.gaussian();
      img[y * W + x] = std::clamp(v, -1.0, 1.0);
    }
  }
  return Tensor::from(Shape{H, W}, std::move(img));
}

const Tensor* PairRecord::truth_at(double s) const {
  for (size_t i = 0; i < truth_severities.size(); ++i)
    if (std::fabs(truth_severities[i] - s) < 1e-9) return &truths[i];
  return nullptr;
}

PairDataset generate_pair_dataset(int64_t n_pairs, int64_t size, uint64_t seed,
                                  const PhantomParams& proto) {
  require(n_pairs >= 1, "generate_pair_dataset: n_pairs must be >= 1");
  PairDataset ds;
  ds.height = size;
  ds.width = size;
  ds.pairs.reserve(static_cast<size_t>(n_pairs));
  for (int64_t i = 0; i < n_pairs; ++i) {
    PairRecord rec;
    rec.pair_id = i;
    rec.texture_seed = substream_seed(seed, "pair-texture", static_cast<uint64_t>(i));
    PhantomParams p = proto;
    p.height = size;
    p.width = size;
    p.texture_seed = rec.texture_seed;
    p.severity = 0.0;
    rec.source = generate_phantom(p);
    p.severity = 1.0;
    rec.target = generate_phantom(p);
    for (double s : {0.25, 0.5, 0.75}) {
      p.severity = s;
      rec.truth_severities.push_back(s);
      rec.truths.push_back(generate_phantom(p));
    }
    ds.pairs.push_back(std::move(rec));
  }
  return ds;
}

Tensor normalize_intensity(const Tensor& raw, int bit_depth) {
  require(bit_depth >= 1 && bit_depth <= 16, "normalize_intensity: bit depth out of range");
  double max_v = static_cast<double>((1 << bit_depth) - 1);
  std::vector<double> out(static_cast<size_t>(raw.numel()));
  for (int64_t i = 0; i < raw.numel(); ++i) {
    double v = raw.at(i);
    require(v >= 0.0 && v <= max_v, "normalize_intensity: out-of-range sample");
    out[i] = 2.0 * v / max_v - 1.0;
  }
  return Tensor::from(raw.shape(), std::move(out));
}

Tensor denormalize_intensity(const Tensor& img, int bit_depth) {
  require(bit_depth >= 1 && bit_depth <= 16, "denormalize_intensity: bit depth out of range");
  double max_v = static_cast<double>((1 << bit_depth) - 1);
  std::vector<double> out(static_cast<size_t>(img.numel()));
  for (int64_t i = 0; i < img.numel(); ++i) {
    double v = std::round((img.at(i) + 1.0) * 0.5 * max_v);
    out[i] = std::clamp(v, 0.0, max_v);
  }
  return Tensor::from(img.shape(), std::move(out));
}

int64_t measure_joint_gap(const Tensor& img, double threshold) {
  require(img.shape().rank() == 2, "measure_joint_gap: (H,W) image expected");
  int64_t H = img.shape().dim(0), W = img.shape().dim(1);
  int64_t col = W / 2;
  int64_t yc = H / 2;
  // Walk outward from the joint line while pixels stay below threshold.
  if (img.at(yc, col) >= threshold) {
    // Joint line itself is bright: look for the nearest dark pixel in a
    // small neighbourhood (sub-pixel geometry can put yc on an edge).
    int64_t best = -1;
    for (int64_t d = 1; d < H / 4; ++d) {
      if (yc - d >= 0 && img.at(yc - d, col) < threshold) {
        best = yc - d;
        break;
      }
      if (yc + d < H && img.at(yc + d, col) < threshold) {
        best = yc + d;
        break;
      }
    }
    if (best < 0) return 0;
    yc = best;
  }
  int64_t lo = yc, hi = yc;
  while (lo - 1 >= 0 && img.at(lo - 1, col) < threshold) --lo;
  while (hi + 1 < H && img.at(hi + 1, col) < threshold) ++hi;
  return hi - lo + 1;
}

}  // namespace dmm

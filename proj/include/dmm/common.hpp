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

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmm {

/// Base error for contract violations (bad shapes, invalid arguments).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when an operation produces NaN/Inf from finite inputs, or a
/// training step observes a non-finite loss.
struct NumericsError : Error {
  explicit NumericsError(const std::string& msg) : Error(msg) {}
};

/// Raised on file read/write failures.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

/// Dense shape with up to 4 axes. Axis meaning is by convention
/// (batch, channel, height, width) for rank-4 tensors.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) {
    require(dims.size() >= 1 && dims.size() <= 4, "Shape: rank must be 1..4");
    nd_ = static_cast<int>(dims.size());
    int i = 0;
    for (int64_t d : dims) {
      require(d >= 0, "Shape: negative axis");
      d_[i++] = d;
    }
  }
  static Shape of(const std::vector<int64_t>& dims) {
    require(dims.size() >= 1 && dims.size() <= 4, "Shape: rank must be 1..4");
    Shape s;
    s.nd_ = static_cast<int>(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) s.d_[i] = dims[i];
    return s;
  }

  int rank() const { return nd_; }
  int64_t dim(int i) const {
    require(i >= 0 && i < nd_, "Shape: axis out of range");
    return d_[i];
  }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < nd_; ++i) n *= d_[i];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (nd_ != o.nd_) return false;
    for (int i = 0; i < nd_; ++i)
      if (d_[i] != o.d_[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "(";
    for (int i = 0; i < nd_; ++i) os << (i ? "," : "") << d_[i];
    os << ")";
    return os.str();
  }

 private:
  int nd_ = 1;
  std::array<int64_t, 4> d_{1, 1, 1, 1};
};

/// FNV-1a over raw bytes; used for parameter digests and seed derivation.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace dmm

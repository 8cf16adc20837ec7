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

#include <functional>
#include <memory>
#include <vector>

#include "dmm/common.hpp"
#include "dmm/rng.hpp"

namespace dmm {

class Tape;

/// Dense multi-dimensional value (64-bit floats, row-major, up to 4 axes).
///
/// Tensors are value-like: copies share immutable storage; mutation goes
/// through mutable_data() which detaches shared buffers. A tensor produced
/// by (or watched on) a tape additionally carries the id of its node on
/// that tape, which is how gradients are looked up after backward().
class Tensor {
 public:
  Tensor() : shape_({0}), data_(std::make_shared<std::vector<double>>()) {}

  static Tensor zeros(const Shape& s) { return full(s, 0.0); }
  static Tensor ones(const Shape& s) { return full(s, 1.0); }
  static Tensor full(const Shape& s, double v) {
    Tensor t;
    t.shape_ = s;
    t.data_ = std::make_shared<std::vector<double>>(s.numel(), v);
    return t;
  }
  static Tensor from(const Shape& s, std::vector<double> values) {
    require(static_cast<int64_t>(values.size()) == s.numel(),
            "Tensor::from: element count does not match shape " + s.str());
    Tensor t;
    t.shape_ = s;
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }
  static Tensor scalar(double v) { return full(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return shape_.numel(); }

  const double* data() const { return data_->data(); }
  const std::vector<double>& vec() const { return *data_; }

  /// Write access; detaches from shared storage and from any tape node.
  double* mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
    node_ = -1;
    tape_id_ = 0;
    return data_->data();
  }

  double at(int64_t i) const { return (*data_)[check_index(i)]; }
  double at(int64_t i, int64_t j) const {
    require(shape_.rank() == 2, "Tensor::at(i,j): rank-2 tensor expected");
    return (*data_)[check_index(i * shape_.dim(1) + j)];
  }
  double at(int64_t b, int64_t c, int64_t i, int64_t j) const {
    require(shape_.rank() == 4, "Tensor::at(b,c,i,j): rank-4 tensor expected");
    return (*data_)[check_index(((b * shape_.dim(1) + c) * shape_.dim(2) + i) * shape_.dim(3) + j)];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  int64_t node() const { return node_; }
  uint64_t tape_id() const { return tape_id_; }
  bool on_tape(const Tape& tp) const;

  /// Same values, no tape binding, requires_grad = false.
  Tensor detached() const {
    Tensor t = *this;
    t.node_ = -1;
    t.tape_id_ = 0;
    t.requires_grad_ = false;
    return t;
  }

 private:
  friend class Tape;
  int64_t check_index(int64_t i) const {
    require(i >= 0 && i < numel(), "Tensor: index out of range");
    return i;
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  uint64_t tape_id_ = 0;  // 0 = not bound
  int64_t node_ = -1;
};

/// Gradient lookup handle returned by Tape::backward. Valid while the tape
/// is alive.
class GradientMap {
 public:
  /// Total derivative of the loss w.r.t. a tensor on the tape. Watched
  /// leaves not reachable from the loss yield all-zero gradients.
  Tensor at(const Tensor& t) const;

 private:
  friend class Tape;
  explicit GradientMap(const Tape* tape) : tape_(tape) {}
  const Tape* tape_;
};

/// Records the operations of one forward pass so reverse-mode backward can
/// replay them once, in reverse topological order. A tape lives on one
/// thread for its whole lifetime and is rebuilt per training step.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<double>& grad_out)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t id() const { return id_; }

  /// Registers a gradient-tracked leaf (network parameter or other input
  /// whose derivative is wanted) and returns the bound handle.
  Tensor watch(const Tensor& t);

  /// Runs reverse-mode accumulation from a scalar loss. Errors: non-scalar
  /// loss, loss not on this tape, repeated call without a fresh tape.
  GradientMap backward(const Tensor& loss);

  /// Gradient w.r.t. a tensor on this tape (zeros when none was
  /// accumulated). Requires backward() to have run.
  Tensor grad_of(const Tensor& t) const;

  size_t num_nodes() const { return nodes_.size(); }
  size_t num_records() const { return records_.size(); }
  bool backward_done() const { return backward_done_; }

  /// True when every record's inputs precede its output node.
  bool validate_topology() const;

  // --- op-author interface -------------------------------------------------

  /// Node id for an op input: reuses the existing binding, or registers a
  /// constant leaf for unbound non-grad tensors. Unbound tensors that
  /// require grad are an error (they must be watch()ed first).
  int64_t ensure_on_tape(const Tensor& t);

  /// Creates the output node of an op; checks the value is finite, records
  /// the backward closure when any input requires grad.
  Tensor add_result(const char* op_name, const Shape& shape,
                    std::shared_ptr<std::vector<double>> value,
                    const std::vector<int64_t>& inputs, BackwardFn fn);

  const Shape& node_shape(int64_t id) const { return nodes_[id].shape; }
  const std::vector<double>& value(int64_t id) const { return *nodes_[id].value; }
  bool wants_grad(int64_t id) const { return nodes_[id].requires_grad; }

  /// Mutable gradient buffer of a node, zero-initialized on first use.
  /// Callers must only write to nodes with wants_grad() == true.
  std::vector<double>& grad_buf(int64_t id);

  /// grad[id] += g (no-op for nodes that do not require grad).
  void accumulate(int64_t id, const std::vector<double>& g);

 private:
  friend class GradientMap;
  struct Node {
    Shape shape;
    std::shared_ptr<const std::vector<double>> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool has_grad = false;
  };
  struct Record {
    int64_t out;
    std::vector<int64_t> inputs;
    BackwardFn fn;
  };

  int64_t add_node(const Shape& shape, std::shared_ptr<const std::vector<double>> value,
                   bool requires_grad);

  uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<Record> records_;
  bool backward_done_ = false;
};

// --- elementwise ops ---------------------------------------------------------
// Binary kinds require identical shapes; the only broadcasting anywhere is
// multiplication by a compile-time constant (scale).

Tensor add(Tape&, const Tensor&, const Tensor&);
Tensor sub(Tape&, const Tensor&, const Tensor&);
Tensor mul(Tape&, const Tensor&, const Tensor&);
Tensor div(Tape&, const Tensor&, const Tensor&);
Tensor scale(Tape&, const Tensor&, double c);
Tensor negate(Tape&, const Tensor&);
Tensor abs(Tape&, const Tensor&);
Tensor square(Tape&, const Tensor&);
Tensor sqrt(Tape&, const Tensor&);
Tensor sigmoid(Tape&, const Tensor&);
Tensor swish(Tape&, const Tensor&);  // v * sigmoid(v)

// --- reductions ---------------------------------------------------------------

Tensor sum(Tape&, const Tensor&);
Tensor mean(Tape&, const Tensor&);

// --- structure ----------------------------------------------------------------

Tensor reshape(Tape&, const Tensor&, const Shape&);

/// Channel concatenation of rank-4 tensors sharing batch and spatial dims.
Tensor concat_channels(Tape&, const std::vector<Tensor>&);

// --- neural-net ops -------------------------------------------------------------

/// 2-D cross-correlation (no kernel flip). x: (B,Cin,H,W), w: (Cout,Cin,kh,kw),
/// b: (Cout). Output spatial size floor((H + 2 pad - kh)/stride) + 1.
Tensor conv2d(Tape&, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);

/// Transposed convolution restricted to kernel = stride = 2 (exact 2x
/// upsampling; adjoint of the matching strided conv). x: (B,Cin,H,W),
/// w: (Cin,Cout,2,2), b: (Cout); output (B,Cout,2H,2W).
Tensor conv_transpose2d(Tape&, const Tensor& x, const Tensor& w, const Tensor& b, int stride);

/// Per-sample, per-group normalization to zero mean / unit variance,
/// followed by the (gamma, beta) affine. gamma/beta: (C).
Tensor group_norm(Tape&, const Tensor& x, int num_groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);

/// y = x w^T + b with x: (N,In), w: (Out,In), b: (Out).
Tensor linear(Tape&, const Tensor& x, const Tensor& w, const Tensor& b);

/// Single-head self-attention over spatial tokens with residual output:
/// tokens are rows of X (T=H*W, C); Q = X wq, K = X wk, V = X wv;
/// Y = X + softmax(Q K^T / sqrt(C)) V wo, reshaped back to (B,C,H,W).
/// All projection weights must be square (C,C).
Tensor self_attention(Tape&, const Tensor& x, const Tensor& wq, const Tensor& wk,
                      const Tensor& wv, const Tensor& wo);

/// y[b,c,i,j] = x[b,c,i,j] + v[c]  (time-embedding injection).
Tensor channel_bias(Tape&, const Tensor& x, const Tensor& v);

/// (B,C,H,W) -> (B,C) spatial mean.
Tensor global_avg_pool(Tape&, const Tensor& x);

/// Forward differences along the last (x) / second-to-last (y) axis;
/// output loses one column / row.
Tensor diff_x(Tape&, const Tensor&);
Tensor diff_y(Tape&, const Tensor&);

/// Inverted dropout: zero entries with probability p and scale survivors by
/// 1/(1-p) while training; identity in eval. 0 <= p < 1.
Tensor dropout(Tape&, const Tensor&, double p, bool training, Rng& rng);

/// -log softmax(logits)[target]. logits: rank-1 (K) or (1,K).
Tensor cross_entropy(Tape&, const Tensor& logits, int target_class);

/// Bilinear warp of x by the displacement field phi (pixel units,
/// plane 0 = dx, plane 1 = dy); sample coordinates are clamped to the
/// border. x: (H,W) with phi (2,H,W), or x: (B,1,H,W) with phi (B,2,H,W).
/// out(i,j) = bilinear x at (i + dy(i,j), j + dx(i,j)).
Tensor warp(Tape&, const Tensor& x, const Tensor& phi);

// --- tensor construction helpers ------------------------------------------------

Tensor randn(const Shape&, Rng&);
Tensor rand_uniform(const Shape&, Rng&, double lo = 0.0, double hi = 1.0);

}  // namespace dmm

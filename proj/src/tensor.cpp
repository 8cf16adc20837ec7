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

#include "dmm/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace dmm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

std::atomic<uint64_t> g_tape_counter{1};

std::shared_ptr<std::vector<double>> alloc(int64_t n, double v = 0.0) {
  return std::make_shared<std::vector<double>>(static_cast<size_t>(n), v);
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

bool Tensor::on_tape(const Tape& tp) const { return node_ >= 0 && tape_id_ == tp.id(); }

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

int64_t Tape::add_node(const Shape& shape, std::shared_ptr<const std::vector<double>> value,
                       bool requires_grad) {
  Node n;
  n.shape = shape;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return static_cast<int64_t>(nodes_.size()) - 1;
}

Tensor Tape::watch(const Tensor& t) {
  require(t.numel() > 0, "Tape::watch: empty tensor");
  Tensor bound = t;
  bound.requires_grad_ = true;
  bound.tape_id_ = id_;
  bound.node_ = add_node(t.shape_, t.data_, /*requires_grad=*/true);
  return bound;
}

int64_t Tape::ensure_on_tape(const Tensor& t) {
  if (t.on_tape(*this)) return t.node();
  require(!t.requires_grad(),
          "op input requires grad but is not watched on this tape; call Tape::watch first");
  return add_node(t.shape(), t.data_, /*requires_grad=*/false);
}

Tensor Tape::add_result(const char* op_name, const Shape& shape,
                        std::shared_ptr<std::vector<double>> value,
                        const std::vector<int64_t>& inputs, BackwardFn fn) {
  require(static_cast<int64_t>(value->size()) == shape.numel(),
          std::string(op_name) + ": internal shape/value mismatch");
  if (!all_finite(*value))
    throw NumericsError(std::string(op_name) + " produced non-finite values");
  bool rg = false;
  for (int64_t id : inputs) rg = rg || nodes_[id].requires_grad;
  int64_t out = add_node(shape, value, rg);
  if (rg) records_.push_back(Record{out, inputs, std::move(fn)});
  Tensor t;
  t.shape_ = shape;
  t.data_ = std::move(value);
  t.requires_grad_ = rg;
  t.tape_id_ = id_;
  t.node_ = out;
  return t;
}

std::vector<double>& Tape::grad_buf(int64_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad.assign(static_cast<size_t>(n.shape.numel()), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(int64_t id, const std::vector<double>& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  std::vector<double>& buf = grad_buf(id);
  require(buf.size() == g.size(), "Tape::accumulate: gradient size mismatch");
  for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

GradientMap Tape::backward(const Tensor& loss) {
  require(!backward_done_, "Tape::backward: called twice on the same tape");
  require(loss.on_tape(*this), "Tape::backward: loss is not on this tape (detached?)");
  require(loss.numel() == 1, "Tape::backward: loss must be scalar");
  backward_done_ = true;
  if (nodes_[loss.node()].requires_grad) grad_buf(loss.node())[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    Node& out = nodes_[it->out];
    if (!out.has_grad) continue;  // unused branch, gradient is exactly zero
    if (!all_finite(out.grad))
      throw NumericsError("backward produced non-finite gradients");
    it->fn(*this, out.grad);
  }
  return GradientMap(this);
}

Tensor Tape::grad_of(const Tensor& t) const {
  require(backward_done_, "Tape::grad_of: backward has not run");
  require(t.on_tape(*this), "Tape::grad_of: tensor is not on this tape");
  const Node& n = nodes_[t.node()];
  if (!n.has_grad) return Tensor::zeros(n.shape);
  if (!all_finite(n.grad)) throw NumericsError("gradient is non-finite");
  return Tensor::from(n.shape, n.grad);
}

bool Tape::validate_topology() const {
  for (const Record& r : records_)
    for (int64_t in : r.inputs)
      if (in >= r.out) return false;
  return true;
}

Tensor GradientMap::at(const Tensor& t) const { return tape_->grad_of(t); }

// -----------------------------------------------------------------------------
// elementwise
// -----------------------------------------------------------------------------

namespace {

template <class FwdFn, class BwdFn>
Tensor binary_op(const char* name, Tape& tp, const Tensor& a, const Tensor& b, FwdFn fwd,
                 BwdFn bwd) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " + a.shape().str() +
                                      " vs " + b.shape().str());
  int64_t n = a.numel();
  auto out = alloc(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < n; ++i) (*out)[i] = fwd(pa[i], pb[i]);
  int64_t ia = tp.ensure_on_tape(a);
  int64_t ib = tp.ensure_on_tape(b);
  return tp.add_result(name, a.shape(), out, {ia, ib},
                       [ia, ib, bwd](Tape& t, const std::vector<double>& g) {
                         const std::vector<double>& va = t.value(ia);
                         const std::vector<double>& vb = t.value(ib);
                         bool ga = t.wants_grad(ia), gb = t.wants_grad(ib);
                         std::vector<double>* da = ga ? &t.grad_buf(ia) : nullptr;
                         std::vector<double>* db = gb ? &t.grad_buf(ib) : nullptr;
                         for (size_t i = 0; i < g.size(); ++i) {
                           auto [dda, ddb] = bwd(va[i], vb[i]);
                           if (da) (*da)[i] += g[i] * dda;
                           if (db) (*db)[i] += g[i] * ddb;
                         }
                       });
}

template <class FwdFn, class BwdFn>
Tensor unary_op(const char* name, Tape& tp, const Tensor& x, FwdFn fwd, BwdFn bwd) {
  int64_t n = x.numel();
  auto out = alloc(n);
  const double* px = x.data();
  for (int64_t i = 0; i < n; ++i) (*out)[i] = fwd(px[i]);
  int64_t ix = tp.ensure_on_tape(x);
  return tp.add_result(name, x.shape(), out, {ix},
                       [ix, bwd](Tape& t, const std::vector<double>& g) {
                         if (!t.wants_grad(ix)) return;
                         const std::vector<double>& vx = t.value(ix);
                         std::vector<double>& dx = t.grad_buf(ix);
                         for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * bwd(vx[i]);
                       });
}

}  // namespace

Tensor add(Tape& tp, const Tensor& a, const Tensor& b) {
  return binary_op("add", tp, a, b, [](double x, double y) { return x + y; },
                   [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

Tensor sub(Tape& tp, const Tensor& a, const Tensor& b) {
  return binary_op("sub", tp, a, b, [](double x, double y) { return x - y; },
                   [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

Tensor mul(Tape& tp, const Tensor& a, const Tensor& b) {
  return binary_op("mul", tp, a, b, [](double x, double y) { return x * y; },
                   [](double x, double y) { return std::pair<double, double>{y, x}; });
}

Tensor div(Tape& tp, const Tensor& a, const Tensor& b) {
  return binary_op("div", tp, a, b, [](double x, double y) { return x / y; },
                   [](double x, double y) {
                     return std::pair<double, double>{1.0 / y, -x / (y * y)};
                   });
}

Tensor scale(Tape& tp, const Tensor& x, double c) {
  return unary_op("scale", tp, x, [c](double v) { return c * v; },
                  [c](double) { return c; });
}

Tensor negate(Tape& tp, const Tensor& x) { return scale(tp, x, -1.0); }

Tensor abs(Tape& tp, const Tensor& x) {
  return unary_op("abs", tp, x, [](double v) { return std::fabs(v); },
                  [](double v) { return sign_of(v); });
}

Tensor square(Tape& tp, const Tensor& x) {
  return unary_op("square", tp, x, [](double v) { return v * v; },
                  [](double v) { return 2.0 * v; });
}

Tensor sqrt(Tape& tp, const Tensor& x) {
  for (int64_t i = 0; i < x.numel(); ++i)
    require(x.data()[i] >= 0.0, "sqrt of negative entry");
  return unary_op("sqrt", tp, x, [](double v) { return std::sqrt(v); },
                  [](double v) { return 0.5 / std::sqrt(v); });
}

Tensor sigmoid(Tape& tp, const Tensor& x) {
  return unary_op("sigmoid", tp, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double v) {
                    double s = 1.0 / (1.0 + std::exp(-v));
                    return s * (1.0 - s);
                  });
}

Tensor swish(Tape& tp, const Tensor& x) {
  return unary_op("swish", tp, x,
                  [](double v) { return v / (1.0 + std::exp(-v)); },
                  [](double v) {
                    double s = 1.0 / (1.0 + std::exp(-v));
                    return s + v * s * (1.0 - s);
                  });
}

// -----------------------------------------------------------------------------
// reductions
// -----------------------------------------------------------------------------

Tensor sum(Tape& tp, const Tensor& x) {
  require(x.numel() > 0, "sum: empty tensor");
  auto out = alloc(1);
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  (*out)[0] = acc;
  int64_t ix = tp.ensure_on_tape(x);
  return tp.add_result("sum", Shape{1}, out, {ix},
                       [ix](Tape& t, const std::vector<double>& g) {
                         if (!t.wants_grad(ix)) return;
                         std::vector<double>& dx = t.grad_buf(ix);
                         for (double& d : dx) d += g[0];
                       });
}

Tensor mean(Tape& tp, const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  int64_t n = x.numel();
  auto out = alloc(1);
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  (*out)[0] = acc / static_cast<double>(n);
  int64_t ix = tp.ensure_on_tape(x);
  double inv = 1.0 / static_cast<double>(n);
  return tp.add_result("mean", Shape{1}, out, {ix},
                       [ix, inv](Tape& t, const std::vector<double>& g) {
                         if (!t.wants_grad(ix)) return;
                         std::vector<double>& dx = t.grad_buf(ix);
                         double gv = g[0] * inv;
                         for (double& d : dx) d += gv;
                       });
}

// -----------------------------------------------------------------------------
// structure
// -----------------------------------------------------------------------------

Tensor reshape(Tape& tp, const Tensor& x, const Shape& s) {
  require(s.numel() == x.numel(), "reshape: element count mismatch");
  auto out = std::make_shared<std::vector<double>>(x.vec());
  int64_t ix = tp.ensure_on_tape(x);
  return tp.add_result("reshape", s, out, {ix},
                       [ix](Tape& t, const std::vector<double>& g) { t.accumulate(ix, g); });
}

Tensor concat_channels(Tape& tp, const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  require(s0.rank() == 4, "concat_channels: rank-4 tensors expected");
  int64_t B = s0.dim(0), H = s0.dim(2), W = s0.dim(3);
  int64_t C = 0;
  for (const Tensor& x : xs) {
    require(x.shape().rank() == 4 && x.shape().dim(0) == B && x.shape().dim(2) == H &&
                x.shape().dim(3) == W,
            "concat_channels: spatial mismatch");
    C += x.shape().dim(1);
  }
  Shape os{B, C, H, W};
  auto out = alloc(os.numel());
  int64_t plane = H * W;
  std::vector<int64_t> ids;
  std::vector<int64_t> chans;
  for (const Tensor& x : xs) {
    ids.push_back(tp.ensure_on_tape(x));
    chans.push_back(x.shape().dim(1));
  }
  for (int64_t b = 0; b < B; ++b) {
    int64_t co = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
      int64_t ck = chans[k];
      const double* src = xs[k].data() + b * ck * plane;
      double* dst = out->data() + (b * C + co) * plane;
      std::memcpy(dst, src, static_cast<size_t>(ck * plane) * sizeof(double));
      co += ck;
    }
  }
  return tp.add_result(
      "concat_channels", os, out, ids,
      [ids, chans, B, C, plane](Tape& t, const std::vector<double>& g) {
        for (int64_t b = 0; b < B; ++b) {
          int64_t co = 0;
          for (size_t k = 0; k < ids.size(); ++k) {
            int64_t ck = chans[k];
            if (t.wants_grad(ids[k])) {
              std::vector<double>& dx = t.grad_buf(ids[k]);
              const double* src = g.data() + (b * C + co) * plane;
              double* dst = dx.data() + b * ck * plane;
              for (int64_t i = 0; i < ck * plane; ++i) dst[i] += src[i];
            }
            co += ck;
          }
        }
      });
}

// -----------------------------------------------------------------------------
// conv2d
// -----------------------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t B, Ci, H, W, Co, kh, kw, Ho, Wo;
  int stride, pad;
};

// cols is (Ci*kh*kw) x (Ho*Wo), row-major.
void im2col(const double* x, const ConvDims& d, int64_t b, double* cols) {
  int64_t N = d.Ho * d.Wo;
  for (int64_t ci = 0; ci < d.Ci; ++ci) {
    const double* xp = x + (b * d.Ci + ci) * d.H * d.W;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        double* row = cols + ((ci * d.kh + ky) * d.kw + kx) * N;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          double* rp = row + oy * d.Wo;
          if (iy < 0 || iy >= d.H) {
            std::fill(rp, rp + d.Wo, 0.0);
            continue;
          }
          const double* xr = xp + iy * d.W;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            rp[ox] = (ix >= 0 && ix < d.W) ? xr[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, int64_t b, double* dx) {
  int64_t N = d.Ho * d.Wo;
  for (int64_t ci = 0; ci < d.Ci; ++ci) {
    double* xp = dx + (b * d.Ci + ci) * d.H * d.W;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const double* row = cols + ((ci * d.kh + ky) * d.kw + kx) * N;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.H) continue;
          const double* rp = row + oy * d.Wo;
          double* xr = xp + iy * d.W;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.W) xr[ix] += rp[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tp, const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding) {
  require(x.shape().rank() == 4, "conv2d: x must be (B,C,H,W)");
  require(w.shape().rank() == 4, "conv2d: w must be (Cout,Cin,kh,kw)");
  require(b.shape().rank() == 1, "conv2d: b must be (Cout)");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  ConvDims d;
  d.B = x.shape().dim(0);
  d.Ci = x.shape().dim(1);
  d.H = x.shape().dim(2);
  d.W = x.shape().dim(3);
  d.Co = w.shape().dim(0);
  d.kh = w.shape().dim(2);
  d.kw = w.shape().dim(3);
  d.stride = stride;
  d.pad = padding;
  require(w.shape().dim(1) == d.Ci, "conv2d: channel counts inconsistent");
  require(b.shape().dim(0) == d.Co, "conv2d: bias size mismatch");
  require(d.kh <= d.H + 2 * padding && d.kw <= d.W + 2 * padding,
          "conv2d: kernel larger than padded input");
  d.Ho = (d.H + 2 * padding - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * padding - d.kw) / stride + 1;

  int64_t K = d.Ci * d.kh * d.kw;
  int64_t N = d.Ho * d.Wo;
  Shape os{d.B, d.Co, d.Ho, d.Wo};
  auto out = alloc(os.numel());
  std::vector<double> cols(static_cast<size_t>(K * N));
  MapConstMat W(w.data(), d.Co, K);
  for (int64_t bb = 0; bb < d.B; ++bb) {
    im2col(x.data(), d, bb, cols.data());
    MapConstMat C(cols.data(), K, N);
    MapMat O(out->data() + bb * d.Co * N, d.Co, N);
    O.noalias() = W * C;
    for (int64_t co = 0; co < d.Co; ++co) O.row(co).array() += b.data()[co];
  }

  int64_t ix = tp.ensure_on_tape(x);
  int64_t iw = tp.ensure_on_tape(w);
  int64_t ib = tp.ensure_on_tape(b);
  return tp.add_result(
      "conv2d", os, out, {ix, iw, ib},
      [ix, iw, ib, d, K, N](Tape& t, const std::vector<double>& g) {
        const std::vector<double>& xv = t.value(ix);
        const std::vector<double>& wv = t.value(iw);
        bool gx = t.wants_grad(ix), gw = t.wants_grad(iw), gb = t.wants_grad(ib);
        std::vector<double> cols(static_cast<size_t>(K * N));
        std::vector<double> dcols;
        if (gx) dcols.resize(static_cast<size_t>(K * N));
        MapConstMat W(wv.data(), d.Co, K);
        for (int64_t bb = 0; bb < d.B; ++bb) {
          MapConstMat G(g.data() + bb * d.Co * N, d.Co, N);
          if (gw || gx) im2col(xv.data(), d, bb, cols.data());
          if (gw) {
            MapConstMat C(cols.data(), K, N);
            MapMat dW(t.grad_buf(iw).data(), d.Co, K);
            dW.noalias() += G * C.transpose();
          }
          if (gb) {
            // fixed-order scalar reduction keeps results bit-identical
            // across runs (vectorized redux depends on buffer alignment)
            std::vector<double>& db = t.grad_buf(ib);
            for (int64_t co = 0; co < d.Co; ++co) {
              const double* gp = g.data() + (bb * d.Co + co) * N;
              double acc = 0.0;
              for (int64_t i = 0; i < N; ++i) acc += gp[i];
              db[co] += acc;
            }
          }
          if (gx) {
            MapMat dC(dcols.data(), K, N);
            dC.noalias() = W.transpose() * G;
            col2im_add(dcols.data(), d, bb, t.grad_buf(ix).data());
          }
        }
      });
}

// -----------------------------------------------------------------------------
// conv_transpose2d (kernel = stride = 2)
// -----------------------------------------------------------------------------

Tensor conv_transpose2d(Tape& tp, const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride) {
  require(x.shape().rank() == 4, "conv_transpose2d: x must be (B,C,H,W)");
  require(w.shape().rank() == 4, "conv_transpose2d: w must be (Cin,Cout,kh,kw)");
  int64_t kh = w.shape().dim(2), kw = w.shape().dim(3);
  require(stride == 2 && kh == 2 && kw == 2,
          "conv_transpose2d: unsupported stride/kernel combination (only k=s=2)");
  int64_t B = x.shape().dim(0), Ci = x.shape().dim(1), H = x.shape().dim(2),
          W = x.shape().dim(3);
  require(w.shape().dim(0) == Ci, "conv_transpose2d: channel counts inconsistent");
  int64_t Co = w.shape().dim(1);
  require(b.shape().rank() == 1 && b.shape().dim(0) == Co,
          "conv_transpose2d: bias size mismatch");
  int64_t Ho = 2 * H, Wo = 2 * W;
  Shape os{B, Co, Ho, Wo};
  auto out = alloc(os.numel());
  for (int64_t bb = 0; bb < B; ++bb) {
    for (int64_t co = 0; co < Co; ++co) {
      double* op = out->data() + (bb * Co + co) * Ho * Wo;
      double bias = b.data()[co];
      for (int64_t i = 0; i < Ho * Wo; ++i) op[i] = bias;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const double* xp = x.data() + (bb * Ci + ci) * H * W;
        const double* wp = w.data() + (ci * Co + co) * 4;
        for (int64_t i = 0; i < H; ++i) {
          double* o0 = op + (2 * i) * Wo;
          double* o1 = op + (2 * i + 1) * Wo;
          const double* xr = xp + i * W;
          for (int64_t j = 0; j < W; ++j) {
            double v = xr[j];
            o0[2 * j] += v * wp[0];
            o0[2 * j + 1] += v * wp[1];
            o1[2 * j] += v * wp[2];
            o1[2 * j + 1] += v * wp[3];
          }
        }
      }
    }
  }
  int64_t ix = tp.ensure_on_tape(x);
  int64_t iw = tp.ensure_on_tape(w);
  int64_t ib = tp.ensure_on_tape(b);
  return tp.add_result(
      "conv_transpose2d", os, out, {ix, iw, ib},
      [ix, iw, ib, B, Ci, Co, H, W, Ho, Wo](Tape& t, const std::vector<double>& g) {
        const std::vector<double>& xv = t.value(ix);
        const std::vector<double>& wv = t.value(iw);
        bool gx = t.wants_grad(ix), gw = t.wants_grad(iw), gb = t.wants_grad(ib);
        if (gb) {
          std::vector<double>& db = t.grad_buf(ib);
          for (int64_t bb = 0; bb < B; ++bb)
            for (int64_t co = 0; co < Co; ++co) {
              const double* gp = g.data() + (bb * Co + co) * Ho * Wo;
              double acc = 0.0;
              for (int64_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
              db[co] += acc;
            }
        }
        for (int64_t bb = 0; bb < B; ++bb) {
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const double* xp = xv.data() + (bb * Ci + ci) * H * W;
            double* dxp = gx ? t.grad_buf(ix).data() + (bb * Ci + ci) * H * W : nullptr;
            for (int64_t co = 0; co < Co; ++co) {
              const double* gp = g.data() + (bb * Co + co) * Ho * Wo;
              const double* wp = wv.data() + (ci * Co + co) * 4;
              double* dwp = gw ? t.grad_buf(iw).data() + (ci * Co + co) * 4 : nullptr;
              double dw0 = 0, dw1 = 0, dw2 = 0, dw3 = 0;
              for (int64_t i = 0; i < H; ++i) {
                const double* g0 = gp + (2 * i) * Wo;
                const double* g1 = gp + (2 * i + 1) * Wo;
                const double* xr = xp + i * W;
                double* dxr = dxp ? dxp + i * W : nullptr;
                for (int64_t j = 0; j < W; ++j) {
                  double a = g0[2 * j], bq = g0[2 * j + 1], c = g1[2 * j], dq = g1[2 * j + 1];
                  if (dxr) dxr[j] += a * wp[0] + bq * wp[1] + c * wp[2] + dq * wp[3];
                  double v = xr[j];
                  dw0 += v * a;
                  dw1 += v * bq;
                  dw2 += v * c;
                  dw3 += v * dq;
                }
              }
              if (dwp) {
                dwp[0] += dw0;
                dwp[1] += dw1;
                dwp[2] += dw2;
                dwp[3] += dw3;
              }
            }
          }
        }
      });
}

// -----------------------------------------------------------------------------
// group_norm
// -----------------------------------------------------------------------------

Tensor group_norm(Tape& tp, const Tensor& x, int num_groups, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  require(x.shape().rank() == 4, "group_norm: x must be (B,C,H,W)");
  require(eps > 0.0, "group_norm: eps must be > 0");
  int64_t B = x.shape().dim(0), C = x.shape().dim(1), H = x.shape().dim(2),
          W = x.shape().dim(3);
  require(num_groups >= 1 && C % num_groups == 0, "group_norm: indivisible channel count");
  require(gamma.shape().rank() == 1 && gamma.shape().dim(0) == C,
          "group_norm: gamma size mismatch");
  require(beta.shape().rank() == 1 && beta.shape().dim(0) == C,
          "group_norm: beta size mismatch");
  int64_t G = num_groups;
  int64_t Cg = C / G;
  int64_t M = Cg * H * W;  // group element count
  auto out = alloc(x.numel());
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(B * G * 2));
  for (int64_t bb = 0; bb < B; ++bb) {
    for (int64_t gg = 0; gg < G; ++gg) {
      const double* xp = x.data() + (bb * C + gg * Cg) * H * W;
      double mu = 0.0;
      for (int64_t i = 0; i < M; ++i) mu += xp[i];
      mu /= static_cast<double>(M);
      double var = 0.0;
      for (int64_t i = 0; i < M; ++i) {
        double dv = xp[i] - mu;
        var += dv * dv;
      }
      var /= static_cast<double>(M);
      double inv = 1.0 / std::sqrt(var + eps);
      (*stats)[(bb * G + gg) * 2] = mu;
      (*stats)[(bb * G + gg) * 2 + 1] = inv;
      for (int64_t c = 0; c < Cg; ++c) {
        int64_t ch = gg * Cg + c;
        double gm = gamma.data()[ch], bt = beta.data()[ch];
        const double* xr = x.data() + (bb * C + ch) * H * W;
        double* orow = out->data() + (bb * C + ch) * H * W;
        for (int64_t i = 0; i < H * W; ++i) orow[i] = gm * (xr[i] - mu) * inv + bt;
      }
    }
  }
  int64_t ix = tp.ensure_on_tape(x);
  int64_t ig = tp.ensure_on_tape(gamma);
  int64_t ib = tp.ensure_on_tape(beta);
  return tp.add_result(
      "group_norm", x.shape(), out, {ix, ig, ib},
      [ix, ig, ib, stats, B, C, G, Cg, H, W, M](Tape& t, const std::vector<double>& g) {
        const std::vector<double>& xv = t.value(ix);
        const std::vector<double>& gam = t.value(ig);
        bool gx = t.wants_grad(ix), ggm = t.wants_grad(ig), gbt = t.wants_grad(ib);
        int64_t plane = H * W;
        for (int64_t bb = 0; bb < B; ++bb) {
          for (int64_t grp = 0; grp < G; ++grp) {
            double mu = (*stats)[(bb * G + grp) * 2];
            double inv = (*stats)[(bb * G + grp) * 2 + 1];
            // First pass: per-channel sums and group-level reductions.
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int64_t c = 0; c < Cg; ++c) {
              int64_t ch = grp * Cg + c;
              const double* xr = xv.data() + (bb * C + ch) * plane;
              const double* gr = g.data() + (bb * C + ch) * plane;
              double gm = gam[ch];
              double sg = 0.0, sgx = 0.0;
              for (int64_t i = 0; i < plane; ++i) {
                double xhat = (xr[i] - mu) * inv;
                sg += gr[i];
                sgx += gr[i] * xhat;
              }
              if (gbt) t.grad_buf(ib)[ch] += sg;
              if (ggm) t.grad_buf(ig)[ch] += sgx;
              sum_dxhat += gm * sg;
              sum_dxhat_xhat += gm * sgx;
            }
            if (gx) {
              double mean_dxhat = sum_dxhat / static_cast<double>(M);
              double mean_dxhat_xhat = sum_dxhat_xhat / static_cast<double>(M);
              for (int64_t c = 0; c < Cg; ++c) {
                int64_t ch = grp * Cg + c;
                const double* xr = xv.data() + (bb * C + ch) * plane;
                const double* gr = g.data() + (bb * C + ch) * plane;
                double* dxr = t.grad_buf(ix).data() + (bb * C + ch) * plane;
                double gm = gam[ch];
                for (int64_t i = 0; i < plane; ++i) {
                  double xhat = (xr[i] - mu) * inv;
                  double dxhat = gr[i] * gm;
                  dxr[i] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
              }
            }
          }
        }
      });
}

// -----------------------------------------------------------------------------
// linear
// -----------------------------------------------------------------------------

Tensor linear(Tape& tp, const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.shape().rank() == 2, "linear: x must be (N,In)");
  require(w.shape().rank() == 2, "linear: w must be (Out,In)");
  require(b.shape().rank() == 1, "linear: b must be (Out)");
  int64_t N = x.shape().dim(0), In = x.shape().dim(1);
  int64_t Out = w.shape().dim(0);
  require(w.shape().dim(1) == In, "linear: dimension mismatch");
  require(b.shape().dim(0) == Out, "linear: bias size mismatch");
  Shape os{N, Out};
  auto out = alloc(os.numel());
  {
    MapConstMat X(x.data(), N, In);
    MapConstMat W(w.data(), Out, In);
    MapMat O(out->data(), N, Out);
    O.noalias() = X * W.transpose();
    for (int64_t r = 0; r < N; ++r)
      for (int64_t c = 0; c < Out; ++c) (*out)[r * Out + c] += b.data()[c];
  }
  int64_t ix = tp.ensure_on_tape(x);
  int64_t iw = tp.ensure_on_tape(w);
  int64_t ib = tp.ensure_on_tape(b);
  return tp.add_result(
      "linear", os, out, {ix, iw, ib},
      [ix, iw, ib, N, In, Out](Tape& t, const std::vector<double>& g) {
        MapConstMat G(g.data(), N, Out);
        if (t.wants_grad(ix)) {
          MapConstMat W(t.value(iw).data(), Out, In);
          MapMat dX(t.grad_buf(ix).data(), N, In);
          dX.noalias() += G * W;
        }
        if (t.wants_grad(iw)) {
          MapConstMat X(t.value(ix).data(), N, In);
          MapMat dW(t.grad_buf(iw).data(), Out, In);
          dW.noalias() += G.transpose() * X;
        }
        if (t.wants_grad(ib)) {
          std::vector<double>& db = t.grad_buf(ib);
          for (int64_t r = 0; r < N; ++r)
            for (int64_t c = 0; c < Out; ++c) db[c] += g[r * Out + c];
        }
      });
}

// -----------------------------------------------------------------------------
// self_attention
// -----------------------------------------------------------------------------

namespace {

void softmax_rows(double* p, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    double* row = p + r * cols;
    double m = row[0];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - m);
      s += row[c];
    }
    double invs = 1.0 / s;
    for (int64_t c = 0; c < cols; ++c) row[c] *= invs;
  }
}

struct AttnSaved {
  // Per sample: X, Q, K, V (T x C) and P (T x T).
  std::vector<std::vector<double>> X, Q, K, V, P;
};

}  // namespace

Tensor self_attention(Tape& tp, const Tensor& x, const Tensor& wq, const Tensor& wk,
                      const Tensor& wv, const Tensor& wo) {
  require(x.shape().rank() == 4, "self_attention: x must be (B,C,H,W)");
  int64_t B = x.shape().dim(0), C = x.shape().dim(1), H = x.shape().dim(2),
          W = x.shape().dim(3);
  for (const Tensor* w : {&wq, &wk, &wv, &wo})
    require(w->shape().rank() == 2 && w->shape().dim(0) == C && w->shape().dim(1) == C,
            "self_attention: non-square projection weights");
  int64_t T = H * W;
  double scale_f = 1.0 / std::sqrt(static_cast<double>(C));
  auto out = alloc(x.numel());
  auto saved = std::make_shared<AttnSaved>();
  saved->X.resize(B);
  saved->Q.resize(B);
  saved->K.resize(B);
  saved->V.resize(B);
  saved->P.resize(B);
  for (int64_t bb = 0; bb < B; ++bb) {
    auto& Xv = saved->X[bb];
    Xv.resize(static_cast<size_t>(T * C));
    // tokens as rows: X[t][c] = x[b,c,t]
    for (int64_t c = 0; c < C; ++c) {
      const double* xp = x.data() + (bb * C + c) * T;
      for (int64_t t = 0; t < T; ++t) Xv[t * C + c] = xp[t];
    }
    auto& Qv = saved->Q[bb];
    auto& Kv = saved->K[bb];
    auto& Vv = saved->V[bb];
    auto& Pv = saved->P[bb];
    Qv.resize(static_cast<size_t>(T * C));
    Kv.resize(static_cast<size_t>(T * C));
    Vv.resize(static_cast<size_t>(T * C));
    Pv.resize(static_cast<size_t>(T * T));
    MapConstMat X(Xv.data(), T, C);
    MapMat Q(Qv.data(), T, C), K(Kv.data(), T, C), V(Vv.data(), T, C), P(Pv.data(), T, T);
    Q.noalias() = X * MapConstMat(wq.data(), C, C);
    K.noalias() = X * MapConstMat(wk.data(), C, C);
    V.noalias() = X * MapConstMat(wv.data(), C, C);
    P.noalias() = Q * K.transpose() * scale_f;
    softmax_rows(Pv.data(), T, T);
    std::vector<double> A(static_cast<size_t>(T * C));
    MapMat Am(A.data(), T, C);
    Am.noalias() = P * V;
    std::vector<double> O(static_cast<size_t>(T * C));
    MapMat Om(O.data(), T, C);
    Om.noalias() = Am * MapConstMat(wo.data(), C, C);
    // back to (C,H,W) with residual
    for (int64_t c = 0; c < C; ++c) {
      double* op = out->data() + (bb * C + c) * T;
      const double* xp = x.data() + (bb * C + c) * T;
      for (int64_t t = 0; t < T; ++t) op[t] = xp[t] + O[t * C + c];
    }
  }
  int64_t ix = tp.ensure_on_tape(x);
  int64_t iq = tp.ensure_on_tape(wq);
  int64_t ik = tp.ensure_on_tape(wk);
  int64_t iv = tp.ensure_on_tape(wv);
  int64_t io = tp.ensure_on_tape(wo);
  return tp.add_result(
      "self_attention", x.shape(), out, {ix, iq, ik, iv, io},
      [ix, iq, ik, iv, io, saved, B, C, T, scale_f](Tape& t, const std::vector<double>& g) {
        bool gx = t.wants_grad(ix);
        const std::vector<double>& wqv = t.value(iq);
        const std::vector<double>& wkv = t.value(ik);
        const std::vector<double>& wvv = t.value(iv);
        const std::vector<double>& wov = t.value(io);
        for (int64_t bb = 0; bb < B; ++bb) {
          MapConstMat X(saved->X[bb].data(), T, C);
          MapConstMat Q(saved->Q[bb].data(), T, C);
          MapConstMat K(saved->K[bb].data(), T, C);
          MapConstMat V(saved->V[bb].data(), T, C);
          MapConstMat P(saved->P[bb].data(), T, T);
          // dY rows from grad layout (B,C,T)
          std::vector<double> dY(static_cast<size_t>(T * C));
          for (int64_t c = 0; c < C; ++c) {
            const double* gp = g.data() + (bb * C + c) * T;
            for (int64_t tt = 0; tt < T; ++tt) dY[tt * C + c] = gp[tt];
          }
          MapConstMat dYm(dY.data(), T, C);
          // A = P V (recomputed)
          std::vector<double> A(static_cast<size_t>(T * C));
          MapMat Am(A.data(), T, C);
          Am.noalias() = P * V;
          if (t.wants_grad(io)) {
            MapMat dWo(t.grad_buf(io).data(), C, C);
            dWo.noalias() += Am.transpose() * dYm;
          }
          std::vector<double> dA(static_cast<size_t>(T * C));
          MapMat dAm(dA.data(), T, C);
          dAm.noalias() = dYm * MapConstMat(wov.data(), C, C).transpose();
          std::vector<double> dP(static_cast<size_t>(T * T));
          MapMat dPm(dP.data(), T, T);
          dPm.noalias() = dAm * V.transpose();
          std::vector<double> dV(static_cast<size_t>(T * C));
          MapMat dVm(dV.data(), T, C);
          dVm.noalias() = P.transpose() * dAm;
          // softmax backward: dS = (dP - rowsum(dP .* P)) .* P
          std::vector<double> dS(static_cast<size_t>(T * T));
          for (int64_t r = 0; r < T; ++r) {
            const double* pr = saved->P[bb].data() + r * T;
            const double* dpr = dP.data() + r * T;
            double dot = 0.0;
            for (int64_t c = 0; c < T; ++c) dot += pr[c] * dpr[c];
            double* dsr = dS.data() + r * T;
            for (int64_t c = 0; c < T; ++c) dsr[c] = (dpr[c] - dot) * pr[c];
          }
          MapConstMat dSm(dS.data(), T, T);
          std::vector<double> dQ(static_cast<size_t>(T * C)), dK(static_cast<size_t>(T * C));
          MapMat dQm(dQ.data(), T, C), dKm(dK.data(), T, C);
          dQm.noalias() = dSm * K * scale_f;
          dKm.noalias() = dSm.transpose() * Q * scale_f;
          if (t.wants_grad(iq)) {
            MapMat dWq(t.grad_buf(iq).data(), C, C);
            dWq.noalias() += X.transpose() * dQm;
          }
          if (t.wants_grad(ik)) {
            MapMat dWk(t.grad_buf(ik).data(), C, C);
            dWk.noalias() += X.transpose() * dKm;
          }
          if (t.wants_grad(iv)) {
            MapMat dWv(t.grad_buf(iv).data(), C, C);
            dWv.noalias() += X.transpose() * dVm;
          }
          if (gx) {
            std::vector<double> dX(static_cast<size_t>(T * C));
            MapMat dXm(dX.data(), T, C);
            dXm.noalias() = dQm * MapConstMat(wqv.data(), C, C).transpose();
            dXm.noalias() += dKm * MapConstMat(wkv.data(), C, C).transpose();
            dXm.noalias() += dVm * MapConstMat(wvv.data(), C, C).transpose();
            double* dxp = t.grad_buf(ix).data();
            const double* gp = g.data();
            for (int64_t c = 0; c < C; ++c) {
              double* drow = dxp + (bb * C + c) * T;
              const double* grow = gp + (bb * C + c) * T;
              for (int64_t tt = 0; tt < T; ++tt)
                drow[tt] += grow[tt] + dX[tt * C + c];  // residual + projection paths
            }
          }
        }
      });
}

// -----------------------------------------------------------------------------
// channel_bias / global_avg_pool / diffs
// -----------------------------------------------------------------------------

Tensor channel_bias(Tape& tp, const Tensor& x, const Tensor& v) {
  require(x.shape().rank() == 4, "channel_bias: x must be (B,C,H,W)");
  int64_t B = x.shape().dim(0), C = x.shape().dim(1), plane = x.shape().dim(2) * x.shape().dim(3);
  require(v.shape().rank() == 1 && v.shape().dim(0) == C, "channel_bias: bias size mismatch");
  auto out = alloc(x.numel());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* xp = x.data() + (b * C + c) * plane;
      double* op = out->data() + (b * C + c) * plane;
      double bias = v.data()[c];
      for (int64_t i = 0; i < plane; ++i) op[i] = xp[i] + bias;
    }
  int64_t ix = tp.ensure_on_tape(x);
  int64_t iv = tp.ensure_on_tape(v);
  return tp.add_result("channel_bias", x.shape(), out, {ix, iv},
                       [ix, iv, B, C, plane](Tape& t, const std::vector<double>& g) {
                         if (t.wants_grad(ix)) t.accumulate(ix, g);
                         if (t.wants_grad(iv)) {
                           std::vector<double>& dv = t.grad_buf(iv);
                           for (int64_t b = 0; b < B; ++b)
                             for (int64_t c = 0; c < C; ++c) {
                               const double* gp = g.data() + (b * C + c) * plane;
                               double acc = 0.0;
                               for (int64_t i = 0; i < plane; ++i) acc += gp[i];
                               dv[c] += acc;
                             }
                         }
                       });
}

Tensor global_avg_pool(Tape& tp, const Tensor& x) {
  require(x.shape().rank() == 4, "global_avg_pool: x must be (B,C,H,W)");
  int64_t B = x.shape().dim(0), C = x.shape().dim(1), plane = x.shape().dim(2) * x.shape().dim(3);
  require(plane > 0, "global_avg_pool: empty spatial extent");
  Shape os{B, C};
  auto out = alloc(os.numel());
  double inv = 1.0 / static_cast<double>(plane);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* xp = x.data() + (b * C + c) * plane;
      double acc = 0.0;
      for (int64_t i = 0; i < plane; ++i) acc += xp[i];
      (*out)[b * C + c] = acc * inv;
    }
  int64_t ix = tp.ensure_on_tape(x);
  return tp.add_result("global_avg_pool", os, out, {ix},
                       [ix, B, C, plane, inv](Tape& t, const std::vector<double>& g) {
                         if (!t.wants_grad(ix)) return;
                         std::vector<double>& dx = t.grad_buf(ix);
                         for (int64_t b = 0; b < B; ++b)
                           for (int64_t c = 0; c < C; ++c) {
                             double gv = g[b * C + c] * inv;
                             double* dp = dx.data() + (b * C + c) * plane;
                             for (int64_t i = 0; i < plane; ++i) dp[i] += gv;
                           }
                       });
}

namespace {

// Shared implementation for forward differences along the last two axes.
Tensor diff_impl(Tape& tp, const Tensor& x, bool along_x) {
  int r = x.shape().rank();
  require(r >= 2, "diff: rank >= 2 tensor expected");
  int64_t W = x.shape().dim(r - 1);
  int64_t H = x.shape().dim(r - 2);
  int64_t outer = x.numel() / (H * W);
  require((along_x ? W : H) >= 2, "diff: axis too small");
  std::vector<int64_t> dims;
  for (int i = 0; i < r; ++i) dims.push_back(x.shape().dim(i));
  if (along_x)
    dims[r - 1] = W - 1;
  else
    dims[r - 2] = H - 1;
  Shape os = Shape::of(dims);
  auto out = alloc(os.numel());
  int64_t Ho = along_x ? H : H - 1;
  int64_t Wo = along_x ? W - 1 : W;
  for (int64_t o = 0; o < outer; ++o) {
    const double* xp = x.data() + o * H * W;
    double* op = out->data() + o * Ho * Wo;
    for (int64_t i = 0; i < Ho; ++i)
      for (int64_t j = 0; j < Wo; ++j)
        op[i * Wo + j] = along_x ? xp[i * W + j + 1] - xp[i * W + j]
                                 : xp[(i + 1) * W + j] - xp[i * W + j];
  }
  int64_t ix = tp.ensure_on_tape(x);
  return tp.add_result(along_x ? "diff_x" : "diff_y", os, out, {ix},
                       [ix, outer, H, W, Ho, Wo, along_x](Tape& t,
                                                          const std::vector<double>& g) {
                         if (!t.wants_grad(ix)) return;
                         std::vector<double>& dx = t.grad_buf(ix);
                         for (int64_t o = 0; o < outer; ++o) {
                           double* dp = dx.data() + o * H * W;
                           const double* gp = g.data() + o * Ho * Wo;
                           for (int64_t i = 0; i < Ho; ++i)
                             for (int64_t j = 0; j < Wo; ++j) {
                               double gv = gp[i * Wo + j];
                               if (along_x) {
                                 dp[i * W + j + 1] += gv;
                                 dp[i * W + j] -= gv;
                               } else {
                                 dp[(i + 1) * W + j] += gv;
                                 dp[i * W + j] -= gv;
                               }
                             }
                         }
                       });
}

}  // namespace

Tensor diff_x(Tape& tp, const Tensor& x) { return diff_impl(tp, x, true); }
Tensor diff_y(Tape& tp, const Tensor& x) { return diff_impl(tp, x, false); }

// -----------------------------------------------------------------------------
// dropout / cross_entropy
// -----------------------------------------------------------------------------

Tensor dropout(Tape& tp, const Tensor& x, double p, bool training, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
  if (!training || p == 0.0) {
    // Identity pass-through (gradient flows unchanged).
    int64_t ix = tp.ensure_on_tape(x);
    auto out = std::make_shared<std::vector<double>>(x.vec());
    return tp.add_result("dropout", x.shape(), out, {ix},
                         [ix](Tape& t, const std::vector<double>& g) { t.accumulate(ix, g); });
  }
  int64_t n = x.numel();
  auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
  double keep = 1.0 - p;
  double inv_keep = 1.0 / keep;
  auto out = alloc(n);
  for (int64_t i = 0; i < n; ++i) {
    bool k = rng.uniform() >= p;
    (*mask)[i] = k;
    (*out)[i] = k ? x.data()[i] * inv_keep : 0.0;
  }
  int64_t ix = tp.ensure_on_tape(x);
  return tp.add_result("dropout", x.shape(), out, {ix},
                       [ix, mask, inv_keep](Tape& t, const std::vector<double>& g) {
                         if (!t.wants_grad(ix)) return;
                         std::vector<double>& dx = t.grad_buf(ix);
                         for (size_t i = 0; i < g.size(); ++i)
                           if ((*mask)[i]) dx[i] += g[i] * inv_keep;
                       });
}

Tensor cross_entropy(Tape& tp, const Tensor& logits, int target_class) {
  int64_t K;
  if (logits.shape().rank() == 1)
    K = logits.shape().dim(0);
  else if (logits.shape().rank() == 2 && logits.shape().dim(0) == 1)
    K = logits.shape().dim(1);
  else
    fail("cross_entropy: logits must be (K) or (1,K)");
  require(target_class >= 0 && target_class < K, "cross_entropy: target out of range");
  const double* l = logits.data();
  double m = l[0];
  for (int64_t i = 1; i < K; ++i) m = std::max(m, l[i]);
  double s = 0.0;
  for (int64_t i = 0; i < K; ++i) s += std::exp(l[i] - m);
  double lse = m + std::log(s);
  auto out = alloc(1);
  (*out)[0] = lse - l[target_class];
  int64_t ix = tp.ensure_on_tape(logits);
  return tp.add_result("cross_entropy", Shape{1}, out, {ix},
                       [ix, K, target_class](Tape& t, const std::vector<double>& g) {
                         if (!t.wants_grad(ix)) return;
                         const std::vector<double>& l = t.value(ix);
                         double m = l[0];
                         for (int64_t i = 1; i < K; ++i) m = std::max(m, l[i]);
                         double s = 0.0;
                         for (int64_t i = 0; i < K; ++i) s += std::exp(l[i] - m);
                         std::vector<double>& dx = t.grad_buf(ix);
                         for (int64_t i = 0; i < K; ++i) {
                           double soft = std::exp(l[i] - m) / s;
                           dx[i] += g[0] * (soft - (i == target_class ? 1.0 : 0.0));
                         }
                       });
}

// -----------------------------------------------------------------------------
// warp
// -----------------------------------------------------------------------------

Tensor warp(Tape& tp, const Tensor& x, const Tensor& phi) {
  int64_t B, H, W;
  bool batched;
  if (x.shape().rank() == 2) {
    require(phi.shape().rank() == 3 && phi.shape().dim(0) == 2, "warp: phi must be (2,H,W)");
    B = 1;
    H = x.shape().dim(0);
    W = x.shape().dim(1);
    require(phi.shape().dim(1) == H && phi.shape().dim(2) == W, "warp: shape mismatch");
    batched = false;
  } else if (x.shape().rank() == 4) {
    require(x.shape().dim(1) == 1, "warp: x must have one channel");
    require(phi.shape().rank() == 4 && phi.shape().dim(1) == 2, "warp: phi must be (B,2,H,W)");
    B = x.shape().dim(0);
    H = x.shape().dim(2);
    W = x.shape().dim(3);
    require(phi.shape().dim(0) == B && phi.shape().dim(2) == H && phi.shape().dim(3) == W,
            "warp: shape mismatch");
    batched = true;
  } else {
    fail("warp: x must be (H,W) or (B,1,H,W)");
  }
  int64_t plane = H * W;
  auto out = alloc(x.numel());
  for (int64_t b = 0; b < B; ++b) {
    const double* img = x.data() + b * plane;
    const double* dxp = phi.data() + (batched ? (b * 2) * plane : 0);
    const double* dyp = dxp + plane;
    double* op = out->data() + b * plane;
    for (int64_t i = 0; i < H; ++i) {
      for (int64_t j = 0; j < W; ++j) {
        double sx = static_cast<double>(j) + dxp[i * W + j];
        double sy = static_cast<double>(i) + dyp[i * W + j];
        double cx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
        double cy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
        int64_t x0 = static_cast<int64_t>(std::floor(cx));
        int64_t y0 = static_cast<int64_t>(std::floor(cy));
        int64_t x1 = std::min(x0 + 1, W - 1);
        int64_t y1 = std::min(y0 + 1, H - 1);
        double tx = cx - static_cast<double>(x0);
        double ty = cy - static_cast<double>(y0);
        double v00 = img[y0 * W + x0], v01 = img[y0 * W + x1];
        double v10 = img[y1 * W + x0], v11 = img[y1 * W + x1];
        op[i * W + j] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) +
                        ty * ((1.0 - tx) * v10 + tx * v11);
      }
    }
  }
  int64_t ix = tp.ensure_on_tape(x);
  int64_t ip = tp.ensure_on_tape(phi);
  return tp.add_result(
      "warp", x.shape(), out, {ix, ip},
      [ix, ip, B, H, W, plane, batched](Tape& t, const std::vector<double>& g) {
        const std::vector<double>& xv = t.value(ix);
        const std::vector<double>& pv = t.value(ip);
        bool gx = t.wants_grad(ix), gp = t.wants_grad(ip);
        for (int64_t b = 0; b < B; ++b) {
          const double* img = xv.data() + b * plane;
          const double* dxp = pv.data() + (batched ? (b * 2) * plane : 0);
          const double* dyp = dxp + plane;
          const double* gr = g.data() + b * plane;
          double* dimg = gx ? t.grad_buf(ix).data() + b * plane : nullptr;
          double* dphix = nullptr;
          double* dphiy = nullptr;
          if (gp) {
            dphix = t.grad_buf(ip).data() + (batched ? (b * 2) * plane : 0);
            dphiy = dphix + plane;
          }
          for (int64_t i = 0; i < H; ++i) {
            for (int64_t j = 0; j < W; ++j) {
              double gv = gr[i * W + j];
              if (gv == 0.0) continue;
              double sx = static_cast<double>(j) + dxp[i * W + j];
              double sy = static_cast<double>(i) + dyp[i * W + j];
              bool clamped_x = sx < 0.0 || sx > static_cast<double>(W - 1);
              bool clamped_y = sy < 0.0 || sy > static_cast<double>(H - 1);
              double cx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
              double cy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
              int64_t x0 = static_cast<int64_t>(std::floor(cx));
              int64_t y0 = static_cast<int64_t>(std::floor(cy));
              int64_t x1 = std::min(x0 + 1, W - 1);
              int64_t y1 = std::min(y0 + 1, H - 1);
              double tx = cx - static_cast<double>(x0);
              double ty = cy - static_cast<double>(y0);
              double v00 = img[y0 * W + x0], v01 = img[y0 * W + x1];
              double v10 = img[y1 * W + x0], v11 = img[y1 * W + x1];
              if (dimg) {
                dimg[y0 * W + x0] += gv * (1.0 - tx) * (1.0 - ty);
                dimg[y0 * W + x1] += gv * tx * (1.0 - ty);
                dimg[y1 * W + x0] += gv * (1.0 - tx) * ty;
                dimg[y1 * W + x1] += gv * tx * ty;
              }
              if (dphix) {
                double dsx = (1.0 - ty) * (v01 - v00) + ty * (v11 - v10);
                double dsy = (1.0 - tx) * (v10 - v00) + tx * (v11 - v01);
                if (!clamped_x) dphix[i * W + j] += gv * dsx;
                if (!clamped_y) dphiy[i * W + j] += gv * dsy;
              }
            }
          }
        }
      });
}

// -----------------------------------------------------------------------------
// construction helpers
// -----------------------------------------------------------------------------

Tensor randn(const Shape& s, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(s.numel()));
  for (double& x : v) x = rng.gaussian();
  return Tensor::from(s, std::move(v));
}

Tensor rand_uniform(const Shape& s, Rng& rng, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(s.numel()));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(s, std::move(v));
}

}  // namespace dmm

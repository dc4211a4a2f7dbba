// Copyright 2026 The advmlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ==============================================================================

// Differentiable operations on Tensor<S>.
//
// Binary elementwise ops broadcast by right-aligning shapes; each aligned
// extent must match or be 1. Reductions, softmax and layer norm operate on a
// single dimension. All functions are free templates over the scalar type.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "advmlm/rng.hpp"
#include "advmlm/tensor.hpp"

namespace advmlm {

namespace detail {

template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;
template <class S>
using MatMap = Eigen::Map<RowMatrix<S>>;

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const Index db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ContractViolation("broadcast: incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
    out[r - 1 - i] = da == 1 ? db : da;
  }
  return out;
}

/// Maps flat indices of a broadcast result back to one input.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& in, const Shape& out) {
    const Index n_in = numel(in);
    const Index n_out = numel(out);
    if (in == out || n_in == n_out) {
      kind_ = Kind::kSame;
      return;
    }
    if (n_in == 1) {
      kind_ = Kind::kScalar;
      return;
    }
    // in is a trailing suffix of out (leading dims dropped or 1).
    bool suffix = true;
    {
      std::size_t lead = out.size() - in.size();
      for (std::size_t i = 0; i < in.size(); ++i) suffix = suffix && in[i] == out[lead + i];
    }
    if (suffix) {
      kind_ = Kind::kTile;
      period_ = n_in;
      return;
    }
    kind_ = Kind::kGeneral;
    const std::size_t r = out.size();
    std::vector<Index> stride(r, 0);
    Index s = 1;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t od = r - 1 - i;
      const Index d = i < in.size() ? in[in.size() - 1 - i] : 1;
      stride[od] = d == 1 ? 0 : s;
      s *= d;
    }
    table_.resize(static_cast<std::size_t>(n_out));
    std::vector<Index> counter(r, 0);
    Index cur = 0;
    for (Index flat = 0; flat < n_out; ++flat) {
      table_[static_cast<std::size_t>(flat)] = cur;
      for (std::size_t k = r; k-- > 0;) {
        ++counter[k];
        cur += stride[k];
        if (counter[k] < out[k]) break;
        cur -= stride[k] * counter[k];
        counter[k] = 0;
      }
    }
  }

  Index operator()(Index i) const {
    switch (kind_) {
      case Kind::kSame:
        return i;
      case Kind::kScalar:
        return 0;
      case Kind::kTile:
        return i % period_;
      default:
        return table_[static_cast<std::size_t>(i)];
    }
  }

 private:
  enum class Kind { kSame, kScalar, kTile, kGeneral };
  Kind kind_ = Kind::kSame;
  Index period_ = 1;
  std::vector<Index> table_;
};

template <class S, class Fwd, class DA, class DB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name, Fwd fwd, DA da, DB db) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const Index n = numel(out_shape);
  BroadcastMap ma(a.shape(), out_shape), mb(b.shape(), out_shape);
  typename Tensor<S>::Array z(n);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (Index i = 0; i < n; ++i) z[i] = fwd(av[ma(i)], bv[mb(i)]);
  return make_result<S>(std::move(out_shape), std::move(z), {a, b}, name,
                        [ma, mb, da, db, n](Node<S>& self) {
                          auto& A = *self.inputs[0];
                          auto& B = *self.inputs[1];
                          const auto& g = self.grad;
                          if (A.requires_grad) {
                            auto& ga = A.grad_buffer();
                            for (Index i = 0; i < n; ++i) {
                              const Index ia = ma(i);
                              ga[ia] += da(A.value[ia], B.value[mb(i)], self.value[i], g[i]);
                            }
                          }
                          if (B.requires_grad) {
                            auto& gb = B.grad_buffer();
                            for (Index i = 0; i < n; ++i) {
                              const Index ib = mb(i);
                              gb[ib] += db(A.value[ma(i)], B.value[ib], self.value[i], g[i]);
                            }
                          }
                        });
}

template <class S, class Fwd, class DX>
Tensor<S> unary_op(const Tensor<S>& x, const char* name, Fwd fwd, DX dx) {
  const Index n = x.size();
  typename Tensor<S>::Array y(n);
  const auto& xv = x.value();
  for (Index i = 0; i < n; ++i) y[i] = fwd(xv[i]);
  return make_result<S>(x.shape(), std::move(y), {x}, name, [dx, n](Node<S>& self) {
    auto& X = *self.inputs[0];
    auto& gx = X.grad_buffer();
    for (Index i = 0; i < n; ++i) gx[i] += dx(X.value[i], self.value[i], self.grad[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "add", [](S x, S y) { return x + y; }, [](S, S, S, S g) { return g; },
      [](S, S, S, S g) { return g; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "sub", [](S x, S y) { return x - y; }, [](S, S, S, S g) { return g; },
      [](S, S, S, S g) { return -g; });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y, S, S g) { return g * y; },
      [](S x, S, S, S g) { return g * x; });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  if (b.requires_grad() && grad_enabled() && (b.value() == S(0)).any())
    throw NumericFault("div: zero divisor under grad");
  return detail::binary_op<S>(
      a, b, "div", [](S x, S y) { return x / y; }, [](S, S y, S, S g) { return g / y; },
      [](S, S y, S z, S g) { return -g * z / y; });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, "neg", [](S v) { return -v; }, [](S, S, S g) { return -g; });
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, "exp", [](S v) { return std::exp(v); }, [](S, S y, S g) { return g * y; });
}

template <class S>
Tensor<S> log(const Tensor<S>& x) {
  if (x.requires_grad() && grad_enabled() && (x.value() <= S(0)).any())
    throw NumericFault("log: non-positive input under grad");
  return detail::unary_op<S>(
      x, "log", [](S v) { return std::log(v); }, [](S v, S, S g) { return g / v; });
}

template <class S>
Tensor<S> tanh(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, "tanh", [](S v) { return std::tanh(v); }, [](S, S y, S g) { return g * (S(1) - y * y); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, "sigmoid",
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y, S g) { return g * y * (S(1) - y); });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, "relu", [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S, S g) { return v > S(0) ? g : S(0); });
}

template <class S>
Tensor<S> square(const Tensor<S>& x) {
  return detail::unary_op<S>(
      x, "square", [](S v) { return v * v; }, [](S v, S, S g) { return S(2) * v * g; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op<S>(
      x, "add_scalar", [c](S v) { return v + c; }, [](S, S, S g) { return g; });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op<S>(
      x, "mul_scalar", [c](S v) { return v * c; }, [c](S, S, S g) { return g * c; });
}

/// max(x, c) against a constant. Gradient passes where x > c.
template <class S>
Tensor<S> maximum(const Tensor<S>& x, S c) {
  return detail::unary_op<S>(
      x, "maximum", [c](S v) { return v > c ? v : c; },
      [c](S v, S, S g) { return v > c ? g : S(0); });
}

/// 0/1 indicator of x > c. Never carries gradient.
template <class S>
Tensor<S> greater(const Tensor<S>& x, S c) {
  return Tensor<S>(x.shape(), (x.value() > c).template cast<S>());
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, S c) { return mul_scalar(a, c); }
template <class S>
Tensor<S> operator*(S c, const Tensor<S>& a) { return mul_scalar(a, c); }
template <class S>
Tensor<S> operator+(const Tensor<S>& a, S c) { return add_scalar(a, c); }
template <class S>
Tensor<S> operator-(S c, const Tensor<S>& a) { return add_scalar(neg(a), c); }

// ---------------------------------------------------------------------------
// Gradient routing
// ---------------------------------------------------------------------------

/// Same values, cut from the graph.
template <class S>
Tensor<S> detach(const Tensor<S>& x) {
  return Tensor<S>(x.shape(), x.value());
}

/// Forward returns `hard` exactly; backward routes the incoming gradient to
/// `soft` unchanged. Equivalent to hard + soft - detach(soft) without the
/// rounding of the two extra additions.
template <class S>
Tensor<S> straight_through_estimator(const Tensor<S>& hard, const Tensor<S>& soft) {
  require(hard.shape() == soft.shape(), "straight_through_estimator: shape mismatch " +
                                            shape_str(hard.shape()) + " vs " + shape_str(soft.shape()));
  return make_result<S>(hard.shape(), hard.value(), {soft}, "straight_through",
                        [](detail::Node<S>& self) { self.inputs[0]->grad_buffer() += self.grad; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  return make_result<S>(Shape{}, Tensor<S>::Array::Constant(1, x.value().sum()), {x}, "sum",
                        [](detail::Node<S>& self) { self.inputs[0]->grad_buffer() += self.grad[0]; });
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  require(x.size() > 0, "mean: empty tensor");
  return mul_scalar(sum(x), S(1) / static_cast<S>(x.size()));
}

namespace detail {
struct DimSplit {
  Index outer = 1, len = 1, inner = 1;
};
inline DimSplit split_at(const Shape& shape, int d) {
  DimSplit s;
  for (int i = 0; i < d; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.len = shape[static_cast<std::size_t>(d)];
  for (std::size_t i = static_cast<std::size_t>(d) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}
}  // namespace detail

/// Sum along one dimension.
template <class S>
Tensor<S> sum(const Tensor<S>& x, int dim, bool keepdim = false) {
  const int d = x.normalize_dim(dim);
  const auto sp = detail::split_at(x.shape(), d);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[static_cast<std::size_t>(d)] = 1;
  } else {
    out_shape.erase(out_shape.begin() + d);
  }
  typename Tensor<S>::Array y = Tensor<S>::Array::Zero(sp.outer * sp.inner);
  const auto& xv = x.value();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index j = 0; j < sp.len; ++j)
      for (Index i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += xv[(o * sp.len + j) * sp.inner + i];
  return make_result<S>(std::move(out_shape), std::move(y), {x}, "sum_dim", [sp](detail::Node<S>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index j = 0; j < sp.len; ++j)
        for (Index i = 0; i < sp.inner; ++i) gx[(o * sp.len + j) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Batched matrix product a[..., m, k] * b[..., k, n]. Batch dims must match
/// or one operand must be a plain matrix.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands must be at least 2-D, got " +
                                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Index m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  require(k == k2, "matmul: inner extents differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  Index a_step = m * k, b_step = k * n;
  if (b_batch.empty()) {
    batch = a_batch;
    b_step = 0;
  } else if (a_batch.empty()) {
    batch = b_batch;
    a_step = 0;
  } else {
    require(a_batch == b_batch, "matmul: batch dims differ: " + shape_str(a.shape()) + " * " +
                                    shape_str(b.shape()));
    batch = a_batch;
  }
  const Index nb = numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  typename Tensor<S>::Array c(nb * m * n);
  using detail::ConstMatMap;
  using detail::MatMap;
  if (b_step == 0) {
    // Fold the batch into the row dimension: one GEMM.
    MatMap<S>(c.data(), nb * m, n).noalias() =
        ConstMatMap<S>(a.data(), nb * m, k) * ConstMatMap<S>(b.data(), k, n);
  } else {
    for (Index t = 0; t < nb; ++t)
      MatMap<S>(c.data() + t * m * n, m, n).noalias() =
          ConstMatMap<S>(a.data() + t * a_step, m, k) * ConstMatMap<S>(b.data() + t * b_step, k, n);
  }
  return make_result<S>(std::move(out_shape), std::move(c), {a, b}, "matmul",
                        [m, k, n, nb, a_step, b_step](detail::Node<S>& self) {
                          auto& A = *self.inputs[0];
                          auto& B = *self.inputs[1];
                          const S* g = self.grad.data();
                          if (b_step == 0) {
                            ConstMatMap<S> G(g, nb * m, n);
                            if (A.requires_grad)
                              MatMap<S>(A.grad_buffer().data(), nb * m, k).noalias() +=
                                  G * ConstMatMap<S>(B.value.data(), k, n).transpose();
                            if (B.requires_grad)
                              MatMap<S>(B.grad_buffer().data(), k, n).noalias() +=
                                  ConstMatMap<S>(A.value.data(), nb * m, k).transpose() * G;
                            return;
                          }
                          for (Index t = 0; t < nb; ++t) {
                            ConstMatMap<S> G(g + t * m * n, m, n);
                            if (A.requires_grad)
                              MatMap<S>(A.grad_buffer().data() + t * a_step, m, k).noalias() +=
                                  G * ConstMatMap<S>(B.value.data() + t * b_step, k, n).transpose();
                            if (B.requires_grad)
                              MatMap<S>(B.grad_buffer().data() + t * b_step, k, n).noalias() +=
                                  ConstMatMap<S>(A.value.data() + t * a_step, m, k).transpose() * G;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Max-subtracted softmax along `dim`.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int dim = -1) {
  const int d = x.normalize_dim(dim);
  const auto sp = detail::split_at(x.shape(), d);
  const auto& xv = x.value();
  typename Tensor<S>::Array y(x.size());
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index j = 0; j < sp.len; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      S total = 0;
      for (Index j = 0; j < sp.len; ++j) {
        const S e = std::exp(xv[base + j * sp.inner] - mx);
        y[base + j * sp.inner] = e;
        total += e;
      }
      for (Index j = 0; j < sp.len; ++j) y[base + j * sp.inner] /= total;
    }
  }
  return make_result<S>(x.shape(), std::move(y), {x}, "softmax", [sp](detail::Node<S>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& yv = self.value;
    const auto& g = self.grad;
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.len * sp.inner + i;
        S dot = 0;
        for (Index j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * yv[base + j * sp.inner];
        for (Index j = 0; j < sp.len; ++j) {
          const Index at = base + j * sp.inner;
          gx[at] += yv[at] * (g[at] - dot);
        }
      }
    }
  });
}

/// Softmax over the last dimension restricted to entries where `keep` is
/// nonzero. Excluded entries are exactly zero; a row with nothing kept is all
/// zeros. `keep` is a constant broadcastable to x.
template <class S>
Tensor<S> masked_softmax(const Tensor<S>& x, const Tensor<S>& keep) {
  const Index len = x.dim(-1);
  const Index rows = x.size() / len;
  detail::BroadcastMap km(keep.shape(), detail::broadcast_shapes(keep.shape(), x.shape()));
  require(detail::broadcast_shapes(keep.shape(), x.shape()) == x.shape(),
          "masked_softmax: mask " + shape_str(keep.shape()) + " does not broadcast to " + shape_str(x.shape()));
  const auto& xv = x.value();
  const auto& kv = keep.value();
  typename Tensor<S>::Array y = Tensor<S>::Array::Zero(x.size());
  for (Index r = 0; r < rows; ++r) {
    const Index base = r * len;
    S mx = -std::numeric_limits<S>::infinity();
    for (Index j = 0; j < len; ++j)
      if (kv[km(base + j)] != S(0)) mx = std::max(mx, xv[base + j]);
    if (mx == -std::numeric_limits<S>::infinity()) continue;
    S total = 0;
    for (Index j = 0; j < len; ++j) {
      if (kv[km(base + j)] == S(0)) continue;
      const S e = std::exp(xv[base + j] - mx);
      y[base + j] = e;
      total += e;
    }
    for (Index j = 0; j < len; ++j) y[base + j] /= total;
  }
  return make_result<S>(x.shape(), std::move(y), {x}, "masked_softmax", [len, rows](detail::Node<S>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& yv = self.value;
    const auto& g = self.grad;
    for (Index r = 0; r < rows; ++r) {
      const Index base = r * len;
      S dot = 0;
      for (Index j = 0; j < len; ++j) dot += g[base + j] * yv[base + j];
      for (Index j = 0; j < len; ++j) gx[base + j] += yv[base + j] * (g[base + j] - dot);
    }
  });
}

/// Layer normalization over the last dimension with affine gain and bias.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps = S(1e-5)) {
  const Index d = x.dim(-1);
  require(gain.size() == d && bias.size() == d, "layer_norm: gain/bias extent must equal last dim");
  const Index rows = x.size() / d;
  const auto& xv = x.value();
  typename Tensor<S>::Array xhat(x.size()), y(x.size()), inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const auto row = xv.segment(r * d, d);
    const S mu = row.mean();
    const S var = (row - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    xhat.segment(r * d, d) = (row - mu) * is;
    y.segment(r * d, d) = xhat.segment(r * d, d) * gain.value() + bias.value();
  }
  return make_result<S>(x.shape(), std::move(y), {x, gain, bias}, "layer_norm",
                        [xhat, inv_std, d, rows](detail::Node<S>& self) {
                          auto& X = *self.inputs[0];
                          auto& G = *self.inputs[1];
                          auto& B = *self.inputs[2];
                          const auto& g = self.grad;
                          for (Index r = 0; r < rows; ++r) {
                            const auto gr = g.segment(r * d, d);
                            const auto xr = xhat.segment(r * d, d);
                            if (G.requires_grad) G.grad_buffer() += gr * xr;
                            if (B.requires_grad) B.grad_buffer() += gr;
                            if (X.requires_grad) {
                              const typename Tensor<S>::Array dxhat = gr * G.value;
                              const S m1 = dxhat.mean();
                              const S m2 = (dxhat * xr).mean();
                              X.grad_buffer().segment(r * d, d) += inv_std[r] * (dxhat - m1 - xr * m2);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result<S>(std::move(shape), x.value(), {x}, "reshape",
                        [](detail::Node<S>& self) { self.inputs[0]->grad_buffer() += self.grad; });
}

template <class S>
Tensor<S> unsqueeze(const Tensor<S>& x, int dim) {
  Shape s = x.shape();
  const int r = x.rank() + 1;
  const int d = dim < 0 ? dim + r : dim;
  require(d >= 0 && d < r, "unsqueeze: dim out of range");
  s.insert(s.begin() + d, 1);
  return reshape(x, std::move(s));
}

/// Reorders dimensions: out.dim(i) == x.dim(perm[i]).
template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  require(static_cast<int>(perm.size()) == r, "permute: permutation rank mismatch");
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<Index> in_stride(static_cast<std::size_t>(r));
  {
    Index s = 1;
    for (int i = r - 1; i >= 0; --i) {
      in_stride[static_cast<std::size_t>(i)] = s;
      s *= x.shape()[static_cast<std::size_t>(i)];
    }
  }
  std::vector<Index> stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
    stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const Index n = x.size();
  std::vector<Index> src(static_cast<std::size_t>(n));
  std::vector<Index> counter(static_cast<std::size_t>(r), 0);
  Index cur = 0;
  for (Index flat = 0; flat < n; ++flat) {
    src[static_cast<std::size_t>(flat)] = cur;
    for (int k = r - 1; k >= 0; --k) {
      const auto uk = static_cast<std::size_t>(k);
      ++counter[uk];
      cur += stride[uk];
      if (counter[uk] < out_shape[uk]) break;
      cur -= stride[uk] * counter[uk];
      counter[uk] = 0;
    }
  }
  typename Tensor<S>::Array y(n);
  const auto& xv = x.value();
  for (Index i = 0; i < n; ++i) y[i] = xv[src[static_cast<std::size_t>(i)]];
  return make_result<S>(std::move(out_shape), std::move(y), {x}, "permute",
                        [src = std::move(src)](detail::Node<S>& self) {
                          auto& gx = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += self.grad[static_cast<Index>(i)];
                        });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x, int d0 = -2, int d1 = -1) {
  std::vector<int> perm(static_cast<std::size_t>(x.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<std::size_t>(x.normalize_dim(d0))], perm[static_cast<std::size_t>(x.normalize_dim(d1))]);
  return permute(x, perm);
}

/// Slice [start, start + len) along `dim`.
template <class S>
Tensor<S> narrow(const Tensor<S>& x, int dim, Index start, Index len) {
  const int d = x.normalize_dim(dim);
  const auto sp = detail::split_at(x.shape(), d);
  require(start >= 0 && len >= 0 && start + len <= sp.len,
          "narrow: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") outside extent " +
              std::to_string(sp.len));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(d)] = len;
  typename Tensor<S>::Array y(sp.outer * len * sp.inner);
  const auto& xv = x.value();
  for (Index o = 0; o < sp.outer; ++o)
    y.segment(o * len * sp.inner, len * sp.inner) = xv.segment((o * sp.len + start) * sp.inner, len * sp.inner);
  return make_result<S>(std::move(out_shape), std::move(y), {x}, "narrow", [sp, start, len](detail::Node<S>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (Index o = 0; o < sp.outer; ++o)
      gx.segment((o * sp.len + start) * sp.inner, len * sp.inner) += self.grad.segment(o * len * sp.inner, len * sp.inner);
  });
}

/// Index `i` along `dim`, dropping that dimension.
template <class S>
Tensor<S> select(const Tensor<S>& x, int dim, Index i) {
  const int d = x.normalize_dim(dim);
  Shape s = x.shape();
  s.erase(s.begin() + d);
  return reshape(narrow(x, d, i, 1), std::move(s));
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int dim) {
  require(!parts.empty(), "concat: no inputs");
  const int d = parts.front().normalize_dim(dim);
  Shape out_shape = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    require(p.rank() == parts.front().rank(), "concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != d) require(p.dim(i) == out_shape[static_cast<std::size_t>(i)], "concat: extent mismatch off the join dim");
    total += p.dim(d);
  }
  out_shape[static_cast<std::size_t>(d)] = total;
  const auto sp = detail::split_at(out_shape, d);
  typename Tensor<S>::Array y(numel(out_shape));
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Index pl = p.dim(d);
    for (Index o = 0; o < sp.outer; ++o)
      y.segment((o * sp.len + off) * sp.inner, pl * sp.inner) = p.value().segment(o * pl * sp.inner, pl * sp.inner);
    off += pl;
  }
  return make_result<S>(std::move(out_shape), std::move(y), parts, "concat", [sp, offsets](detail::Node<S>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& P = *self.inputs[k];
      if (!P.requires_grad) continue;
      const Index pl = P.value.size() / (sp.outer * sp.inner);
      auto& gp = P.grad_buffer();
      for (Index o = 0; o < sp.outer; ++o)
        gp.segment(o * pl * sp.inner, pl * sp.inner) += self.grad.segment((o * sp.len + offsets[k]) * sp.inner, pl * sp.inner);
    }
  });
}

template <class S>
Tensor<S> stack(const std::vector<Tensor<S>>& parts, int dim) {
  require(!parts.empty(), "stack: no inputs");
  std::vector<Tensor<S>> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) lifted.push_back(unsqueeze(p, dim));
  return concat(lifted, dim);
}

// ---------------------------------------------------------------------------
// Discrete helpers
// ---------------------------------------------------------------------------

/// Row lookup table[ids] -> [..., d]; `prefix` is the shape of `ids`.
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<Index>& ids, Shape prefix) {
  require(table.rank() == 2, "embedding_lookup: table must be 2-D");
  require(numel(prefix) == static_cast<Index>(ids.size()), "embedding_lookup: ids/prefix size mismatch");
  const Index vocab = table.dim(0), d = table.dim(1);
  typename Tensor<S>::Array y(static_cast<Index>(ids.size()) * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const Index id = ids[r];
    require(id >= 0 && id < vocab, "embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " +
                                       std::to_string(vocab));
    y.segment(static_cast<Index>(r) * d, d) = table.value().segment(id * d, d);
  }
  prefix.push_back(d);
  return make_result<S>(std::move(prefix), std::move(y), {table}, "embedding", [ids, d](detail::Node<S>& self) {
    auto& gt = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < ids.size(); ++r) gt.segment(ids[r] * d, d) += self.grad.segment(static_cast<Index>(r) * d, d);
  });
}

/// Constant one-hot rows for `ids` over `depth` classes.
template <class S>
Tensor<S> one_hot(const std::vector<Index>& ids, Shape prefix, Index depth) {
  require(numel(prefix) == static_cast<Index>(ids.size()), "one_hot: ids/prefix size mismatch");
  typename Tensor<S>::Array y = Tensor<S>::Array::Zero(static_cast<Index>(ids.size()) * depth);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && ids[r] < depth, "one_hot: id out of range");
    y[static_cast<Index>(r) * depth + ids[r]] = S(1);
  }
  prefix.push_back(depth);
  return Tensor<S>(std::move(prefix), std::move(y));
}

/// Constant one-hot of the argmax along the last dimension (first index wins ties).
template <class S>
Tensor<S> argmax_one_hot(const Tensor<S>& x) {
  const Index len = x.dim(-1);
  const Index rows = x.size() / len;
  typename Tensor<S>::Array y = Tensor<S>::Array::Zero(x.size());
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    x.value().segment(r * len, len).maxCoeff(&best);
    y[r * len + best] = S(1);
  }
  return Tensor<S>(x.shape(), std::move(y));
}

/// Per-row negative log-likelihood of `targets` under softmax(logits) along
/// the last dimension. Rows with a negative target yield 0 and no gradient.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<Index>& targets) {
  const Index classes = logits.dim(-1);
  const Index rows = logits.size() / classes;
  require(static_cast<Index>(targets.size()) == rows, "cross_entropy: one target per row required");
  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  typename Tensor<S>::Array nll = Tensor<S>::Array::Zero(rows);
  typename Tensor<S>::Array probs(logits.size());
  const auto& lv = logits.value();
  for (Index r = 0; r < rows; ++r) {
    const auto row = lv.segment(r * classes, classes);
    const S mx = row.maxCoeff();
    const S lse = mx + std::log((row - mx).exp().sum());
    probs.segment(r * classes, classes) = (row - lse).exp();
    const Index t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    require(t < classes, "cross_entropy: target outside class range");
    nll[r] = lse - row[t];
  }
  return make_result<S>(std::move(out_shape), std::move(nll), {logits}, "cross_entropy",
                        [probs = std::move(probs), targets, classes, rows](detail::Node<S>& self) {
                          auto& gl = self.inputs[0]->grad_buffer();
                          for (Index r = 0; r < rows; ++r) {
                            const Index t = targets[static_cast<std::size_t>(r)];
                            if (t < 0) continue;
                            const S g = self.grad[r];
                            gl.segment(r * classes, classes) += g * probs.segment(r * classes, classes);
                            gl[r * classes + t] -= g;
                          }
                        });
}

/// Inverted dropout; identity when rate == 0.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const S scale = S(1.0 / (1.0 - rate));
  typename Tensor<S>::Array keep(x.size());
  for (Index i = 0; i < x.size(); ++i) keep[i] = rng.uniform() < rate ? S(0) : scale;
  return mul(x, Tensor<S>(x.shape(), std::move(keep)));
}

}  // namespace advmlm

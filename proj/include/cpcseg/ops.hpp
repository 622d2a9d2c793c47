// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Differentiable primitives. Every op computes its forward values eagerly and,
// when gradients are enabled, records a closure computing the vector-Jacobian
// product for its inputs.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpcseg/errors.hpp"
#include "cpcseg/random.hpp"
#include "cpcseg/tensor.hpp"

namespace cpcseg {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;

namespace detail {

template <typename S>
MatrixMap<S> as_matrix(std::vector<S>& v, std::size_t r, std::size_t c) {
  return MatrixMap<S>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename S>
ConstMatrixMap<S> as_matrix(const std::vector<S>& v, std::size_t r, std::size_t c) {
  return ConstMatrixMap<S>(v.data(), static_cast<Eigen::Index>(r),
                           static_cast<Eigen::Index>(c));
}

template <typename S>
void require_2d(const Tensor<S>& t, const char* op) {
  if (t.dim() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto da = a.data(), db = b.data();
  return detail::make_result<S>("add", a.shape(), std::move(out), {da, db},
                                [da, db](TensorData<S>& o) {
                                  for (auto* d : {da.get(), db.get()}) {
                                    if (!d->requires_grad) continue;
                                    auto g = detail::grad_of(*d);
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto da = a.data(), db = b.data();
  return detail::make_result<S>("mul", a.shape(), std::move(out), {da, db},
                                [da, db](TensorData<S>& o) {
                                  if (da->requires_grad) {
                                    auto g = detail::grad_of(*da);
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += o.grad[i] * db->value[i];
                                  }
                                  if (db->requires_grad) {
                                    auto g = detail::grad_of(*db);
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += o.grad[i] * da->value[i];
                                  }
                                });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  auto da = a.data();
  return detail::make_result<S>("scale", a.shape(), std::move(out), {da},
                                [da, factor](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += o.grad[i] * factor;
                                });
}

/// Adds a vector of length n to every row of an m x n matrix.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& a, const Tensor<S>& bias) {
  detail::require_2d(a, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n)
    throw ShapeError("add_bias: bias of " + std::to_string(bias.numel()) + " for " +
                     std::to_string(n) + " columns");
  std::vector<S> out(a.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a[r * n + c] + bias[c];
  auto da = a.data(), db = bias.data();
  return detail::make_result<S>("add_bias", a.shape(), std::move(out), {da, db},
                                [da, db, m, n](TensorData<S>& o) {
                                  if (da->requires_grad) {
                                    auto g = detail::grad_of(*da);
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                  if (db->requires_grad) {
                                    auto g = detail::grad_of(*db);
                                    for (std::size_t r = 0; r < m; ++r)
                                      for (std::size_t c = 0; c < n; ++c) g[c] += o.grad[r * n + c];
                                  }
                                });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > S(0) ? a[i] : S(0);
  auto da = a.data();
  return detail::make_result<S>("relu", a.shape(), std::move(out), {da},
                                [da](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    if (da->value[i] > S(0)) g[i] += o.grad[i];
                                });
}

/// Inverted dropout: surviving elements are scaled by 1/(1-p). Identity when
/// not training or p == 0.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: probability must be in [0, 1)");
  if (!training || p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const S factor = S(1.0 / (1.0 - p));
  std::vector<S> mask(a.numel());
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = keep(rng) ? factor : S(0);
    out[i] = a[i] * mask[i];
  }
  auto da = a.data();
  return detail::make_result<S>("dropout", a.shape(), std::move(out), {da},
                                [da, mask = std::move(mask)](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += o.grad[i] * mask[i];
                                });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S total = S(0);
  for (S v : a.values()) total += v;
  auto da = a.data();
  return detail::make_result<S>("sum", {1}, {total}, {da}, [da](TensorData<S>& o) {
    auto g = detail::grad_of(*da);
    for (auto& x : g) x += o.grad[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), S(1) / S(a.numel()));
}

/// Row sums of an m x n matrix, shape [m].
template <typename S>
Tensor<S> sum_rows(const Tensor<S>& a) {
  detail::require_2d(a, "sum_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<S> out(m, S(0));
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += a[r * n + c];
  auto da = a.data();
  return detail::make_result<S>("sum_rows", {m}, std::move(out), {da},
                                [da, m, n](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t r = 0; r < m; ++r)
                                    for (std::size_t c = 0; c < n; ++c) g[r * n + c] += o.grad[r];
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto da = a.data();
  std::vector<S> out(a.values().begin(), a.values().end());
  return detail::make_result<S>("reshape", std::move(shape), std::move(out), {da},
                                [da](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<S> out(a.numel());
  detail::as_matrix(out, n, m) = detail::as_matrix(a.data()->value, m, n).transpose();
  auto da = a.data();
  return detail::make_result<S>("transpose", {n, m}, std::move(out), {da},
                                [da, m, n](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  MatrixMap<S>(g.data(), m, n) +=
                                      detail::as_matrix(o.grad, n, m).transpose();
                                });
}

/// Selects rows of a matrix (repeats allowed).
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& a, std::vector<std::size_t> index) {
  detail::require_2d(a, "gather_rows");
  const std::size_t n = a.cols();
  std::vector<S> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.values().begin() + index[i] * n, n, out.begin() + i * n);
  }
  auto da = a.data();
  const std::size_t k = index.size();
  return detail::make_result<S>("gather_rows", {k, n}, std::move(out), {da},
                                [da, n, index = std::move(index)](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t i = 0; i < index.size(); ++i)
                                    for (std::size_t c = 0; c < n; ++c)
                                      g[index[i] * n + c] += o.grad[i * n + c];
                                });
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeError("slice_rows: bad range");
  std::vector<std::size_t> index(end - begin);
  std::iota(index.begin(), index.end(), begin);
  return gather_rows(a, std::move(index));
}

/// Stacks matrices with equal column counts.
template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<TensorData<S>>> inputs;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column count mismatch");
    m += p.rows();
    inputs.push_back(p.data());
  }
  std::vector<S> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  auto captured = inputs;
  return detail::make_result<S>("concat_rows", {m, n}, std::move(out), std::move(inputs),
                                [captured](TensorData<S>& o) {
                                  std::size_t off = 0;
                                  for (const auto& d : captured) {
                                    if (d->requires_grad) {
                                      auto g = detail::grad_of(*d);
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[off + i];
                                    }
                                    off += d->value.size();
                                  }
                                });
}

/// Selects elements of a tensor by flat index, shape [index.size()].
template <typename S>
Tensor<S> gather(const Tensor<S>& a, std::vector<std::size_t> index) {
  std::vector<S> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.numel()) throw ShapeError("gather: index out of range");
    out[i] = a[index[i]];
  }
  auto da = a.data();
  const std::size_t k = index.size();
  return detail::make_result<S>("gather", {k}, std::move(out), {da},
                                [da, index = std::move(index)](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t i = 0; i < index.size(); ++i)
                                    g[index[i]] += o.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// op(a) * op(b) where op transposes when the flag is set.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ (" + shape_str(a.shape()) +
                     (trans_a ? "^T" : "") + " * " + shape_str(b.shape()) + (trans_b ? "^T" : "") +
                     ")");
  auto da = a.data(), db = b.data();
  std::vector<S> out(m * n);
  auto A = detail::as_matrix(da->value, ar, ac);
  auto B = detail::as_matrix(db->value, br, bc);
  auto C = detail::as_matrix(out, m, n);
  if (!trans_a && !trans_b)
    C.noalias() = A * B;
  else if (!trans_a && trans_b)
    C.noalias() = A * B.transpose();
  else if (trans_a && !trans_b)
    C.noalias() = A.transpose() * B;
  else
    C.noalias() = A.transpose() * B.transpose();
  return detail::make_result<S>(
      "matmul", {m, n}, std::move(out), {da, db},
      [da, db, ar, ac, br, bc, m, n, trans_a, trans_b](TensorData<S>& o) {
        auto G = detail::as_matrix(std::as_const(o.grad), m, n);
        auto A = detail::as_matrix(std::as_const(da->value), ar, ac);
        auto B = detail::as_matrix(std::as_const(db->value), br, bc);
        if (da->requires_grad) {
          auto gA = detail::grad_of(*da);
          MatrixMap<S> dA(gA.data(), ar, ac);
          if (!trans_a && !trans_b)
            dA.noalias() += G * B.transpose();
          else if (!trans_a && trans_b)
            dA.noalias() += G * B;
          else if (trans_a && !trans_b)
            dA.noalias() += B * G.transpose();
          else
            dA.noalias() += B.transpose() * G.transpose();
        }
        if (db->requires_grad) {
          auto gB = detail::grad_of(*db);
          MatrixMap<S> dB(gB.data(), br, bc);
          if (!trans_a && !trans_b)
            dB.noalias() += A.transpose() * G;
          else if (!trans_a && trans_b)
            dB.noalias() += G.transpose() * A;
          else if (trans_a && !trans_b)
            dB.noalias() += A * G;
          else
            dB.noalias() += G.transpose() * A.transpose();
        }
      });
}

/// x W^T + b with W stored [out x in] and x [rows x in].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  return add_bias(matmul(x, weight, false, true), bias);
}

/// Row-wise softmax of an m x n matrix.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  detail::require_2d(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<S> out(a.numel());
  for (std::size_t r = 0; r < m; ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, a[r * n + c]);
    S z = S(0);
    for (std::size_t c = 0; c < n; ++c) z += out[r * n + c] = std::exp(a[r * n + c] - mx);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  auto da = a.data();
  return detail::make_result<S>("softmax_rows", a.shape(), std::move(out), {da},
                                [da, m, n](TensorData<S>& o) {
                                  auto g = detail::grad_of(*da);
                                  for (std::size_t r = 0; r < m; ++r) {
                                    S dot = S(0);
                                    for (std::size_t c = 0; c < n; ++c)
                                      dot += o.grad[r * n + c] * o.value[r * n + c];
                                    for (std::size_t c = 0; c < n; ++c)
                                      g[r * n + c] += o.value[r * n + c] * (o.grad[r * n + c] - dot);
                                  }
                                });
}

/// Rows scaled to unit Euclidean norm; rows with norm below eps are divided
/// by eps instead.
template <typename S>
Tensor<S> l2_normalize_rows(const Tensor<S>& a, S eps = S(1e-8)) {
  detail::require_2d(a, "l2_normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<S> out(a.numel());
  std::vector<S> norms(m);
  for (std::size_t r = 0; r < m; ++r) {
    S ss = S(0);
    for (std::size_t c = 0; c < n; ++c) ss += a[r * n + c] * a[r * n + c];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a[r * n + c] / norms[r];
  }
  auto da = a.data();
  return detail::make_result<S>(
      "l2_normalize_rows", a.shape(), std::move(out), {da},
      [da, m, n, eps, norms = std::move(norms)](TensorData<S>& o) {
        auto g = detail::grad_of(*da);
        for (std::size_t r = 0; r < m; ++r) {
          const S* y = &o.value[r * n];
          const S* gy = &o.grad[r * n];
          if (norms[r] <= eps) {
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += gy[c] / eps;
            continue;
          }
          S dot = S(0);
          for (std::size_t c = 0; c < n; ++c) dot += y[c] * gy[c];
          for (std::size_t c = 0; c < n; ++c) g[r * n + c] += (gy[c] - y[c] * dot) / norms[r];
        }
      });
}

/// Cosine similarity of corresponding rows, shape [m].
template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "cosine_similarity");
  return sum_rows(mul(l2_normalize_rows(a), l2_normalize_rows(b)));
}

// ---------------------------------------------------------------------------
// Convolution and normalization

enum class Padding { kSameStrided, kValid };

inline std::size_t conv_output_length(std::size_t length, std::size_t width, std::size_t stride,
                                      Padding padding) {
  if (padding == Padding::kSameStrided) return (length + stride - 1) / stride;
  return (length - width) / stride + 1;
}

/// 1-D convolution of x [in x L] with weights [out x in x width]. "Same-strided"
/// zero-pads so the output has ceil(L / stride) frames, placing the extra
/// padding sample (if any) on the left. bias may be undefined.
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 std::size_t stride, Padding padding) {
  detail::require_2d(x, "conv1d");
  if (weight.dim() != 3) throw ShapeError("conv1d: weights must be [out x in x width]");
  if (stride == 0) throw ShapeError("conv1d: stride must be positive");
  const std::size_t cin = x.rows(), len = x.cols();
  const std::size_t cout = weight.size(0), width = weight.size(2);
  if (weight.size(1) != cin)
    throw ShapeError("conv1d: input has " + std::to_string(cin) + " channels, weights expect " +
                     std::to_string(weight.size(1)));
  if (width < stride) throw ShapeError("conv1d: width must be >= stride");
  if (padding == Padding::kValid && len < width)
    throw ShapeError("conv1d: input shorter than filter with valid padding");
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv1d: bias size mismatch");
  if (len == 0) throw ShapeError("conv1d: empty input");

  const std::size_t lout = conv_output_length(len, width, stride, padding);
  std::ptrdiff_t pad_left = 0;
  if (padding == Padding::kSameStrided) {
    const std::ptrdiff_t total = std::max<std::ptrdiff_t>(
        0, static_cast<std::ptrdiff_t>((lout - 1) * stride + width) -
               static_cast<std::ptrdiff_t>(len));
    pad_left = total - total / 2;
  }
  const std::size_t kdim = cin * width;
  // im2col: columns[(ci * width + k), t] = x[ci, t * stride + k - pad_left]
  std::vector<S> columns(kdim * lout, S(0));
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t k = 0; k < width; ++k) {
      S* dst = &columns[(ci * width + k) * lout];
      const S* src = &x.data()->value[ci * len];
      for (std::size_t t = 0; t < lout; ++t) {
        const std::ptrdiff_t pos =
            static_cast<std::ptrdiff_t>(t * stride + k) - pad_left;
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) dst[t] = src[pos];
      }
    }
  std::vector<S> out(cout * lout);
  auto Y = detail::as_matrix(out, cout, lout);
  Y.noalias() = detail::as_matrix(weight.data()->value, cout, kdim) *
                detail::as_matrix(columns, kdim, lout);
  if (bias.defined())
    for (std::size_t co = 0; co < cout; ++co) Y.row(co).array() += bias[co];

  auto dx = x.data(), dw = weight.data();
  std::vector<std::shared_ptr<TensorData<S>>> inputs{dx, dw};
  std::shared_ptr<TensorData<S>> db;
  if (bias.defined()) {
    db = bias.data();
    inputs.push_back(db);
  }
  return detail::make_result<S>(
      "conv1d", {cout, lout}, std::move(out), std::move(inputs),
      [dx, dw, db, cin, len, cout, width, stride, lout, kdim, pad_left,
       columns = std::move(columns)](TensorData<S>& o) {
        auto G = detail::as_matrix(std::as_const(o.grad), cout, lout);
        if (dw->requires_grad) {
          auto g = detail::grad_of(*dw);
          MatrixMap<S>(g.data(), cout, kdim).noalias() +=
              G * detail::as_matrix(columns, kdim, lout).transpose();
        }
        if (db && db->requires_grad) {
          auto g = detail::grad_of(*db);
          // Plain loop: Eigen's vectorised sum peels by pointer alignment,
          // which would make the result depend on the allocation.
          for (std::size_t co = 0; co < cout; ++co) {
            S acc = 0;
            for (std::size_t t = 0; t < lout; ++t) acc += o.grad[co * lout + t];
            g[co] += acc;
          }
        }
        if (dx->requires_grad) {
          RowMatrix<S> dcol = detail::as_matrix(std::as_const(dw->value), cout, kdim).transpose() * G;
          auto g = detail::grad_of(*dx);
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t k = 0; k < width; ++k) {
              const S* src = &dcol(static_cast<Eigen::Index>(ci * width + k), 0);
              S* dst = &g[ci * len];
              for (std::size_t t = 0; t < lout; ++t) {
                const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + k) - pad_left;
                if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) dst[pos] += src[t];
              }
            }
        }
      });
}

/// Per time step (column) normalization across channels followed by a
/// per-channel affine map: y = gain * (x - mean) / sqrt(var + eps) + bias.
template <typename S>
Tensor<S> channel_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                       S eps = S(1e-5)) {
  detail::require_2d(x, "channel_norm");
  const std::size_t ch = x.rows(), len = x.cols();
  if (len == 0) throw ShapeError("channel_norm: empty sequence");
  if (gain.numel() != ch || bias.numel() != ch)
    throw ShapeError("channel_norm: gain/bias must have one entry per channel");
  std::vector<S> mu(len, S(0)), inv(len, S(0));
  const auto& xv = x.data()->value;
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t < len; ++t) mu[t] += xv[c * len + t];
  for (auto& m : mu) m /= S(ch);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t < len; ++t) {
      const S d = xv[c * len + t] - mu[t];
      inv[t] += d * d;
    }
  for (auto& v : inv) v = S(1) / std::sqrt(v / S(ch) + eps);
  std::vector<S> xhat(x.numel()), out(x.numel());
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t i = c * len + t;
      xhat[i] = (xv[i] - mu[t]) * inv[t];
      out[i] = gain[c] * xhat[i] + bias[c];
    }
  auto dx = x.data(), dg = gain.data(), db = bias.data();
  return detail::make_result<S>(
      "channel_norm", x.shape(), std::move(out), {dx, dg, db},
      [dx, dg, db, ch, len, xhat = std::move(xhat), inv = std::move(inv)](TensorData<S>& o) {
        if (dg->requires_grad || db->requires_grad) {
          auto gg = detail::grad_of(*dg);
          auto gb = detail::grad_of(*db);
          for (std::size_t c = 0; c < ch; ++c) {
            S sg = S(0), sb = S(0);
            for (std::size_t t = 0; t < len; ++t) {
              sg += o.grad[c * len + t] * xhat[c * len + t];
              sb += o.grad[c * len + t];
            }
            if (dg->requires_grad) gg[c] += sg;
            if (db->requires_grad) gb[c] += sb;
          }
        }
        if (!dx->requires_grad) return;
        std::vector<S> s1(len, S(0)), s2(len, S(0));
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t t = 0; t < len; ++t) {
            const S gh = o.grad[c * len + t] * dg->value[c];
            s1[t] += gh;
            s2[t] += gh * xhat[c * len + t];
          }
        auto g = detail::grad_of(*dx);
        const S n = S(ch);
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t t = 0; t < len; ++t) {
            const std::size_t i = c * len + t;
            const S gh = o.grad[i] * dg->value[c];
            g[i] += inv[t] / n * (n * gh - s1[t] - xhat[i] * s2[t]);
          }
      });
}

// ---------------------------------------------------------------------------
// Recurrence

/// One LSTM layer over x [T x in] with zero initial state. Weights follow the
/// (input, forget, cell, output) gate order: w_ih [4H x in], w_hh [4H x H],
/// bias [4H]. Returns the hidden states [T x H].
template <typename S>
Tensor<S> lstm_layer(const Tensor<S>& x, const Tensor<S>& w_ih, const Tensor<S>& w_hh,
                     const Tensor<S>& bias) {
  detail::require_2d(x, "lstm_layer");
  const std::size_t steps = x.rows(), in = x.cols();
  if (steps == 0) throw ShapeError("lstm_layer: empty sequence");
  if (w_hh.dim() != 2 || w_hh.rows() % 4 != 0 || w_hh.cols() * 4 != w_hh.rows())
    throw ShapeError("lstm_layer: w_hh must be [4H x H]");
  const std::size_t hid = w_hh.cols(), g4 = 4 * hid;
  if (w_ih.dim() != 2 || w_ih.rows() != g4 || w_ih.cols() != in)
    throw ShapeError("lstm_layer: w_ih must be [4H x in]");
  if (bias.numel() != g4) throw ShapeError("lstm_layer: bias must have 4H entries");

  // gates[t] holds activated (i, f, g, o); cells[t] the cell state.
  std::vector<S> gates(steps * g4);
  auto Gm = detail::as_matrix(gates, steps, g4);
  Gm.noalias() = detail::as_matrix(x.data()->value, steps, in) *
                 detail::as_matrix(w_ih.data()->value, g4, in).transpose();
  for (std::size_t t = 0; t < steps; ++t) Gm.row(t) += detail::as_matrix(bias.data()->value, 1, g4);
  std::vector<S> cells(steps * hid), tanh_cells(steps * hid), out(steps * hid);
  auto Whh = detail::as_matrix(w_hh.data()->value, g4, hid);
  Eigen::Matrix<S, Eigen::Dynamic, 1> pre(g4);
  auto sigmoid = [](S v) { return S(1) / (S(1) + std::exp(-v)); };
  for (std::size_t t = 0; t < steps; ++t) {
    S* gt = &gates[t * g4];
    if (t > 0) {
      pre.noalias() = Whh * Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(
                                &out[(t - 1) * hid], static_cast<Eigen::Index>(hid));
      for (std::size_t j = 0; j < g4; ++j) gt[j] += pre[static_cast<Eigen::Index>(j)];
    }
    for (std::size_t j = 0; j < hid; ++j) {
      const S i = sigmoid(gt[j]);
      const S f = sigmoid(gt[hid + j]);
      const S g = std::tanh(gt[2 * hid + j]);
      const S o = sigmoid(gt[3 * hid + j]);
      gt[j] = i;
      gt[hid + j] = f;
      gt[2 * hid + j] = g;
      gt[3 * hid + j] = o;
      const S prev = t > 0 ? cells[(t - 1) * hid + j] : S(0);
      const S c = f * prev + i * g;
      cells[t * hid + j] = c;
      tanh_cells[t * hid + j] = std::tanh(c);
      out[t * hid + j] = o * tanh_cells[t * hid + j];
    }
  }

  auto dx = x.data(), dih = w_ih.data(), dhh = w_hh.data(), db = bias.data();
  return detail::make_result<S>(
      "lstm_layer", {steps, hid}, std::move(out), {dx, dih, dhh, db},
      [dx, dih, dhh, db, steps, in, hid, g4, gates = std::move(gates), cells = std::move(cells),
       tanh_cells = std::move(tanh_cells)](TensorData<S>& o) {
        std::vector<S> dpre(steps * g4);
        std::vector<S> dh(hid, S(0)), dc(hid, S(0));
        auto Whh = detail::as_matrix(std::as_const(dhh->value), g4, hid);
        Eigen::Matrix<S, Eigen::Dynamic, 1> back(hid);
        for (std::size_t tt = steps; tt-- > 0;) {
          const S* gt = &gates[tt * g4];
          S* dg = &dpre[tt * g4];
          for (std::size_t j = 0; j < hid; ++j) {
            const S i = gt[j], f = gt[hid + j], g = gt[2 * hid + j], og = gt[3 * hid + j];
            const S th = tanh_cells[tt * hid + j];
            const S dht = o.grad[tt * hid + j] + dh[j];
            const S dct = dc[j] + dht * og * (S(1) - th * th);
            const S prev = tt > 0 ? cells[(tt - 1) * hid + j] : S(0);
            dg[j] = dct * g * i * (S(1) - i);
            dg[hid + j] = dct * prev * f * (S(1) - f);
            dg[2 * hid + j] = dct * i * (S(1) - g * g);
            dg[3 * hid + j] = dht * th * og * (S(1) - og);
            dc[j] = dct * f;
          }
          back.noalias() = Whh.transpose() *
                           Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(
                               dg, static_cast<Eigen::Index>(g4));
          for (std::size_t j = 0; j < hid; ++j) dh[j] = back[static_cast<Eigen::Index>(j)];
        }
        auto dG = detail::as_matrix(std::as_const(dpre), steps, g4);
        if (dih->requires_grad) {
          auto g = detail::grad_of(*dih);
          MatrixMap<S>(g.data(), g4, in).noalias() +=
              dG.transpose() * detail::as_matrix(std::as_const(dx->value), steps, in);
        }
        if (dhh->requires_grad && steps > 1) {
          // h_{t-1} for t = 1..T-1 are rows 0..T-2 of the output.
          auto g = detail::grad_of(*dhh);
          ConstMatrixMap<S> hprev(o.value.data(), static_cast<Eigen::Index>(steps - 1),
                                  static_cast<Eigen::Index>(hid));
          MatrixMap<S>(g.data(), g4, hid).noalias() +=
              dG.bottomRows(static_cast<Eigen::Index>(steps - 1)).transpose() * hprev;
        }
        if (db->requires_grad) {
          auto g = detail::grad_of(*db);
          for (std::size_t t = 0; t < steps; ++t)
            for (std::size_t j = 0; j < g4; ++j) g[j] += dpre[t * g4 + j];
        }
        if (dx->requires_grad) {
          auto g = detail::grad_of(*dx);
          MatrixMap<S>(g.data(), steps, in).noalias() +=
              dG * detail::as_matrix(std::as_const(dih->value), g4, in);
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention core: for each head h,
/// softmax(q_h k_h^T / sqrt(d_h)) v_h, heads concatenated. With causal set
/// (requires equal query and key counts), query i only sees keys j <= i.
template <typename S>
Tensor<S> multihead_attend(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                           std::size_t heads, bool causal) {
  detail::require_2d(q, "multihead_attend");
  detail::require_same_shape(k, v, "multihead_attend");
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0)
    throw ShapeError("multihead_attend: dimension " + std::to_string(d) +
                     " not divisible by head count " + std::to_string(heads));
  if (k.cols() != d) throw ShapeError("multihead_attend: key/query width mismatch");
  if (nk == 0 || nq == 0) throw ShapeError("multihead_attend: empty sequence");
  if (causal && nq != nk) throw ShapeError("multihead_attend: causal mask needs equal lengths");
  const std::size_t dh = d / heads;
  const S inv_scale = S(1) / std::sqrt(S(dh));
  using Idx = Eigen::Index;
  using Stride = Eigen::OuterStride<>;
  using CBlock = Eigen::Map<const RowMatrix<S>, 0, Stride>;

  std::vector<S> probs(heads * nq * nk, S(0));
  std::vector<S> out(nq * d, S(0));
  for (std::size_t h = 0; h < heads; ++h) {
    CBlock qh(q.data()->value.data() + h * dh, Idx(nq), Idx(dh), Stride(Idx(d)));
    CBlock kh(k.data()->value.data() + h * dh, Idx(nk), Idx(dh), Stride(Idx(d)));
    CBlock vh(v.data()->value.data() + h * dh, Idx(nk), Idx(dh), Stride(Idx(d)));
    MatrixMap<S> P(probs.data() + h * nq * nk, Idx(nq), Idx(nk));
    P.noalias() = (qh * kh.transpose()) * inv_scale;
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t visible = causal ? i + 1 : nk;
      S* row = &P(Idx(i), 0);
      S mx = row[0];
      for (std::size_t j = 1; j < visible; ++j) mx = std::max(mx, row[j]);
      S z = S(0);
      for (std::size_t j = 0; j < visible; ++j) z += row[j] = std::exp(row[j] - mx);
      for (std::size_t j = 0; j < visible; ++j) row[j] /= z;
      for (std::size_t j = visible; j < nk; ++j) row[j] = S(0);
    }
    Eigen::Map<RowMatrix<S>, 0, Stride> oh(out.data() + h * dh, Idx(nq), Idx(dh), Stride(Idx(d)));
    oh.noalias() = P * vh;
  }
  auto dq = q.data(), dk = k.data(), dv = v.data();
  return detail::make_result<S>(
      "multihead_attend", {nq, d}, std::move(out), {dq, dk, dv},
      [dq, dk, dv, heads, nq, nk, d, dh, inv_scale, causal,
       probs = std::move(probs)](TensorData<S>& o) {
        using BlockMap = Eigen::Map<RowMatrix<S>, 0, Stride>;
        auto gq = dq->requires_grad ? detail::grad_of(*dq) : std::span<S>();
        auto gk = dk->requires_grad ? detail::grad_of(*dk) : std::span<S>();
        auto gv = dv->requires_grad ? detail::grad_of(*dv) : std::span<S>();
        RowMatrix<S> dP{Idx(nq), Idx(nk)};
        for (std::size_t h = 0; h < heads; ++h) {
          CBlock qh(dq->value.data() + h * dh, Idx(nq), Idx(dh), Stride(Idx(d)));
          CBlock kh(dk->value.data() + h * dh, Idx(nk), Idx(dh), Stride(Idx(d)));
          CBlock vh(dv->value.data() + h * dh, Idx(nk), Idx(dh), Stride(Idx(d)));
          CBlock go(o.grad.data() + h * dh, Idx(nq), Idx(dh), Stride(Idx(d)));
          ConstMatrixMap<S> P(probs.data() + h * nq * nk, Idx(nq), Idx(nk));
          if (!gv.empty()) {
            BlockMap gvh(gv.data() + h * dh, Idx(nk), Idx(dh), Stride(Idx(d)));
            gvh.noalias() += P.transpose() * go;
          }
          if (gq.empty() && gk.empty()) continue;
          dP.noalias() = go * vh.transpose();
          for (std::size_t i = 0; i < nq; ++i) {
            const std::size_t visible = causal ? i + 1 : nk;
            S dot = S(0);
            for (std::size_t j = 0; j < visible; ++j) dot += dP(Idx(i), Idx(j)) * P(Idx(i), Idx(j));
            for (std::size_t j = 0; j < visible; ++j)
              dP(Idx(i), Idx(j)) = P(Idx(i), Idx(j)) * (dP(Idx(i), Idx(j)) - dot) * inv_scale;
            for (std::size_t j = visible; j < nk; ++j) dP(Idx(i), Idx(j)) = S(0);
          }
          if (!gq.empty()) {
            BlockMap gqh(gq.data() + h * dh, Idx(nq), Idx(dh), Stride(Idx(d)));
            gqh.noalias() += dP * kh;
          }
          if (!gk.empty()) {
            BlockMap gkh(gk.data() + h * dh, Idx(nk), Idx(dh), Stride(Idx(d)));
            gkh.noalias() += dP.transpose() * qh;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Contrastive scoring

/// Noise-contrastive negative log-likelihoods read from a score matrix.
/// Term i uses score row rows[i] and the `width` columns
/// candidates[i*width .. (i+1)*width), the first of which is the positive:
///   out[i] = logsumexp_j s[row, cand_j] - s[row, cand_0].
template <typename S>
Tensor<S> contrastive_nll(const Tensor<S>& scores, std::vector<std::size_t> rows,
                          std::vector<std::size_t> candidates, std::size_t width) {
  detail::require_2d(scores, "contrastive_nll");
  if (width < 2) throw ShapeError("contrastive_nll: need a positive and at least one negative");
  if (candidates.size() != rows.size() * width)
    throw ShapeError("contrastive_nll: candidate table size mismatch");
  const std::size_t n_terms = rows.size(), cols = scores.cols();
  const auto& sv = scores.data()->value;
  for (S v : sv)
    if (std::isnan(v)) throw NumericError("contrastive_nll: NaN score");
  std::vector<S> out(n_terms);
  std::vector<S> soft(n_terms * width);
  for (std::size_t i = 0; i < n_terms; ++i) {
    if (rows[i] >= scores.rows()) throw ShapeError("contrastive_nll: row out of range");
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t c = candidates[i * width + j];
      if (c >= cols) throw ShapeError("contrastive_nll: candidate out of range");
      mx = std::max(mx, sv[rows[i] * cols + c]);
    }
    S z = S(0);
    for (std::size_t j = 0; j < width; ++j)
      z += soft[i * width + j] = std::exp(sv[rows[i] * cols + candidates[i * width + j]] - mx);
    for (std::size_t j = 0; j < width; ++j) soft[i * width + j] /= z;
    out[i] = mx + std::log(z) - sv[rows[i] * cols + candidates[i * width]];
  }
  auto ds = scores.data();
  return detail::make_result<S>(
      "contrastive_nll", {n_terms}, std::move(out), {ds},
      [ds, cols, width, rows = std::move(rows), candidates = std::move(candidates),
       soft = std::move(soft)](TensorData<S>& o) {
        auto g = detail::grad_of(*ds);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const S gi = o.grad[i];
          if (gi == S(0)) continue;
          S* grow = &g[rows[i] * cols];
          for (std::size_t j = 0; j < width; ++j)
            grow[candidates[i * width + j]] += gi * soft[i * width + j];
          grow[candidates[i * width]] -= gi;
        }
      });
}

}  // namespace cpcseg

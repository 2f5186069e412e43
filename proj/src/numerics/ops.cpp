// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace m3::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

/// Grad buffer of parent `i`, or nullptr when that parent is a constant.
template <typename T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

template <typename T>
const Tensor<T>& parent_value(const Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_nonempty_cols(const Shape& s, const char* op) {
  if (s.empty() || s.back() == 0) {
    throw DimensionError(std::string(op) + ": last extent must be at least 1, got " + shape_str(s));
  }
}

template <typename T>
Var<T> finish(Tensor<T> out, std::vector<Var<T>> parents, typename Var<T>::BackwardFn fn,
              const char* op) {
  require_finite(out, op);
  return Var<T>::make(std::move(out), std::move(parents), std::move(fn), op);
}

template <typename T>
T row_logsumexp(const T* x, std::size_t n) {
  T m = x[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[j]);
  T s = 0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - m);
  return m + std::log(s);
}

void require_row_stochastic(const auto& t, const char* op) {
  const std::size_t cols = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (t(r, c) < 0) throw ContractError(std::string(op) + ": negative probability");
      s += t(r, c);
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw ContractError(std::string(op) + ": row " + std::to_string(r) + " sums to " +
                          std::to_string(s));
    }
  }
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> out({a.shape()[0], b.shape()[1]});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  return finish<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        auto g = as_matrix(std::as_const(self.grad));
        if (auto* ga = parent_grad(self, 0)) {
          as_matrix(*ga).noalias() += g * as_matrix(parent_value(self, 1)).transpose();
        }
        if (auto* gb = parent_grad(self, 1)) {
          as_matrix(*gb).noalias() += as_matrix(parent_value(self, 0)).transpose() * g;
        }
      },
      "matmul");
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 2, "matmul_nt");
  require_rank(b.shape(), 2, "matmul_nt");
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("matmul_nt: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor<T> out({a.shape()[0], b.shape()[0]});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value()).transpose();
  return finish<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        auto g = as_matrix(std::as_const(self.grad));
        if (auto* ga = parent_grad(self, 0)) {
          as_matrix(*ga).noalias() += g * as_matrix(parent_value(self, 1));
        }
        if (auto* gb = parent_grad(self, 1)) {
          as_matrix(*gb).noalias() += g.transpose() * as_matrix(parent_value(self, 0));
        }
      },
      "matmul_nt");
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return finish<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
          if (auto* g = parent_grad(self, k)) {
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
          }
        }
      },
      "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return finish<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = parent_grad(self, 1)) {
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
        }
      },
      "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return finish<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
        }
        if (auto* g = parent_grad(self, 1)) {
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
        }
      },
      "mul");
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& bias) {
  require_rank(bias.shape(), 1, "add_row");
  require_nonempty_cols(x.shape(), "add_row");
  if (x.shape().back() != bias.shape()[0]) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* row = out.row(r);
    for (std::size_t c = 0; c < n; ++c) row[c] += bias.value()[c];
  }
  return finish<T>(
      std::move(out), {x, bias},
      [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = parent_grad(self, 1)) {
          const std::size_t n = g->numel();
          for (std::size_t r = 0; r < self.grad.rows(); ++r) {
            const T* row = self.grad.row(r);
            for (std::size_t c = 0; c < n; ++c) (*g)[c] += row[c];
          }
        }
      },
      "add_row");
}

template <typename T>
Var<T> scale(const Var<T>& x, double factor) {
  Tensor<T> out = x.value();
  const T f = static_cast<T>(factor);
  for (auto& v : out.values()) v *= f;
  return finish<T>(
      std::move(out), {x},
      [f](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += f * self.grad[i];
        }
      },
      "scale");
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  return finish<T>(
      Tensor<T>::scalar(s), {x},
      [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          const T up = self.grad[0];
          for (auto& v : g->values()) v += up;
        }
      },
      "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

template <typename T>
Var<T> add_scalars(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw DimensionError("add_scalars: no terms");
  T s = 0;
  for (const auto& t : terms) {
    if (t.value().numel() != 1) throw DimensionError("add_scalars: non-scalar term");
    s += t.value()[0];
  }
  return finish<T>(
      Tensor<T>::scalar(s), terms,
      [](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          if (auto* g = parent_grad(self, k)) (*g)[0] += self.grad[0];
        }
      },
      "add_scalars");
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t len) {
  require_nonempty_cols(x.shape(), "slice_cols");
  const std::size_t n = x.shape().back();
  if (len == 0 || start + len > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") outside " + shape_str(x.shape()));
  }
  if (start == 0 && len == n) return x;
  Shape shape = x.shape();
  shape.back() = len;
  Tensor<T> out(shape);
  const std::size_t rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.value().row(r) + start, len, out.row(r));
  }
  return finish<T>(
      std::move(out), {x},
      [start, len](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t r = 0; r < self.grad.rows(); ++r) {
            T* dst = g->row(r) + start;
            const T* src = self.grad.row(r);
            for (std::size_t c = 0; c < len; ++c) dst[c] += src[c];
          }
        }
      },
      "slice_cols");
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t len) {
  require_rank(x.shape(), 2, "slice_rows");
  const std::size_t n = x.shape()[0];
  if (len == 0 || start + len > n) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") outside " + shape_str(x.shape()));
  }
  if (start == 0 && len == n) return x;
  const std::size_t cols = x.shape()[1];
  Tensor<T> out({len, cols});
  std::copy_n(x.value().row(start), len * cols, out.data());
  return finish<T>(
      std::move(out), {x},
      [start](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          T* dst = g->row(start);
          for (std::size_t i = 0; i < self.grad.numel(); ++i) dst[i] += self.grad[i];
        }
      },
      "slice_rows");
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> index) {
  require_rank(table.shape(), 2, "gather_rows");
  const std::size_t n = table.shape()[0];
  const std::size_t cols = table.shape()[1];
  Tensor<T> out({index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) {
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " >= " +
                           std::to_string(n));
    }
    std::copy_n(table.value().row(index[i]), cols, out.row(i));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish<T>(
      std::move(out), {table},
      [idx = std::move(idx)](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          const std::size_t cols = g->cols();
          for (std::size_t i = 0; i < idx.size(); ++i) {
            T* dst = g->row(idx[i]);
            const T* src = self.grad.row(i);
            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
          }
        }
      },
      "gather_rows");
}

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& weight, double eps) {
  require_rank(weight.shape(), 1, "rms_norm");
  require_nonempty_cols(x.shape(), "rms_norm");
  if (x.shape().back() != weight.shape()[0]) {
    throw DimensionError("rms_norm: weight " + shape_str(weight.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  if (!(eps > 0)) throw ConfigError("rms_norm: eps must be positive");
  const std::size_t rows = x.value().rows();
  const std::size_t n = x.value().cols();
  Tensor<T> out(x.shape());
  std::vector<T> inv_rms(rows);
  const T* w = weight.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().row(r);
    T ms = 0;
    for (std::size_t c = 0; c < n; ++c) ms += xr[c] * xr[c];
    ms /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(ms + static_cast<T>(eps));
    inv_rms[r] = inv;
    T* yr = out.row(r);
    for (std::size_t c = 0; c < n; ++c) yr[c] = w[c] * (xr[c] * inv);
  }
  return finish<T>(
      std::move(out), {x, weight},
      [inv_rms = std::move(inv_rms)](Node<T>& self) {
        const auto& xv = parent_value(self, 0);
        const auto& wv = parent_value(self, 1);
        const std::size_t n = xv.cols();
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const T* xr = xv.row(r);
          const T* dy = self.grad.row(r);
          const T inv = inv_rms[r];
          T dot = 0;
          for (std::size_t c = 0; c < n; ++c) {
            const T xhat = xr[c] * inv;
            if (gw) (*gw)[c] += dy[c] * xhat;
            dxhat[c] = dy[c] * wv[c];
            dot += dxhat[c] * xhat;
          }
          if (gx) {
            const T m = dot / static_cast<T>(n);
            T* dx = gx->row(r);
            for (std::size_t c = 0; c < n; ++c) dx[c] += inv * (dxhat[c] - xr[c] * inv * m);
          }
        }
      },
      "rms_norm");
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, double eps) {
  require_rank(weight.shape(), 1, "layer_norm");
  require_same_shape(weight.shape(), bias.shape(), "layer_norm");
  require_nonempty_cols(x.shape(), "layer_norm");
  if (x.shape().back() != weight.shape()[0]) {
    throw DimensionError("layer_norm: weight " + shape_str(weight.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.value().rows();
  const std::size_t n = x.value().cols();
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  const T* w = weight.value().data();
  const T* b = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().row(r);
    T mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[r] = inv;
    T* hr = xhat.row(r);
    T* yr = out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      hr[c] = (xr[c] - mu) * inv;
      yr[c] = w[c] * hr[c] + b[c];
    }
  }
  return finish<T>(
      std::move(out), {x, weight, bias},
      [inv_std = std::move(inv_std), xhat = std::move(xhat)](Node<T>& self) {
        const auto& wv = parent_value(self, 1);
        const std::size_t n = xhat.cols();
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        auto* gb = parent_grad(self, 2);
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < xhat.rows(); ++r) {
          const T* hr = xhat.row(r);
          const T* dy = self.grad.row(r);
          T mean_d = 0;
          T mean_dh = 0;
          for (std::size_t c = 0; c < n; ++c) {
            if (gw) (*gw)[c] += dy[c] * hr[c];
            if (gb) (*gb)[c] += dy[c];
            dxhat[c] = dy[c] * wv[c];
            mean_d += dxhat[c];
            mean_dh += dxhat[c] * hr[c];
          }
          if (gx) {
            mean_d /= static_cast<T>(n);
            mean_dh /= static_cast<T>(n);
            T* dx = gx->row(r);
            for (std::size_t c = 0; c < n; ++c) {
              dx[c] += inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
            }
          }
        }
      },
      "layer_norm");
}

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  if (kind == Activation::gelu) {
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * static_cast<T>(std::numbers::sqrt2 / 2)));
    }
  } else {
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] / (T(1) + std::exp(-xv[i]));
  }
  return finish<T>(
      std::move(out), {x},
      [kind](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const auto& xv = parent_value(self, 0);
        if (kind == Activation::gelu) {
          const T inv_sqrt2 = static_cast<T>(std::numbers::sqrt2 / 2);
          const T inv_sqrt2pi = static_cast<T>(std::numbers::inv_sqrtpi * std::numbers::sqrt2 / 2);
          for (std::size_t i = 0; i < xv.numel(); ++i) {
            const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
            (*g)[i] += self.grad[i] * (cdf + xv[i] * pdf);
          }
        } else {
          for (std::size_t i = 0; i < xv.numel(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-xv[i]));
            (*g)[i] += self.grad[i] * s * (T(1) + xv[i] * (T(1) - s));
          }
        }
      },
      "activation");
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  require_nonempty_cols(x.shape(), "softmax_rows");
  Tensor<T> out(x.shape());
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const T* xr = x.value().row(r);
    T* yr = out.row(r);
    T m = xr[0];
    for (std::size_t c = 1; c < n; ++c) m = std::max(m, xr[c]);
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) {
      yr[c] = std::exp(xr[c] - m);
      s += yr[c];
    }
    for (std::size_t c = 0; c < n; ++c) yr[c] /= s;
  }
  return finish<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const std::size_t n = self.value.cols();
        for (std::size_t r = 0; r < self.value.rows(); ++r) {
          const T* y = self.value.row(r);
          const T* dy = self.grad.row(r);
          T dot = 0;
          for (std::size_t c = 0; c < n; ++c) dot += dy[c] * y[c];
          T* dx = g->row(r);
          for (std::size_t c = 0; c < n; ++c) dx[c] += y[c] * (dy[c] - dot);
        }
      },
      "softmax_rows");
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  require_nonempty_cols(x.shape(), "log_softmax_rows");
  Tensor<T> out(x.shape());
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const T* xr = x.value().row(r);
    const T lse = row_logsumexp(xr, n);
    T* yr = out.row(r);
    for (std::size_t c = 0; c < n; ++c) yr[c] = xr[c] - lse;
  }
  return finish<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const std::size_t n = self.value.cols();
        for (std::size_t r = 0; r < self.value.rows(); ++r) {
          const T* y = self.value.row(r);
          const T* dy = self.grad.row(r);
          T total = 0;
          for (std::size_t c = 0; c < n; ++c) total += dy[c];
          T* dx = g->row(r);
          for (std::size_t c = 0; c < n; ++c) dx[c] += dy[c] - std::exp(y[c]) * total;
        }
      },
      "log_softmax_rows");
}

template <typename T>
Var<T> masked_cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask) {
  require_rank(logits.shape(), 2, "masked_cross_entropy");
  require_nonempty_cols(logits.shape(), "masked_cross_entropy");
  const std::size_t rows = logits.shape()[0];
  const std::size_t vocab = logits.shape()[1];
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("masked_cross_entropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::vector<std::size_t> selected;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw DimensionError("masked_cross_entropy: target " + std::to_string(targets[r]) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    selected.push_back(r);
  }
  if (selected.empty()) throw EmptyMaskError("masked_cross_entropy: no masked positions");

  std::vector<T> lse(selected.size());
  T total = 0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const std::size_t r = selected[i];
    const T* xr = logits.value().row(r);
    lse[i] = row_logsumexp(xr, vocab);
    total += lse[i] - xr[targets[r]];
  }
  const T count = static_cast<T>(selected.size());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return finish<T>(
      Tensor<T>::scalar(total / count), {logits},
      [selected = std::move(selected), lse = std::move(lse), tgt = std::move(tgt),
       count](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const auto& xv = parent_value(self, 0);
        const std::size_t vocab = xv.cols();
        const T up = self.grad[0] / count;
        for (std::size_t i = 0; i < selected.size(); ++i) {
          const std::size_t r = selected[i];
          const T* xr = xv.row(r);
          T* dx = g->row(r);
          for (std::size_t c = 0; c < vocab; ++c) dx[c] += up * std::exp(xr[c] - lse[i]);
          dx[tgt[r]] -= up;
        }
      },
      "masked_cross_entropy");
}

template <typename T>
Var<T> kl_divergence(const Var<T>& p, const Var<T>& q) {
  require_same_shape(p.shape(), q.shape(), "kl_divergence");
  require_nonempty_cols(p.shape(), "kl_divergence");
  require_row_stochastic(p.value(), "kl_divergence");
  require_row_stochastic(q.value(), "kl_divergence");
  const T floor = static_cast<T>(kKlFloor);
  T total = 0;
  for (std::size_t i = 0; i < p.value().numel(); ++i) {
    const T pv = p.value()[i];
    if (pv > 0) total += pv * std::log(pv / std::max(q.value()[i], floor));
  }
  return finish<T>(
      Tensor<T>::scalar(total), {p, q},
      [floor](Node<T>& self) {
        const auto& pv = parent_value(self, 0);
        const auto& qv = parent_value(self, 1);
        const T up = self.grad[0];
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < pv.numel(); ++i) {
            (*g)[i] += up * (std::log(std::max(pv[i], floor) / std::max(qv[i], floor)) + T(1));
          }
        }
        if (auto* g = parent_grad(self, 1)) {
          for (std::size_t i = 0; i < pv.numel(); ++i) {
            if (qv[i] >= floor) (*g)[i] -= up * pv[i] / qv[i];
          }
        }
      },
      "kl_divergence");
}

template <typename T>
Var<T> kl_divergence_log(const Var<T>& log_p, const Var<T>& log_q) {
  require_same_shape(log_p.shape(), log_q.shape(), "kl_divergence_log");
  T total = 0;
  for (std::size_t i = 0; i < log_p.value().numel(); ++i) {
    const T lp = log_p.value()[i];
    total += std::exp(lp) * (lp - log_q.value()[i]);
  }
  return finish<T>(
      Tensor<T>::scalar(total), {log_p, log_q},
      [](Node<T>& self) {
        const auto& lp = parent_value(self, 0);
        const auto& lq = parent_value(self, 1);
        const T up = self.grad[0];
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < lp.numel(); ++i) {
            (*g)[i] += up * std::exp(lp[i]) * (lp[i] - lq[i] + T(1));
          }
        }
        if (auto* g = parent_grad(self, 1)) {
          for (std::size_t i = 0; i < lp.numel(); ++i) (*g)[i] -= up * std::exp(lp[i]);
        }
      },
      "kl_divergence_log");
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  require_nonempty_cols(x.shape(), "l2_normalize_rows");
  Tensor<T> out(x.shape());
  const std::size_t n = out.cols();
  std::vector<T> norms(out.rows());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const T* xr = x.value().row(r);
    T ss = 0;
    for (std::size_t c = 0; c < n; ++c) ss += xr[c] * xr[c];
    if (!(ss > 0)) {
      throw ContractError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    norms[r] = std::sqrt(ss);
    T* yr = out.row(r);
    for (std::size_t c = 0; c < n; ++c) yr[c] = xr[c] / norms[r];
  }
  return finish<T>(
      std::move(out), {x},
      [norms = std::move(norms)](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const std::size_t n = self.value.cols();
        for (std::size_t r = 0; r < self.value.rows(); ++r) {
          const T* y = self.value.row(r);
          const T* dy = self.grad.row(r);
          T dot = 0;
          for (std::size_t c = 0; c < n; ++c) dot += y[c] * dy[c];
          T* dx = g->row(r);
          for (std::size_t c = 0; c < n; ++c) dx[c] += (dy[c] - y[c] * dot) / norms[r];
        }
      },
      "l2_normalize_rows");
}

template <typename T>
Var<T> cosine_scores(const Var<T>& q, const Var<T>& docs) {
  return matmul_nt(l2_normalize_rows(q), l2_normalize_rows(docs));
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 std::span<const std::uint8_t> key_mask, std::size_t n_heads,
                 std::size_t seq_len) {
  require_rank(q.shape(), 2, "attention");
  require_same_shape(q.shape(), k.shape(), "attention");
  require_same_shape(q.shape(), v.shape(), "attention");
  const std::size_t rows = q.shape()[0];
  const std::size_t width = q.shape()[1];
  if (n_heads == 0 || width % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (seq_len == 0 || rows % seq_len != 0 || key_mask.size() != rows) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows, seq_len " +
                         std::to_string(seq_len) + ", mask " + std::to_string(key_mask.size()));
  }
  const std::size_t batch = rows / seq_len;
  const std::size_t head_dim = width / n_heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));

  // probs[((b * H + h) * s + i) * s + j]; masked keys stay at zero.
  std::vector<T> probs(batch * n_heads * seq_len * seq_len, T(0));
  Tensor<T> out(q.shape());
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  std::vector<T> scores(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * seq_len;
    bool any_key = false;
    for (std::size_t j = 0; j < seq_len; ++j) any_key = any_key || key_mask[base + j];
    if (!any_key) {
      throw EmptyMaskError("attention: sequence " + std::to_string(b) + " has no unmasked key");
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * head_dim;
      T* P = probs.data() + (b * n_heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const T* qi = qv.row(base + i) + off;
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_mask[base + j]) continue;
          const T* kj = kv.row(base + j) + off;
          T dot = 0;
          for (std::size_t c = 0; c < head_dim; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * inv_scale;
          m = std::max(m, scores[j]);
        }
        T denom = 0;
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_mask[base + j]) continue;
          P[i * seq_len + j] = std::exp(scores[j] - m);
          denom += P[i * seq_len + j];
        }
        T* oi = out.row(base + i) + off;
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_mask[base + j]) continue;
          const T p = P[i * seq_len + j] / denom;
          P[i * seq_len + j] = p;
          const T* vj = vv.row(base + j) + off;
          for (std::size_t c = 0; c < head_dim; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  return finish<T>(
      std::move(out), {q, k, v},
      [probs = std::move(probs), mask = std::move(mask), n_heads, seq_len, head_dim,
       inv_scale](Node<T>& self) {
        const auto& qv = parent_value(self, 0);
        const auto& kv = parent_value(self, 1);
        const auto& vv = parent_value(self, 2);
        auto* gq = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        auto* gv = parent_grad(self, 2);
        const std::size_t batch = qv.rows() / seq_len;
        std::vector<T> dp(seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = b * seq_len;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * head_dim;
            const T* P = probs.data() + (b * n_heads + h) * seq_len * seq_len;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const T* doi = self.grad.row(base + i) + off;
              T row_dot = 0;
              for (std::size_t j = 0; j < seq_len; ++j) {
                if (!mask[base + j]) continue;
                const T p = P[i * seq_len + j];
                const T* vj = vv.row(base + j) + off;
                T d = 0;
                for (std::size_t c = 0; c < head_dim; ++c) d += doi[c] * vj[c];
                dp[j] = d;
                row_dot += p * d;
                if (gv) {
                  T* dvj = gv->row(base + j) + off;
                  for (std::size_t c = 0; c < head_dim; ++c) dvj[c] += p * doi[c];
                }
              }
              const T* qi = qv.row(base + i) + off;
              for (std::size_t j = 0; j < seq_len; ++j) {
                if (!mask[base + j]) continue;
                const T ds = P[i * seq_len + j] * (dp[j] - row_dot) * inv_scale;
                if (gq) {
                  T* dqi = gq->row(base + i) + off;
                  const T* kj = kv.row(base + j) + off;
                  for (std::size_t c = 0; c < head_dim; ++c) dqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* dkj = gk->row(base + j) + off;
                  for (std::size_t c = 0; c < head_dim; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      },
      "attention");
}

template <typename T>
Var<T> masked_mean_rows(const Var<T>& x, std::span<const std::uint8_t> mask, std::size_t seq_len) {
  require_rank(x.shape(), 2, "masked_mean_rows");
  const std::size_t rows = x.shape()[0];
  const std::size_t n = x.shape()[1];
  if (seq_len == 0 || rows % seq_len != 0 || mask.size() != rows) {
    throw DimensionError("masked_mean_rows: " + std::to_string(rows) + " rows, seq_len " +
                         std::to_string(seq_len) + ", mask " + std::to_string(mask.size()));
  }
  const std::size_t batch = rows / seq_len;
  Tensor<T> out({batch, n});
  std::vector<T> counts(batch, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    T* o = out.row(b);
    for (std::size_t i = 0; i < seq_len; ++i) {
      const std::size_t r = b * seq_len + i;
      if (!mask[r]) continue;
      counts[b] += T(1);
      const T* xr = x.value().row(r);
      for (std::size_t c = 0; c < n; ++c) o[c] += xr[c];
    }
    if (counts[b] == T(0)) {
      throw EmptyMaskError("masked_mean_rows: sequence " + std::to_string(b) + " is fully masked");
    }
    for (std::size_t c = 0; c < n; ++c) o[c] /= counts[b];
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return finish<T>(
      std::move(out), {x},
      [m = std::move(m), counts = std::move(counts), seq_len](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const std::size_t n = g->cols();
        for (std::size_t r = 0; r < g->rows(); ++r) {
          if (!m[r]) continue;
          const std::size_t b = r / seq_len;
          const T* dy = self.grad.row(b);
          T* dx = g->row(r);
          for (std::size_t c = 0; c < n; ++c) dx[c] += dy[c] / counts[b];
        }
      },
      "masked_mean_rows");
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> factors(x.shape());
  for (auto& f : factors.values()) f = rng.bernoulli(rate) ? T(0) : keep_scale;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * factors[i];
  return finish<T>(
      std::move(out), {x},
      [factors = std::move(factors)](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * factors[i];
        }
      },
      "dropout");
}

template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  return Var<T>::constant(x.value());
}

#define M3_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                         \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                            \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                            \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                            \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                        \
  template Var<T> scale(const Var<T>&, double);                                                 \
  template Var<T> sum(const Var<T>&);                                                           \
  template Var<T> mean(const Var<T>&);                                                          \
  template Var<T> add_scalars(const std::vector<Var<T>>&);                                      \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);                          \
  template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                          \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                     \
  template Var<T> rms_norm(const Var<T>&, const Var<T>&, double);                               \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);              \
  template Var<T> activation(const Var<T>&, Activation);                                        \
  template Var<T> softmax_rows(const Var<T>&);                                                  \
  template Var<T> log_softmax_rows(const Var<T>&);                                              \
  template Var<T> masked_cross_entropy(const Var<T>&, std::span<const std::int32_t>,            \
                                       std::span<const std::uint8_t>);                          \
  template Var<T> kl_divergence(const Var<T>&, const Var<T>&);                                  \
  template Var<T> kl_divergence_log(const Var<T>&, const Var<T>&);                              \
  template Var<T> l2_normalize_rows(const Var<T>&);                                             \
  template Var<T> cosine_scores(const Var<T>&, const Var<T>&);                                  \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&,                        \
                            std::span<const std::uint8_t>, std::size_t, std::size_t);           \
  template Var<T> masked_mean_rows(const Var<T>&, std::span<const std::uint8_t>, std::size_t);  \
  template Var<T> dropout(const Var<T>&, double, Rng&);                                         \
  template Var<T> stop_gradient(const Var<T>&);

M3_INSTANTIATE_OPS(float)
M3_INSTANTIATE_OPS(double)

#undef M3_INSTANTIATE_OPS

}  // namespace m3::ops

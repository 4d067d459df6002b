#pragma once

// Differentiable operations over BasicTensor. All matrix ops expect rank-2
// operands; "row vector" means a tensor of shape [c] or [1xc].

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include "owt/tensor.hpp"

namespace owt {

namespace detail {

template <typename T>
inline std::vector<T>* grad_slot(Node<T>& node, std::size_t input) {
  auto& in = node.inputs[input];
  return in->requires_grad ? &in->grad : nullptr;
}

template <typename T>
inline void require_matrix(const BasicTensor<T>& x, const char* op) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " + shape_string(x.shape()));
  }
}

template <typename T>
inline bool is_row_vector_for(const BasicTensor<T>& v, std::size_t cols) {
  return (v.rank() == 1 && v.dim(0) == cols) || (v.rank() == 2 && v.dim(0) == 1 && v.dim(1) == cols);
}

// Register-tiled kernel shared by the three layouts:
// out[i, :] (+)= sum_p A(i, p) * b[p, :] with A(i, p) = a[i * si + p * sp].
// Each output element is summed in ascending p in a 64-bit accumulator.
template <typename T>
void gemm_rows(const T* a, std::size_t si, std::size_t sp, const T* b, T* out, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  constexpr std::size_t kRows = 4, kCols = 16;
  auto store = [&](std::size_t i, std::size_t j, Accum v) {
    T& o = out[i * n + j];
    o = accumulate ? static_cast<T>(o + v) : static_cast<T>(v);
  };
  std::size_t i0 = 0;
  for (; i0 + kRows <= m; i0 += kRows) {
    std::size_t j0 = 0;
    for (; j0 + kCols <= n; j0 += kCols) {
      Accum c[kRows][kCols] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n + j0;
        Accum bv[kCols];
        for (std::size_t jj = 0; jj < kCols; ++jj) bv[jj] = brow[jj];
        for (std::size_t r = 0; r < kRows; ++r) {
          const Accum ar = a[(i0 + r) * si + p * sp];
          for (std::size_t jj = 0; jj < kCols; ++jj) c[r][jj] += ar * bv[jj];
        }
      }
      for (std::size_t r = 0; r < kRows; ++r)
        for (std::size_t jj = 0; jj < kCols; ++jj) store(i0 + r, j0 + jj, c[r][jj]);
    }
    for (; j0 < n; ++j0) {
      Accum c[kRows] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const Accum bv = b[p * n + j0];
        for (std::size_t r = 0; r < kRows; ++r) c[r] += static_cast<Accum>(a[(i0 + r) * si + p * sp]) * bv;
      }
      for (std::size_t r = 0; r < kRows; ++r) store(i0 + r, j0, c[r]);
    }
  }
  if (i0 < m) {
    std::vector<Accum> acc(n);
    for (; i0 < m; ++i0) {
      std::fill(acc.begin(), acc.end(), Accum{0});
      for (std::size_t p = 0; p < k; ++p) {
        const Accum ar = a[i0 * si + p * sp];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += ar * static_cast<Accum>(brow[j]);
      }
      for (std::size_t j = 0; j < n; ++j) store(i0, j, acc[j]);
    }
  }
}

// out[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  gemm_rows(a, k, 1, b, out, m, k, n, accumulate);
}

// out[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_rows(a, k, 1, bt.data(), out, m, k, n, accumulate);
}

// out[m x n] (+)= a[k x m]^T * b[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  gemm_rows(a, 1, m, b, out, m, k, n, accumulate);
}

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace detail

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner extents disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return BasicTensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    if (auto* ga = detail::grad_slot(self, 0)) {
      detail::gemm_nt(self.grad.data(), bv, ga->data(), m, n, k, true);
    }
    if (auto* gb = detail::grad_slot(self, 1)) {
      detail::gemm_tn(av, self.grad.data(), gb->data(), k, m, n, true);
    }
  });
}

// x * w + b for x [t x in], w [in x out], b [out]. Fused form of a linear layer.
template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  detail::require_matrix(x, "affine");
  detail::require_matrix(w, "affine");
  const std::size_t t = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in) {
    throw DimensionError("affine input width disagrees: " + shape_string(x.shape()) + " x " +
                         shape_string(w.shape()));
  }
  if (!detail::is_row_vector_for(b, out_dim)) {
    throw DimensionError("affine bias " + shape_string(b.shape()) + " does not match output width " +
                         std::to_string(out_dim));
  }
  std::vector<T> out(t * out_dim);
  for (std::size_t r = 0; r < t; ++r) {
    std::copy(b.data().begin(), b.data().end(), out.begin() + static_cast<std::ptrdiff_t>(r * out_dim));
  }
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), t, in, out_dim, true);
  return BasicTensor<T>::make_result({t, out_dim}, std::move(out), {x, w, b},
                                     [t, in, out_dim](detail::Node<T>& self) {
    const T* g = self.grad.data();
    if (auto* gx = detail::grad_slot(self, 0)) {
      detail::gemm_nt(g, self.inputs[1]->value.data(), gx->data(), t, out_dim, in, true);
    }
    if (auto* gw = detail::grad_slot(self, 1)) {
      detail::gemm_tn(self.inputs[0]->value.data(), g, gw->data(), in, t, out_dim, true);
    }
    if (auto* gb = detail::grad_slot(self, 2)) {
      for (std::size_t j = 0; j < out_dim; ++j) {
        Accum s = 0;
        for (std::size_t r = 0; r < t; ++r) s += g[r * out_dim + j];
        (*gb)[j] = static_cast<T>((*gb)[j] + s);
      }
    }
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  detail::require_matrix(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  const auto v = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return BasicTensor<T>::make_result({c, r}, std::move(out), {x}, [r, c](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
  });
}

namespace detail {

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryKind kind,
                      const char* name) {
  const bool same = a.shape() == b.shape();
  const bool row = !same && a.rank() == 2 && kind != BinaryKind::kSub &&
                   is_row_vector_for(b, a.dim(1));
  if (!same && !row) {
    throw DimensionError(std::string(name) + " cannot broadcast " + shape_string(a.shape()) +
                         " with " + shape_string(b.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t width = same ? n : a.dim(1);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T y = bv[same ? i : i % width];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = av[i] + y; break;
      case BinaryKind::kSub: out[i] = av[i] - y; break;
      case BinaryKind::kMul: out[i] = av[i] * y; break;
    }
  }
  return BasicTensor<T>::make_result(a.shape(), std::move(out), {a, b},
                                     [kind, same, n, width](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    auto* ga = grad_slot(self, 0);
    auto* gb = grad_slot(self, 1);
    if (ga) {
      for (std::size_t i = 0; i < n; ++i) {
        const T g = self.grad[i];
        (*ga)[i] += kind == BinaryKind::kMul ? g * bv[same ? i : i % width] : g;
      }
    }
    if (gb) {
      if (same) {
        for (std::size_t i = 0; i < n; ++i) {
          const T g = self.grad[i];
          switch (kind) {
            case BinaryKind::kAdd: (*gb)[i] += g; break;
            case BinaryKind::kSub: (*gb)[i] -= g; break;
            case BinaryKind::kMul: (*gb)[i] += g * av[i]; break;
          }
        }
      } else {
        std::vector<Accum> acc(width, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const Accum g = self.grad[i];
          acc[i % width] += kind == BinaryKind::kMul ? g * av[i] : g;
        }
        for (std::size_t j = 0; j < width; ++j) (*gb)[j] = static_cast<T>((*gb)[j] + acc[j]);
      }
    }
  });
}

template <typename T, typename F, typename D>
BasicTensor<T> unary(const BasicTensor<T>& x, F value_fn, D derivative_fn) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = static_cast<T>(value_fn(static_cast<double>(xv[i])));
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x}, [derivative_fn](Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += static_cast<T>(self.grad[i] * derivative_fn(static_cast<double>(xv[i])));
    }
  });
}

}  // namespace detail

// Elementwise sum; b may also be a row vector broadcast over the rows of a.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kAdd, "add");
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kSub, "sub");
}

// Elementwise (Hadamard) product; b may be a row vector.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kMul, "mul");
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double) { return s; });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  return detail::unary(x, detail::gelu_value, detail::gelu_derivative);
}

// Linear-attention feature map: elu(u) + 1, strictly positive.
template <typename T>
BasicTensor<T> elu_plus_one(const BasicTensor<T>& x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? v + 1.0 : std::exp(v); },
      [](double v) { return v > 0 ? 1.0 : std::exp(v); });
}

// max(x, floor); the gradient is passed only where x > floor.
template <typename T>
BasicTensor<T> clamp_min(const BasicTensor<T>& x, double floor) {
  return detail::unary(
      x, [floor](double v) { return v > floor ? v : floor; },
      [floor](double v) { return v > floor ? 1.0 : 0.0; });
}

// Row-wise softmax, stabilized by subtracting each row's max.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto xv = x.data();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
      mx = std::max(mx, static_cast<double>(row[j]));
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite maximum in row " + std::to_string(i));
    std::vector<double> e(c);
    double total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      e[j] = std::exp(static_cast<double>(row[j]) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = static_cast<T>(e[j] / total);
  }
  return BasicTensor<T>::make_result({r, c}, std::move(out), {x}, [r, c](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < r; ++i) {
      const T* y = self.value.data() + i * c;
      const T* g = self.grad.data() + i * c;
      Accum dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += static_cast<Accum>(g[j]) * y[j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += static_cast<T>(y[j] * (g[j] - dot));
    }
  });
}

// Per-row normalization to zero mean / unit variance, then gain and bias.
template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                         const BasicTensor<T>& bias, double eps = 1e-5) {
  detail::require_matrix(x, "layernorm");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (c < 2) throw DimensionError("layernorm needs at least 2 features, got " + shape_string(x.shape()));
  if (!detail::is_row_vector_for(gain, c) || !detail::is_row_vector_for(bias, c)) {
    throw DimensionError("layernorm affine shapes " + shape_string(gain.shape()) + ", " +
                         shape_string(bias.shape()) + " do not match width " + std::to_string(c));
  }
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<T> out(r * c);
  std::vector<double> xhat(r * c);
  std::vector<double> inv_sigma(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    double mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_sigma[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * inv_sigma[i];
      xhat[i * c + j] = h;
      out[i * c + j] = static_cast<T>(h * gv[j] + bv[j]);
    }
  }
  return BasicTensor<T>::make_result(
      {r, c}, std::move(out), {x, gain, bias},
      [r, c, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](detail::Node<T>& self) {
        const auto& gv = self.inputs[1]->value;
        auto* gx = detail::grad_slot(self, 0);
        auto* gg = detail::grad_slot(self, 1);
        auto* gb = detail::grad_slot(self, 2);
        std::vector<Accum> dgain(c, 0.0), dbias(c, 0.0);
        std::vector<double> dh(c);
        for (std::size_t i = 0; i < r; ++i) {
          const T* g = self.grad.data() + i * c;
          const double* h = xhat.data() + i * c;
          double mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < c; ++j) {
            dgain[j] += g[j] * h[j];
            dbias[j] += g[j];
            dh[j] = g[j] * static_cast<double>(gv[j]);
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          if (!gx) continue;
          mean_dh /= static_cast<double>(c);
          mean_dh_h /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            (*gx)[i * c + j] += static_cast<T>(inv_sigma[i] * (dh[j] - mean_dh - h[j] * mean_dh_h));
          }
        }
        for (std::size_t j = 0; j < c; ++j) {
          if (gg) (*gg)[j] = static_cast<T>((*gg)[j] + dgain[j]);
          if (gb) (*gb)[j] = static_cast<T>((*gb)[j] + dbias[j]);
        }
      });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  Accum s = 0;
  for (T v : x.data()) s += v;
  return BasicTensor<T>::make_result({1}, {static_cast<T>(s)}, {x}, [](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    const T g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Mean squared difference, reduced in double.
template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse_loss shapes differ: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t n = a.numel();
  Accum s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Accum d = static_cast<Accum>(a.data()[i]) - b.data()[i];
    s += d * d;
  }
  return BasicTensor<T>::make_result({1}, {static_cast<T>(s / static_cast<Accum>(n))}, {a, b},
                                     [n](detail::Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const Accum k = 2.0 * self.grad[0] / static_cast<Accum>(n);
    auto* ga = detail::grad_slot(self, 0);
    auto* gb = detail::grad_slot(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const Accum d = k * (static_cast<Accum>(av[i]) - bv[i]);
      if (ga) (*ga)[i] += static_cast<T>(d);
      if (gb) (*gb)[i] -= static_cast<T>(d);
    }
  });
}

// Column sums of a matrix, as a [1 x c] row.
template <typename T>
BasicTensor<T> col_sum(const BasicTensor<T>& x) {
  detail::require_matrix(x, "col_sum");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<Accum> acc(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) acc[j] += x.data()[i * c + j];
  std::vector<T> out(acc.begin(), acc.end());
  return BasicTensor<T>::make_result({1, c}, std::move(out), {x}, [r, c](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j];
  });
}

// x[i, j] / den[i] for x [t x d] and den [t x 1].
template <typename T>
BasicTensor<T> div_rows(const BasicTensor<T>& x, const BasicTensor<T>& den) {
  detail::require_matrix(x, "div_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (den.numel() != r) {
    throw DimensionError("div_rows denominator " + shape_string(den.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] / den.data()[i];
  return BasicTensor<T>::make_result({r, c}, std::move(out), {x, den}, [r, c](detail::Node<T>& self) {
    const auto& dv = self.inputs[1]->value;
    auto* gx = detail::grad_slot(self, 0);
    auto* gd = detail::grad_slot(self, 1);
    for (std::size_t i = 0; i < r; ++i) {
      const double inv = 1.0 / static_cast<double>(dv[i]);
      Accum dd = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const double g = self.grad[i * c + j];
        if (gx) (*gx)[i * c + j] += static_cast<T>(g * inv);
        dd -= g * self.value[i * c + j] * inv;
      }
      if (gd) (*gd)[i] = static_cast<T>((*gd)[i] + dd);
    }
  });
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (count == 0 || start + count > c) {
    throw DimensionError("slice_cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_string(x.shape()));
  }
  std::vector<T> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.data()[i * c + start + j];
  return BasicTensor<T>::make_result({r, count}, std::move(out), {x},
                                     [r, c, start, count](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * c + start + j] += self.grad[i * count + j];
  });
}

template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols needs at least one part");
  const std::size_t r = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.dim(0) != r) {
      throw DimensionError("concat_cols row counts differ: " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(r * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j)
        out[i * total + offset + j] = parts[k].data()[i * widths[k] + j];
    offset += widths[k];
  }
  return BasicTensor<T>::make_result({r, total}, std::move(out), parts,
                                     [r, total, widths](detail::Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* g = detail::grad_slot(self, k)) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*g)[i * widths[k] + j] += self.grad[i * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

// Rows of x picked by index (repeats allowed); gradients scatter-add back.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::vector<std::size_t> rows) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (rows.empty()) throw ContractError("gather_rows with an empty index list");
  for (std::size_t r : rows) {
    if (r >= n) throw DimensionError("gather_rows index " + std::to_string(r) + " out of range for " +
                                     shape_string(x.shape()));
  }
  std::vector<T> out(rows.size() * c);
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[k] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(k * c));
  const std::size_t m = rows.size();
  return BasicTensor<T>::make_result({m, c}, std::move(out), {x},
                                     [c, rows = std::move(rows)](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) gx[rows[k] * c + j] += self.grad[k * c + j];
  });
}

// out.flat[i] = x.flat[index[i]], reshaped to `shape`.
template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& x, std::shared_ptr<const std::vector<std::size_t>> index,
                      Shape shape) {
  if (shape_numel(shape) != index->size()) {
    throw DimensionError("gather index length " + std::to_string(index->size()) + " does not fill " +
                         shape_string(shape));
  }
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t src = (*index)[i];
    if (src >= x.numel()) throw DimensionError("gather index out of range for " + shape_string(x.shape()));
    out[i] = x.data()[src];
  }
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {x},
                                     [index = std::move(index)](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {x}, [](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// Fixed sparse linear map y = M x over flattened tensors.
struct SparseMap {
  std::size_t in_size = 0;
  std::size_t out_size = 0;
  struct Entry {
    std::size_t out;
    std::size_t in;
    double weight;
  };
  std::vector<Entry> entries;
};

template <typename T>
BasicTensor<T> sparse_linear(const BasicTensor<T>& x, std::shared_ptr<const SparseMap> map) {
  if (map->in_size != x.numel()) {
    throw DimensionError("sparse_linear expects " + std::to_string(map->in_size) + " inputs, got " +
                         shape_string(x.shape()));
  }
  std::vector<Accum> acc(map->out_size, 0.0);
  for (const auto& e : map->entries) acc[e.out] += e.weight * x.data()[e.in];
  std::vector<T> out(acc.begin(), acc.end());
  const std::size_t n = map->out_size;
  return BasicTensor<T>::make_result({n}, std::move(out), {x}, [map = std::move(map)](detail::Node<T>& self) {
    auto& gx = self.inputs[0]->grad;
    for (const auto& e : map->entries) gx[e.in] += static_cast<T>(e.weight * self.grad[e.out]);
  });
}

// Unary/binary elementwise dispatch by kind.
enum class PointwiseKind { kGelu, kEluPlusOne, kAdd, kMul, kScale };

template <typename T>
BasicTensor<T> pointwise(const BasicTensor<T>& x, PointwiseKind kind,
                         const std::type_identity_t<BasicTensor<T>>* other = nullptr,
                         double factor = 1.0) {
  switch (kind) {
    case PointwiseKind::kGelu: return gelu(x);
    case PointwiseKind::kEluPlusOne: return elu_plus_one(x);
    case PointwiseKind::kScale: return scale(x, factor);
    case PointwiseKind::kAdd:
    case PointwiseKind::kMul:
      if (!other) throw ContractError("binary pointwise kind needs a second operand");
      return kind == PointwiseKind::kAdd ? add(x, *other) : mul(x, *other);
  }
  throw ContractError("unknown pointwise kind");
}

}  // namespace owt

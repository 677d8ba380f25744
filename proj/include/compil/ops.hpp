#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "compil/tensor.hpp"

namespace compil {

namespace detail {

// C[n,m] = A[n,k] * B[k,m], accumulating into C.
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c,
             int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[n,m] = A[n,k] * B[m,k]^T, accumulating into C.
template <typename T>
void gemm_nt(const T* __restrict a, const T* __restrict b, T* __restrict c,
             int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[n,m] = A[k,n]^T * B[k,m], accumulating into C.
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c,
             int n, int k, int m) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * n;
    const T* brow = b + static_cast<std::size_t>(p) * m;
    for (int i = 0; i < n; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(i) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void check_finite(const Tape<T>& tape, const char* op, const Tensor<T>& t) {
  if (!tape.check_finite()) return;
  for (const T& v : t.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string("non-finite value produced by op '") + op +
                               "' (node " + std::to_string(tape.size()) + ")");
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank2(const char* op, const Tensor<T>& a) {
  if (a.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_str(a.shape()));
}

// Rows/cols of a tensor treated as a stack of rows; rank-1 counts as one row.
template <typename T>
std::pair<int, int> as_rows(const char* op, const Tensor<T>& a) {
  if (a.rank() == 1) return {1, a.extent(0)};
  if (a.rank() == 2) return {a.rows(), a.cols()};
  throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got " +
                              shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (exact shape match; no implicit broadcasting)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  detail::check_finite(tape, "add", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("add", [as = a.storage(), bs = b.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i) bs->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  detail::check_finite(tape, "sub", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("sub", [as = a.storage(), bs = b.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i) bs->grad[i] -= os->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  detail::check_finite(tape, "mul", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("mul", [as = a.storage(), bs = b.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i)
          as->grad[i] += os->grad[i] * bs->values[i];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i)
          bs->grad[i] += os->grad[i] * as->values[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("div", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] / b[i];
  detail::check_finite(tape, "div", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("div", [as = a.storage(), bs = b.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i)
          as->grad[i] += os->grad[i] / bs->values[i];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i)
          bs->grad[i] -= os->grad[i] * os->values[i] / bs->values[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// scalar-constant ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + c;
  detail::check_finite(tape, "add_scalar", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("add_scalar", [as = a.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_scalar(Tape<T>& tape, const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
  detail::check_finite(tape, "mul_scalar", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("mul_scalar", [as = a.storage(), os = out.storage(), c] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i] * c;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// Shared skeleton: out[i] = f(a[i]); backward adds g[i] * dfdx(a[i], out[i]).
template <typename T, typename F, typename DF>
Tensor<T> unary_op(Tape<T>& tape, const char* name, const Tensor<T>& a, F f, DF dfdx) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  check_finite(tape, name, out);
  if (tape.recording() && out.requires_grad()) {
    tape.record(name, [as = a.storage(), os = out.storage(), dfdx] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (std::size_t i = 0; i < os->grad.size(); ++i)
        as->grad[i] += os->grad[i] * dfdx(as->values[i], os->values[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> log_op(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, "log", a, [](T x) { return std::log(x); },
      [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> exp_op(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sqrt_op(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> abs_op(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

// Subgradient 0 everywhere (piecewise constant).
template <typename T>
Tensor<T> sign_op(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, "sign", a,
      [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); },
      [](T, T) { return T(0); });
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;
  return detail::unary_op(
      tape, "gelu", a,
      [=](T x) {
        const double xd = static_cast<double>(x);
        return static_cast<T>(0.5 * xd * (1.0 + std::erf(xd * inv_sqrt2)));
      },
      [=](T x, T) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xd * xd);
        return static_cast<T>(cdf + xd * pdf);
      });
}

template <typename T>
Tensor<T> softplus(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary_op(
      tape, "softplus", a,
      [](T x) {
        const double xd = static_cast<double>(x);
        return static_cast<T>(std::max(xd, 0.0) + std::log1p(std::exp(-std::abs(xd))));
      },
      [](T x, T) {
        const double xd = static_cast<double>(x);
        return static_cast<T>(1.0 / (1.0 + std::exp(-xd)));
      });
}

template <typename T>
Tensor<T> pow_const(Tape<T>& tape, const Tensor<T>& a, T p) {
  return detail::unary_op(
      tape, "pow_const", a, [p](T x) { return std::pow(x, p); },
      [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

// Gradient passes only strictly inside the window (standard clamp subgradient).
template <typename T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& a, T lo, T hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must be <= hi");
  return detail::unary_op(
      tape, "clamp", a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> clamp_min(Tape<T>& tape, const Tensor<T>& a, T lo) {
  return clamp(tape, a, lo, std::numeric_limits<T>::infinity());
}

// arccos with the input clamped into [-1+acos_margin, 1-acos_margin] so the
// derivative -1/sqrt(1-x^2) stays finite; no gradient outside the window.
inline constexpr double acos_margin = 1e-7;

template <typename T>
Tensor<T> acos_clamped(Tape<T>& tape, const Tensor<T>& a) {
  const T lo = static_cast<T>(-1.0 + acos_margin);
  const T hi = static_cast<T>(1.0 - acos_margin);
  return detail::unary_op(
      tape, "acos_clamped", a,
      [lo, hi](T x) { return std::acos(std::min(std::max(x, lo), hi)); },
      [lo, hi](T x, T) {
        if (x <= lo || x >= hi) return T(0);
        const double xd = static_cast<double>(x);
        return static_cast<T>(-1.0 / std::sqrt(1.0 - xd * xd));
      });
}

// Signed power with a learnable scalar exponent: y = sign(x)*|x|^e.
// d/dx = e*|x|^(e-1); d/de = sign(x)*|x|^e*log|x| (both 0 at x = 0).
template <typename T>
Tensor<T> spow(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& e) {
  if (e.numel() != 1)
    throw std::invalid_argument("spow: exponent must be scalar, got " + shape_str(e.shape()));
  const T ev = e[0];
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || e.requires_grad());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T x = a[i];
    out[i] = x == T(0) ? T(0)
                       : (x > T(0) ? std::pow(x, ev) : -std::pow(-x, ev));
  }
  detail::check_finite(tape, "spow", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("spow", [as = a.storage(), es = e.storage(), os = out.storage(), ev] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i) {
          const T x = as->values[i];
          if (x == T(0)) continue;
          as->grad[i] += os->grad[i] * ev * std::pow(std::abs(x), ev - T(1));
        }
      }
      if (es->requires_grad) {
        if (es->grad.empty()) es->grad.assign(1, T(0));
        T acc = T(0);
        for (std::size_t i = 0; i < os->grad.size(); ++i) {
          const T x = as->values[i];
          if (x == T(0)) continue;
          acc += os->grad[i] * os->values[i] * std::log(std::abs(x));
        }
        es->grad[0] += acc;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  const int n = a.rows(), k = a.cols(), m = b.cols();
  Tensor<T> out = Tensor<T>::zeros({n, m}, a.requires_grad() || b.requires_grad());
  detail::gemm_nn(a.values().data(), b.values().data(), out.values().data(), n, k, m);
  detail::check_finite(tape, "matmul", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("matmul", [as = a.storage(), bs = b.storage(), os = out.storage(), n, k, m] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
        detail::gemm_nt(os->grad.data(), bs->values.data(), as->grad.data(), n, m, k);
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->values.size(), T(0));
        detail::gemm_tn(as->values.data(), os->grad.data(), bs->grad.data(), k, n, m);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_rank2("transpose", a);
  const int n = a.rows(), m = a.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n}, a.requires_grad());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(j) * n + i] = a[static_cast<std::size_t>(i) * m + j];
  if (tape.recording() && out.requires_grad()) {
    tape.record("transpose", [as = a.storage(), os = out.storage(), n, m] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          as->grad[static_cast<std::size_t>(i) * m + j] +=
              os->grad[static_cast<std::size_t>(j) * n + i];
    });
  }
  return out;
}

// x[N,D] + v broadcast across rows (the one sanctioned broadcast, made explicit).
template <typename T>
Tensor<T> add_rowvec(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v) {
  detail::require_rank2("add_rowvec", x);
  if (static_cast<std::size_t>(x.cols()) != v.numel())
    throw std::invalid_argument("add_rowvec: row width " + std::to_string(x.cols()) +
                                " vs vector length " + std::to_string(v.numel()));
  const int n = x.rows(), d = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad() || v.requires_grad());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i) * d + j] = x[static_cast<std::size_t>(i) * d + j] + v[j];
  detail::check_finite(tape, "add_rowvec", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("add_rowvec", [xs = x.storage(), vs = v.storage(), os = out.storage(), n, d] {
      if (os->grad.empty()) return;
      if (xs->requires_grad) {
        if (xs->grad.empty()) xs->grad.assign(xs->values.size(), T(0));
        for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
      }
      if (vs->requires_grad) {
        if (vs->grad.empty()) vs->grad.assign(vs->values.size(), T(0));
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            vs->grad[j] += os->grad[static_cast<std::size_t>(i) * d + j];
      }
    });
  }
  return out;
}

// Multiplies row i of x by s[i].
template <typename T>
Tensor<T> scale_rows(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank2("scale_rows", x);
  if (static_cast<std::size_t>(x.rows()) != s.numel())
    throw std::invalid_argument("scale_rows: " + std::to_string(x.rows()) + " rows vs " +
                                std::to_string(s.numel()) + " scales");
  const int n = x.rows(), d = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad() || s.requires_grad());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i) * d + j] = x[static_cast<std::size_t>(i) * d + j] * s[i];
  detail::check_finite(tape, "scale_rows", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("scale_rows", [xs = x.storage(), ss = s.storage(), os = out.storage(), n, d] {
      if (os->grad.empty()) return;
      if (xs->requires_grad) {
        if (xs->grad.empty()) xs->grad.assign(xs->values.size(), T(0));
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            xs->grad[static_cast<std::size_t>(i) * d + j] +=
                os->grad[static_cast<std::size_t>(i) * d + j] * ss->values[i];
      }
      if (ss->requires_grad) {
        if (ss->grad.empty()) ss->grad.assign(ss->values.size(), T(0));
        for (int i = 0; i < n; ++i) {
          T acc = T(0);
          for (int j = 0; j < d; ++j)
            acc += os->grad[static_cast<std::size_t>(i) * d + j] *
                   xs->values[static_cast<std::size_t>(i) * d + j];
          ss->grad[i] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax family (row-wise over the last axis; rank-1 treated as one row)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& a) {
  const auto [n, d] = detail::as_rows("softmax_rows", a);
  if (d == 0) throw std::invalid_argument("softmax_rows: empty rows");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * d;
    T mx = a[base];
    for (int j = 1; j < d; ++j) mx = std::max(mx, a[base + j]);
    T sum = T(0);
    for (int j = 0; j < d; ++j) {
      const T e = std::exp(a[base + j] - mx);
      out[base + j] = e;
      sum += e;
    }
    for (int j = 0; j < d; ++j) out[base + j] /= sum;
  }
  detail::check_finite(tape, "softmax_rows", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("softmax_rows", [as = a.storage(), os = out.storage(), n, d] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * d;
        T dotv = T(0);
        for (int j = 0; j < d; ++j) dotv += os->grad[base + j] * os->values[base + j];
        for (int j = 0; j < d; ++j)
          as->grad[base + j] += os->values[base + j] * (os->grad[base + j] - dotv);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax_rows(Tape<T>& tape, const Tensor<T>& a) {
  const auto [n, d] = detail::as_rows("log_softmax_rows", a);
  if (d == 0) throw std::invalid_argument("log_softmax_rows: empty rows");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * d;
    T mx = a[base];
    for (int j = 1; j < d; ++j) mx = std::max(mx, a[base + j]);
    T sum = T(0);
    for (int j = 0; j < d; ++j) sum += std::exp(a[base + j] - mx);
    const T lse = mx + std::log(sum);
    for (int j = 0; j < d; ++j) out[base + j] = a[base + j] - lse;
  }
  if (tape.recording() && out.requires_grad()) {
    tape.record("log_softmax_rows", [as = a.storage(), os = out.storage(), n, d] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * d;
        T gsum = T(0);
        for (int j = 0; j < d; ++j) gsum += os->grad[base + j];
        for (int j = 0; j < d; ++j)
          as->grad[base + j] += os->grad[base + j] - std::exp(os->values[base + j]) * gsum;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros({1}, a.requires_grad());
  T acc = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
  out[0] = acc;
  detail::check_finite(tape, "sum_all", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("sum_all", [as = a.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (std::size_t i = 0; i < as->grad.size(); ++i) as->grad[i] += os->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(Tape<T>& tape, const Tensor<T>& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  return mul_scalar(tape, sum_all(tape, a), T(1) / static_cast<T>(a.numel()));
}

// Column means of a [N,D] matrix -> [D].
template <typename T>
Tensor<T> mean_axis0(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_rank2("mean_axis0", a);
  const int n = a.rows(), d = a.cols();
  if (n == 0) throw std::invalid_argument("mean_axis0: zero rows");
  Tensor<T> out = Tensor<T>::zeros({d}, a.requires_grad());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += a[static_cast<std::size_t>(i) * d + j];
  const T inv = T(1) / static_cast<T>(n);
  for (int j = 0; j < d; ++j) out[j] *= inv;
  detail::check_finite(tape, "mean_axis0", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("mean_axis0", [as = a.storage(), os = out.storage(), n, d, inv] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          as->grad[static_cast<std::size_t>(i) * d + j] += os->grad[j] * inv;
    });
  }
  return out;
}

// Row sums of a [N,D] matrix -> [N].
template <typename T>
Tensor<T> sum_axis1(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_rank2("sum_axis1", a);
  const int n = a.rows(), d = a.cols();
  Tensor<T> out = Tensor<T>::zeros({n}, a.requires_grad());
  for (int i = 0; i < n; ++i) {
    T acc = T(0);
    for (int j = 0; j < d; ++j) acc += a[static_cast<std::size_t>(i) * d + j];
    out[i] = acc;
  }
  detail::check_finite(tape, "sum_axis1", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("sum_axis1", [as = a.storage(), os = out.storage(), n, d] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          as->grad[static_cast<std::size_t>(i) * d + j] += os->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> dot(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel())
    throw std::invalid_argument("dot: length mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros({1}, a.requires_grad() || b.requires_grad());
  T acc = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  out[0] = acc;
  detail::check_finite(tape, "dot", out);
  if (tape.recording() && out.requires_grad()) {
    tape.record("dot", [as = a.storage(), bs = b.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      const T g = os->grad[0];
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
        for (std::size_t i = 0; i < as->grad.size(); ++i) as->grad[i] += g * bs->values[i];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->values.size(), T(0));
        for (std::size_t i = 0; i < bs->grad.size(); ++i) bs->grad[i] += g * as->values[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(new_shape));
  Tensor<T> out = Tensor<T>::from(std::move(new_shape),
                                  std::vector<T>(a.values().begin(), a.values().end()),
                                  a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("reshape", [as = a.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  int cols = -1, total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_rank2("concat_rows", p);
    if (cols < 0) cols = p.cols();
    if (p.cols() != cols)
      throw std::invalid_argument("concat_rows: column mismatch, " + shape_str(p.shape()));
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  Tensor<T> out = Tensor<T>::zeros({total, cols}, rg);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.values().begin() + off);
    off += p.numel();
  }
  if (tape.recording() && rg) {
    std::vector<std::shared_ptr<TensorStorage<T>>> srcs;
    srcs.reserve(parts.size());
    for (const auto& p : parts) srcs.push_back(p.storage());
    tape.record("concat_rows", [srcs, os = out.storage()] {
      if (os->grad.empty()) return;
      std::size_t pos = 0;
      for (const auto& s : srcs) {
        const std::size_t n = s->values.size();
        if (s->requires_grad) {
          if (s->grad.empty()) s->grad.assign(n, T(0));
          for (std::size_t i = 0; i < n; ++i) s->grad[i] += os->grad[pos + i];
        }
        pos += n;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& a, int r0, int r1) {
  detail::require_rank2("slice_rows", a);
  if (r0 < 0 || r1 > a.rows() || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") for " + shape_str(a.shape()));
  const int d = a.cols();
  Tensor<T> out = Tensor<T>::zeros({r1 - r0, d}, a.requires_grad());
  std::copy(a.values().begin() + static_cast<std::size_t>(r0) * d,
            a.values().begin() + static_cast<std::size_t>(r1) * d, out.values().begin());
  if (tape.recording() && out.requires_grad()) {
    tape.record("slice_rows", [as = a.storage(), os = out.storage(), r0, d] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      const std::size_t base = static_cast<std::size_t>(r0) * d;
      for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[base + i] += os->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& a, const std::vector<int>& idx) {
  detail::require_rank2("gather_rows", a);
  for (int i : idx)
    if (i < 0 || i >= a.rows())
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) +
                                  " out of range for " + shape_str(a.shape()));
  const int d = a.cols();
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), d}, a.requires_grad());
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(a.values().begin() + static_cast<std::size_t>(idx[r]) * d,
              a.values().begin() + static_cast<std::size_t>(idx[r] + 1) * d,
              out.values().begin() + r * d);
  if (tape.recording() && out.requires_grad()) {
    tape.record("gather_rows", [as = a.storage(), os = out.storage(), idx, d] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < d; ++j)
          as->grad[static_cast<std::size_t>(idx[r]) * d + j] += os->grad[r * d + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& a, int c0, int c1) {
  detail::require_rank2("slice_cols", a);
  if (c0 < 0 || c1 > a.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + shape_str(a.shape()));
  const int n = a.rows(), d = a.cols(), w = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({n, w}, a.requires_grad());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<std::size_t>(i) * w + j] = a[static_cast<std::size_t>(i) * d + c0 + j];
  if (tape.recording() && out.requires_grad()) {
    tape.record("slice_cols", [as = a.storage(), os = out.storage(), n, d, c0, w] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
          as->grad[static_cast<std::size_t>(i) * d + c0 + j] +=
              os->grad[static_cast<std::size_t>(i) * w + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int n = parts.front().rank() == 2 ? parts.front().rows() : -1;
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_rank2("concat_cols", p);
    if (p.rows() != n)
      throw std::invalid_argument("concat_cols: row mismatch, " + shape_str(p.shape()));
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor<T> out = Tensor<T>::zeros({n, total}, rg);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<std::size_t>(i) * total + off + j] =
            p[static_cast<std::size_t>(i) * w + j];
    off += w;
  }
  if (tape.recording() && rg) {
    std::vector<std::shared_ptr<TensorStorage<T>>> srcs;
    std::vector<int> widths;
    for (const auto& p : parts) {
      srcs.push_back(p.storage());
      widths.push_back(p.cols());
    }
    tape.record("concat_cols", [srcs, widths, os = out.storage(), n, total] {
      if (os->grad.empty()) return;
      int off2 = 0;
      for (std::size_t s = 0; s < srcs.size(); ++s) {
        const int w = widths[s];
        if (srcs[s]->requires_grad) {
          if (srcs[s]->grad.empty()) srcs[s]->grad.assign(srcs[s]->values.size(), T(0));
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
              srcs[s]->grad[static_cast<std::size_t>(i) * w + j] +=
                  os->grad[static_cast<std::size_t>(i) * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pick(Tape<T>& tape, const Tensor<T>& a, std::size_t flat_index) {
  if (flat_index >= a.numel())
    throw std::invalid_argument("pick: index " + std::to_string(flat_index) +
                                " out of range for " + shape_str(a.shape()));
  Tensor<T> out = Tensor<T>::zeros({1}, a.requires_grad());
  out[0] = a[flat_index];
  if (tape.recording() && out.requires_grad()) {
    tape.record("pick", [as = a.storage(), os = out.storage(), flat_index] {
      if (os->grad.empty()) return;
      if (as->grad.empty()) as->grad.assign(as->values.size(), T(0));
      as->grad[flat_index] += os->grad[0];
    });
  }
  return out;
}

// Elementwise max over k same-shape tensors; gradient routes to the first
// argmax (ties toward the earliest input).
template <typename T>
Tensor<T> max_list(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("max_list: no inputs");
  for (const auto& p : parts) detail::require_same_shape("max_list", parts.front(), p);
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  const std::size_t n = parts.front().numel();
  Tensor<T> out = Tensor<T>::zeros(parts.front().shape(), rg);
  std::vector<int> which(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    T best = parts[0][i];
    int arg = 0;
    for (std::size_t s = 1; s < parts.size(); ++s)
      if (parts[s][i] > best) {
        best = parts[s][i];
        arg = static_cast<int>(s);
      }
    out[i] = best;
    which[i] = arg;
  }
  if (tape.recording() && rg) {
    std::vector<std::shared_ptr<TensorStorage<T>>> srcs;
    for (const auto& p : parts) srcs.push_back(p.storage());
    tape.record("max_list", [srcs, which = std::move(which), os = out.storage()] {
      if (os->grad.empty()) return;
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        auto& s = srcs[static_cast<std::size_t>(which[i])];
        if (!s->requires_grad) continue;
        if (s->grad.empty()) s->grad.assign(s->values.size(), T(0));
        s->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

// Row-wise layer normalization with affine parameters.
template <typename T>
Tensor<T> layer_norm_rows(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_rank2("layer_norm_rows", x);
  const int n = x.rows(), d = x.cols();
  if (static_cast<std::size_t>(d) != gamma.numel() || static_cast<std::size_t>(d) != beta.numel())
    throw std::invalid_argument("layer_norm_rows: affine width mismatch");
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  std::vector<T> xhat(static_cast<std::size_t>(n) * d);
  std::vector<T> inv_sigma(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += x[base + j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      const T c = x[base + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      xhat[base + j] = (x[base + j] - mu) * is;
      out[base + j] = xhat[base + j] * gamma[j] + beta[j];
    }
  }
  detail::check_finite(tape, "layer_norm_rows", out);
  if (tape.recording() && rg) {
    tape.record("layer_norm_rows",
                [xs = x.storage(), gs = gamma.storage(), bs = beta.storage(),
                 os = out.storage(), xhat = std::move(xhat), inv_sigma = std::move(inv_sigma),
                 n, d] {
      if (os->grad.empty()) return;
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * d;
        if (xs->requires_grad) {
          if (xs->grad.empty()) xs->grad.assign(xs->values.size(), T(0));
          T g_mean = T(0), gx_mean = T(0);
          for (int j = 0; j < d; ++j) {
            const T g = os->grad[base + j] * gs->values[j];
            g_mean += g;
            gx_mean += g * xhat[base + j];
          }
          g_mean /= static_cast<T>(d);
          gx_mean /= static_cast<T>(d);
          const T is = inv_sigma[static_cast<std::size_t>(i)];
          for (int j = 0; j < d; ++j) {
            const T g = os->grad[base + j] * gs->values[j];
            xs->grad[base + j] += is * (g - g_mean - xhat[base + j] * gx_mean);
          }
        }
        if (gs->requires_grad) {
          if (gs->grad.empty()) gs->grad.assign(gs->values.size(), T(0));
          for (int j = 0; j < d; ++j) gs->grad[j] += os->grad[base + j] * xhat[base + j];
        }
        if (bs->requires_grad) {
          if (bs->grad.empty()) bs->grad.assign(bs->values.size(), T(0));
          for (int j = 0; j < d; ++j) bs->grad[j] += os->grad[base + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// composed helpers
// ---------------------------------------------------------------------------

// L2 norm of a flat tensor as a scalar, floored at eps (division guard).
template <typename T>
Tensor<T> l2_norm_clamped(Tape<T>& tape, const Tensor<T>& a, T eps) {
  return clamp_min(tape, sqrt_op(tape, dot(tape, a, a)), eps);
}

// Cosine similarity of two flat tensors with eps-guarded denominators.
template <typename T>
Tensor<T> cosine_sim(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T eps) {
  Tensor<T> denom = mul(tape, l2_norm_clamped(tape, a, eps), l2_norm_clamped(tape, b, eps));
  return div(tape, dot(tape, a, b), denom);
}

// Per-row L2 norms of [N,D] -> [N], floored at eps.
template <typename T>
Tensor<T> row_norms_clamped(Tape<T>& tape, const Tensor<T>& x, T eps) {
  return clamp_min(tape, sqrt_op(tape, sum_axis1(tape, mul(tape, x, x))), eps);
}

}  // namespace compil

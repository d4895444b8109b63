#pragma once

// Differentiable primitives. Every op validates shapes, checks its output for
// NaN/Inf, and registers a backward closure on the tape. Reductions accumulate
// in double regardless of the storage type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "hafusion/rng.hpp"
#include "hafusion/tape.hpp"
#include "hafusion/tensor.hpp"
#include "hafusion/warnings.hpp"

namespace hafusion {
namespace detail {

// C(m x n) += A(m x k) * B(k x n)
template <typename T>
void gemm_nn(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x n) += A(m x k) * B(n x k)^T
template <typename T>
void gemm_nt(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += static_cast<double>(arow[l]) * brow[l];
      crow[j] += static_cast<T>(acc);
    }
  }
}

// C(m x n) += A(k x m)^T * B(k x n)
template <typename T>
void gemm_tn(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t l = 0; l < k; ++l) {
    const T* arow = a + l * m;
    const T* brow = b + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace detail

namespace ops {

template <typename T>
VarId matmul(Tape<T>& t, VarId a, VarId b) {
  const Tensor<T>& av = t.val(a);
  const Tensor<T>& bv = t.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out({m, n});
  detail::gemm_nn(out.data(), av.data(), bv.data(), m, k, n);
  require_finite(out, "matmul");
  bool req = t.wants_grad(a) || t.wants_grad(b);
  return t.make(std::move(out), req, [a, b, m, k, n](Tape<T>& tp, VarId self) {
    const T* g = tp.grad(self).data();
    if (tp.wants_grad(a)) detail::gemm_nt(tp.grad(a).data(), g, tp.val(b).data(), m, n, k);
    if (tp.wants_grad(b)) detail::gemm_tn(tp.grad(b).data(), tp.val(a).data(), g, k, m, n);
  });
}

template <typename T>
VarId transpose(Tape<T>& t, VarId a) {
  const Tensor<T>& av = t.val(a);
  if (av.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(av.shape()));
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at2(j, i) = av.at2(i, j);
  return t.make(std::move(out), t.wants_grad(a), [a, m, n](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(a)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& ga = tp.grad(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.at2(i, j) += g.at2(j, i);
  });
}

// y[..., b] = x[..., a] * W[a x b] (+ bias[b]); rows of x may span any leading
// shape, realizing every dense map in the model (projections, FFNs, heads).
template <typename T>
VarId linear(Tape<T>& t, VarId x, VarId w, std::optional<VarId> bias = std::nullopt) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& wv = t.val(w);
  if (xv.rank() < 1 || wv.rank() != 2) throw ShapeError("linear: bad ranks");
  const std::size_t in = xv.shape().back();
  if (in != wv.rows()) {
    throw ShapeError("linear: inner dimensions mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str(wv.shape()));
  }
  const std::size_t rows = xv.numel() / in;
  const std::size_t outdim = wv.cols();
  Shape oshape = xv.shape();
  oshape.back() = outdim;
  Tensor<T> out(oshape);
  detail::gemm_nn(out.data(), xv.data(), wv.data(), rows, in, outdim);
  bool req = t.wants_grad(x) || t.wants_grad(w);
  if (bias) {
    const Tensor<T>& bv = t.val(*bias);
    if (bv.numel() != outdim) throw ShapeError("linear: bias length mismatch");
    T* o = out.data();
    const T* b = bv.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < outdim; ++j) o[r * outdim + j] += b[j];
    req = req || t.wants_grad(*bias);
  }
  require_finite(out, "linear");
  return t.make(std::move(out), req, [x, w, bias, rows, in, outdim](Tape<T>& tp, VarId self) {
    const T* g = tp.grad(self).data();
    if (tp.wants_grad(x)) detail::gemm_nt(tp.grad(x).data(), g, tp.val(w).data(), rows, outdim, in);
    if (tp.wants_grad(w)) detail::gemm_tn(tp.grad(w).data(), tp.val(x).data(), g, in, rows, outdim);
    if (bias && tp.wants_grad(*bias)) {
      T* gb = tp.grad(*bias).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outdim; ++j) gb[j] += g[r * outdim + j];
    }
  });
}

namespace detail2 {

template <typename T, typename FwdFn, typename BwdFn>
VarId elementwise_binary(Tape<T>& t, VarId a, VarId b, const char* name, FwdFn f, BwdFn bw) {
  const Tensor<T>& av = t.val(a);
  const Tensor<T>& bv = t.val(b);
  if (!av.same_shape(bv)) {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(av[i], bv[i]);
  require_finite(out, name);
  return t.make(std::move(out), t.wants_grad(a) || t.wants_grad(b), std::move(bw));
}

}  // namespace detail2

template <typename T>
VarId add(Tape<T>& t, VarId a, VarId b) {
  return detail2::elementwise_binary(
      t, a, b, "add", [](T x, T y) { return x + y; },
      [a, b](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.wants_grad(a)) {
          Tensor<T>& ga = tp.grad(a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.wants_grad(b)) {
          Tensor<T>& gb = tp.grad(b);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
      });
}

template <typename T>
VarId sub(Tape<T>& t, VarId a, VarId b) {
  return detail2::elementwise_binary(
      t, a, b, "sub", [](T x, T y) { return x - y; },
      [a, b](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.wants_grad(a)) {
          Tensor<T>& ga = tp.grad(a);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.wants_grad(b)) {
          Tensor<T>& gb = tp.grad(b);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
      });
}

template <typename T>
VarId mul(Tape<T>& t, VarId a, VarId b) {
  return detail2::elementwise_binary(
      t, a, b, "mul", [](T x, T y) { return x * y; },
      [a, b](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.wants_grad(a)) {
          Tensor<T>& ga = tp.grad(a);
          const Tensor<T>& bv = tp.val(b);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tp.wants_grad(b)) {
          Tensor<T>& gb = tp.grad(b);
          const Tensor<T>& av = tp.val(a);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
      });
}

// y = scale * x + shift, elementwise with compile-time constants.
template <typename T>
VarId affine(Tape<T>& t, VarId x, double scale, double shift = 0.0) {
  const Tensor<T>& xv = t.val(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<T>(scale * static_cast<double>(xv[i]) + shift);
  require_finite(out, "affine");
  return t.make(std::move(out), t.wants_grad(x), [x, scale](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += static_cast<T>(scale * g[i]);
  });
}

template <typename T>
VarId scale(Tape<T>& t, VarId x, double c) {
  return affine(t, x, c, 0.0);
}

// y = s * x where s is a scalar node ([1]).
template <typename T>
VarId scale_by(Tape<T>& t, VarId s, VarId x) {
  const Tensor<T>& sv = t.val(s);
  const Tensor<T>& xv = t.val(x);
  if (sv.numel() != 1) throw ShapeError("scale_by: scalar expected");
  Tensor<T> out(xv.shape());
  const T c = sv[0];
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c * xv[i];
  require_finite(out, "scale_by");
  return t.make(std::move(out), t.wants_grad(s) || t.wants_grad(x),
                [s, x](Tape<T>& tp, VarId self) {
                  const Tensor<T>& g = tp.grad(self);
                  const Tensor<T>& xv2 = tp.val(x);
                  if (tp.wants_grad(x)) {
                    Tensor<T>& gx = tp.grad(x);
                    const T c2 = tp.val(s)[0];
                    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += c2 * g[i];
                  }
                  if (tp.wants_grad(s)) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.numel(); ++i)
                      acc += static_cast<double>(g[i]) * xv2[i];
                    tp.grad(s)[0] += static_cast<T>(acc);
                  }
                });
}

// Numerically stabilized softmax along `axis` (subtract slice max).
template <typename T>
VarId softmax(Tape<T>& t, VarId x, std::size_t axis) {
  const Tensor<T>& xv = t.val(x);
  const auto sp = detail::split_axis(xv.shape(), axis);
  Tensor<T> out(xv.shape());
  const T* in = xv.data();
  T* o = out.data();
  for (std::size_t ou = 0; ou < sp.outer; ++ou) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      const std::size_t base = ou * sp.len * sp.inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < sp.len; ++i)
        mx = std::max(mx, static_cast<double>(in[base + i * sp.inner]));
      double sum = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i) {
        const double e = std::exp(static_cast<double>(in[base + i * sp.inner]) - mx);
        o[base + i * sp.inner] = static_cast<T>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t i = 0; i < sp.len; ++i)
        o[base + i * sp.inner] = static_cast<T>(static_cast<double>(o[base + i * sp.inner]) * inv);
    }
  }
  require_finite(out, "softmax");
  return t.make(std::move(out), t.wants_grad(x), [x, sp](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& y = tp.val(self);
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t ou = 0; ou < sp.outer; ++ou) {
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const std::size_t base = ou * sp.len * sp.inner + j;
        double dot = 0.0;
        for (std::size_t i = 0; i < sp.len; ++i) {
          const std::size_t k = base + i * sp.inner;
          dot += static_cast<double>(g[k]) * y[k];
        }
        for (std::size_t i = 0; i < sp.len; ++i) {
          const std::size_t k = base + i * sp.inner;
          gx[k] += static_cast<T>(y[k] * (static_cast<double>(g[k]) - dot));
        }
      }
    }
  });
}

// Divides each slice along `axis` by its L1 norm. An all-zero slice maps to
// zeros (with a recorded warning) instead of NaN.
template <typename T>
VarId l1_normalize(Tape<T>& t, VarId x, std::size_t axis) {
  const Tensor<T>& xv = t.val(x);
  const auto sp = detail::split_axis(xv.shape(), axis);
  Tensor<T> out(xv.shape());
  const T* in = xv.data();
  T* o = out.data();
  for (std::size_t ou = 0; ou < sp.outer; ++ou) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      const std::size_t base = ou * sp.len * sp.inner + j;
      double sum = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i)
        sum += std::abs(static_cast<double>(in[base + i * sp.inner]));
      if (sum == 0.0) {
        warn("l1_normalize.zero_slice");
        for (std::size_t i = 0; i < sp.len; ++i) o[base + i * sp.inner] = T(0);
      } else {
        const double inv = 1.0 / sum;
        for (std::size_t i = 0; i < sp.len; ++i)
          o[base + i * sp.inner] = static_cast<T>(in[base + i * sp.inner] * inv);
      }
    }
  }
  require_finite(out, "l1_normalize");
  return t.make(std::move(out), t.wants_grad(x), [x, sp](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& xv2 = tp.val(x);
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t ou = 0; ou < sp.outer; ++ou) {
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const std::size_t base = ou * sp.len * sp.inner + j;
        double sum = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < sp.len; ++i) {
          const std::size_t k = base + i * sp.inner;
          sum += std::abs(static_cast<double>(xv2[k]));
          dot += static_cast<double>(g[k]) * xv2[k];
        }
        if (sum == 0.0) continue;
        const double inv = 1.0 / sum;
        for (std::size_t i = 0; i < sp.len; ++i) {
          const std::size_t k = base + i * sp.inner;
          const double sgn = xv2[k] > T(0) ? 1.0 : (xv2[k] < T(0) ? -1.0 : 0.0);
          gx[k] += static_cast<T>(inv * (static_cast<double>(g[k]) - dot * inv * sgn));
        }
      }
    }
  });
}

namespace detail2 {

template <typename T, typename FwdFn, typename DerivFn>
VarId elementwise_unary(Tape<T>& t, VarId x, const char* name, FwdFn f, DerivFn d) {
  const Tensor<T>& xv = t.val(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  require_finite(out, name);
  return t.make(std::move(out), t.wants_grad(x), [x, d](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& xv2 = tp.val(x);
    const Tensor<T>& y = tp.val(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * d(xv2[i], y[i]);
  });
}

}  // namespace detail2

template <typename T>
VarId leaky_relu(Tape<T>& t, VarId x, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) throw ConfigError("leaky_relu: slope must be in (0,1)");
  const T s = static_cast<T>(slope);
  return detail2::elementwise_unary(
      t, x, "leaky_relu", [s](T v) { return v >= T(0) ? v : s * v; },
      [s](T v, T) { return v >= T(0) ? T(1) : s; });
}

template <typename T>
VarId relu(Tape<T>& t, VarId x) {
  return detail2::elementwise_unary(
      t, x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
VarId sigmoid(Tape<T>& t, VarId x) {
  return detail2::elementwise_unary(
      t, x, "sigmoid",
      [](T v) {
        const double z = static_cast<double>(v);
        return static_cast<T>(z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                       : std::exp(z) / (1.0 + std::exp(z)));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
VarId abs(Tape<T>& t, VarId x) {
  return detail2::elementwise_unary(
      t, x, "abs", [](T v) { return v < T(0) ? -v : v; },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// log(x + eps); the shift keeps zero probabilities out of the singularity.
template <typename T>
VarId log_shifted(Tape<T>& t, VarId x, double eps) {
  return detail2::elementwise_unary(
      t, x, "log_shifted",
      [eps](T v) { return static_cast<T>(std::log(static_cast<double>(v) + eps)); },
      [eps](T v, T) { return static_cast<T>(1.0 / (static_cast<double>(v) + eps)); });
}

// Row-wise layer normalization of a [n x d] matrix: standardize each row, then
// scale by gain and add shift (both [d]).
template <typename T>
VarId layer_norm(Tape<T>& t, VarId x, VarId gain, VarId shift, double eps) {
  const Tensor<T>& xv = t.val(x);
  if (xv.rank() != 2) throw ShapeError("layer_norm: expected rank 2");
  const std::size_t n = xv.rows(), d = xv.cols();
  const Tensor<T>& gv = t.val(gain);
  const Tensor<T>& sv = t.val(shift);
  if (gv.numel() != d || sv.numel() != d) throw ShapeError("layer_norm: gain/shift length mismatch");
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    T* orow = out.data() + i * d;
    for (std::size_t j = 0; j < d; ++j)
      orow[j] = static_cast<T>((row[j] - mean) * inv * gv[j] + sv[j]);
  }
  require_finite(out, "layer_norm");
  bool req = t.wants_grad(x) || t.wants_grad(gain) || t.wants_grad(shift);
  return t.make(std::move(out), req, [x, gain, shift, n, d, eps](Tape<T>& tp, VarId self) {
    const Tensor<T>& xv2 = tp.val(x);
    const Tensor<T>& gv2 = tp.val(gain);
    const Tensor<T>& g = tp.grad(self);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = xv2.data() + i * d;
      const T* grow = g.data() + i * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = row[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      if (tp.wants_grad(gain)) {
        Tensor<T>& gg = tp.grad(gain);
        for (std::size_t j = 0; j < d; ++j)
          gg[j] += static_cast<T>(grow[j] * (row[j] - mean) * inv);
      }
      if (tp.wants_grad(shift)) {
        Tensor<T>& gs = tp.grad(shift);
        for (std::size_t j = 0; j < d; ++j) gs[j] += grow[j];
      }
      if (tp.wants_grad(x)) {
        // dxhat = g * gain; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        double m1 = 0.0, m2 = 0.0;
        std::vector<double> dxhat(d), xhat(d);
        for (std::size_t j = 0; j < d; ++j) {
          xhat[j] = (row[j] - mean) * inv;
          dxhat[j] = static_cast<double>(grow[j]) * gv2[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * xhat[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        Tensor<T>& gx = tp.grad(x);
        T* gxrow = gx.data() + i * d;
        for (std::size_t j = 0; j < d; ++j)
          gxrow[j] += static_cast<T>(inv * (dxhat[j] - m1 - xhat[j] * m2));
      }
    }
  });
}

// 2-D cross-correlation, x: [cin x h x w], kernels: [cout x cin x k x k].
template <typename T>
VarId conv2d(Tape<T>& t, VarId x, VarId kernels, std::size_t pad, std::size_t stride) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& kv = t.val(kernels);
  if (xv.rank() != 3 || kv.rank() != 4) throw ShapeError("conv2d: expected [cin,h,w] and [cout,cin,k,k]");
  const std::size_t cin = xv.extent(0), h = xv.extent(1), w = xv.extent(2);
  const std::size_t cout = kv.extent(0), kh = kv.extent(2), kw = kv.extent(3);
  if (kv.extent(1) != cin) throw ShapeError("conv2d: channel mismatch");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor<T> out({cout, oh, ow});
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t dy = 0; dy < kh; ++dy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + dy) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + dx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += static_cast<double>(xv.at3(ci, static_cast<std::size_t>(iy),
                                                static_cast<std::size_t>(ix))) *
                     kv.at4(co, ci, dy, dx);
            }
          }
        }
        out.at3(co, oy, ox) = static_cast<T>(acc);
      }
    }
  }
  require_finite(out, "conv2d");
  bool req = t.wants_grad(x) || t.wants_grad(kernels);
  return t.make(std::move(out), req,
                [x, kernels, pad, stride, cin, h, w, cout, kh, kw, oh, ow](Tape<T>& tp, VarId self) {
                  const Tensor<T>& g = tp.grad(self);
                  const Tensor<T>& xv2 = tp.val(x);
                  const Tensor<T>& kv2 = tp.val(kernels);
                  const bool wx = tp.wants_grad(x);
                  const bool wk = tp.wants_grad(kernels);
                  for (std::size_t co = 0; co < cout; ++co) {
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                      for (std::size_t ox = 0; ox < ow; ++ox) {
                        const T go = g.at3(co, oy, ox);
                        if (go == T(0)) continue;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                          for (std::size_t dy = 0; dy < kh; ++dy) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t dx = 0; dx < kw; ++dx) {
                              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + dx) -
                                                        static_cast<std::ptrdiff_t>(pad);
                              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                              const std::size_t uy = static_cast<std::size_t>(iy);
                              const std::size_t ux = static_cast<std::size_t>(ix);
                              if (wx) tp.grad(x).at3(ci, uy, ux) += go * kv2.at4(co, ci, dy, dx);
                              if (wk) tp.grad(kernels).at4(co, ci, dy, dx) += go * xv2.at3(ci, uy, ux);
                            }
                          }
                        }
                      }
                    }
                  }
                });
}

// Mean over each k x k window; padding cells are excluded from the divisor
// (count_include_pad = false).
template <typename T>
VarId avg_pool2d(Tape<T>& t, VarId x, std::size_t k, std::size_t pad, std::size_t stride) {
  const Tensor<T>& xv = t.val(x);
  if (xv.rank() != 3) throw ShapeError("avg_pool2d: expected [c,h,w]");
  const std::size_t c = xv.extent(0), h = xv.extent(1), w = xv.extent(2);
  if (stride == 0) throw ConfigError("avg_pool2d: stride must be positive");
  if (h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("avg_pool2d: window larger than padded input");
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (w + 2 * pad - k) / stride + 1;
  Tensor<T> out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        std::size_t cnt = 0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + dy) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + dx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            acc += xv.at3(ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            ++cnt;
          }
        }
        out.at3(ch, oy, ox) = static_cast<T>(acc / static_cast<double>(cnt));
      }
    }
  }
  require_finite(out, "avg_pool2d");
  return t.make(std::move(out), t.wants_grad(x),
                [x, k, pad, stride, c, h, w, oh, ow](Tape<T>& tp, VarId self) {
                  if (!tp.wants_grad(x)) return;
                  const Tensor<T>& g = tp.grad(self);
                  Tensor<T>& gx = tp.grad(x);
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                      for (std::size_t ox = 0; ox < ow; ++ox) {
                        std::size_t cnt = 0;
                        for (std::size_t dy = 0; dy < k; ++dy) {
                          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                                                    static_cast<std::ptrdiff_t>(pad);
                          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                          for (std::size_t dx = 0; dx < k; ++dx) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + dx) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            ++cnt;
                          }
                        }
                        const T share = static_cast<T>(static_cast<double>(g.at3(ch, oy, ox)) /
                                                       static_cast<double>(cnt));
                        for (std::size_t dy = 0; dy < k; ++dy) {
                          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                                                    static_cast<std::ptrdiff_t>(pad);
                          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                          for (std::size_t dx = 0; dx < k; ++dx) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + dx) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            gx.at3(ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                                share;
                          }
                        }
                      }
                    }
                  }
                });
}

template <typename T>
VarId reduce_mean_axis(Tape<T>& t, VarId x, std::size_t axis) {
  const Tensor<T>& xv = t.val(x);
  const auto sp = detail::split_axis(xv.shape(), axis);
  Shape oshape;
  for (std::size_t i = 0; i < xv.rank(); ++i)
    if (i != axis) oshape.push_back(xv.extent(i));
  if (oshape.empty()) oshape.push_back(1);
  Tensor<T> out(oshape);
  const T* in = xv.data();
  T* o = out.data();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::size_t ou = 0; ou < sp.outer; ++ou) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i) acc += in[(ou * sp.len + i) * sp.inner + j];
      o[ou * sp.inner + j] = static_cast<T>(acc * inv);
    }
  }
  require_finite(out, "reduce_mean_axis");
  return t.make(std::move(out), t.wants_grad(x), [x, sp, inv](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t ou = 0; ou < sp.outer; ++ou)
      for (std::size_t i = 0; i < sp.len; ++i)
        for (std::size_t j = 0; j < sp.inner; ++j)
          gx[(ou * sp.len + i) * sp.inner + j] += static_cast<T>(g[ou * sp.inner + j] * inv);
  });
}

template <typename T>
VarId reduce_sum_all(Tape<T>& t, VarId x) {
  const Tensor<T>& xv = t.val(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  require_finite(out, "reduce_sum_all");
  return t.make(std::move(out), t.wants_grad(x), [x](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const T g = tp.grad(self)[0];
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

template <typename T>
VarId reduce_mean_all(Tape<T>& t, VarId x) {
  const std::size_t n = t.val(x).numel();
  return scale(t, reduce_sum_all(t, x), 1.0 / static_cast<double>(n));
}

template <typename T>
VarId slice_cols(Tape<T>& t, VarId x, std::size_t c0, std::size_t w) {
  const Tensor<T>& xv = t.val(x);
  if (xv.rank() != 2 || c0 + w > xv.cols()) throw ShapeError("slice_cols: out of range");
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor<T> out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at2(i, j) = xv.at2(i, c0 + j);
  return t.make(std::move(out), t.wants_grad(x), [x, c0, w, n, d](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    (void)d;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) gx.at2(i, c0 + j) += g.at2(i, j);
  });
}

template <typename T>
VarId concat_cols(Tape<T>& t, const std::vector<VarId>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = t.val(parts[0]).rows();
  std::size_t total = 0;
  bool req = false;
  for (VarId p : parts) {
    const Tensor<T>& pv = t.val(p);
    if (pv.rank() != 2 || pv.rows() != n) throw ShapeError("concat_cols: row mismatch");
    total += pv.cols();
    req = req || t.wants_grad(p);
  }
  Tensor<T> out({n, total});
  std::size_t off = 0;
  for (VarId p : parts) {
    const Tensor<T>& pv = t.val(p);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out.at2(i, off + j) = pv.at2(i, j);
    off += pv.cols();
  }
  return t.make(std::move(out), req, [parts, n](Tape<T>& tp, VarId self) {
    const Tensor<T>& g = tp.grad(self);
    std::size_t off2 = 0;
    for (VarId p : parts) {
      const std::size_t w = tp.val(p).cols();
      if (tp.wants_grad(p)) {
        Tensor<T>& gp = tp.grad(p);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) gp.at2(i, j) += g.at2(i, off2 + j);
      }
      off2 += w;
    }
  });
}

// v matrices [n x d] -> [n x v x d].
template <typename T>
VarId stack_views(Tape<T>& t, const std::vector<VarId>& views) {
  if (views.empty()) throw ShapeError("stack_views: no inputs");
  const std::size_t n = t.val(views[0]).rows();
  const std::size_t d = t.val(views[0]).cols();
  bool req = false;
  for (VarId vid : views) {
    const Tensor<T>& vv = t.val(vid);
    if (vv.rank() != 2 || vv.rows() != n || vv.cols() != d)
      throw ShapeError("stack_views: shape mismatch");
    req = req || t.wants_grad(vid);
  }
  const std::size_t v = views.size();
  Tensor<T> out({n, v, d});
  for (std::size_t j = 0; j < v; ++j) {
    const Tensor<T>& vv = t.val(views[j]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) out.at3(i, j, k) = vv.at2(i, k);
  }
  return t.make(std::move(out), req, [views, n, d](Tape<T>& tp, VarId self) {
    const Tensor<T>& g = tp.grad(self);
    for (std::size_t j = 0; j < views.size(); ++j) {
      if (!tp.wants_grad(views[j])) continue;
      Tensor<T>& gv = tp.grad(views[j]);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) gv.at2(i, k) += g.at3(i, j, k);
    }
  });
}

// [n x v x d] -> [n x d], selecting view j.
template <typename T>
VarId take_view(Tape<T>& t, VarId x, std::size_t j) {
  const Tensor<T>& xv = t.val(x);
  if (xv.rank() != 3 || j >= xv.extent(1)) throw ShapeError("take_view: bad index");
  const std::size_t n = xv.extent(0), d = xv.extent(2);
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) out.at2(i, k) = xv.at3(i, j, k);
  return t.make(std::move(out), t.wants_grad(x), [x, j, n, d](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) gx.at3(i, j, k) += g.at2(i, k);
  });
}

template <typename T>
VarId stack_scalars(Tape<T>& t, const std::vector<VarId>& xs) {
  if (xs.empty()) throw ShapeError("stack_scalars: no inputs");
  Tensor<T> out({xs.size()});
  bool req = false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor<T>& xv = t.val(xs[i]);
    if (xv.numel() != 1) throw ShapeError("stack_scalars: scalar expected");
    out[i] = xv[0];
    req = req || t.wants_grad(xs[i]);
  }
  return t.make(std::move(out), req, [xs](Tape<T>& tp, VarId self) {
    const Tensor<T>& g = tp.grad(self);
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (tp.wants_grad(xs[i])) tp.grad(xs[i])[0] += g[i];
  });
}

template <typename T>
VarId pick(Tape<T>& t, VarId x, std::size_t i) {
  const Tensor<T>& xv = t.val(x);
  if (i >= xv.numel()) throw ShapeError("pick: index out of range");
  Tensor<T> out = Tensor<T>::scalar(xv[i]);
  return t.make(std::move(out), t.wants_grad(x), [x, i](Tape<T>& tp, VarId self) {
    if (tp.wants_grad(x)) tp.grad(x)[i] += tp.grad(self)[0];
  });
}

template <typename T>
VarId reshape(Tape<T>& t, VarId x, Shape shape) {
  Tensor<T> out = t.val(x).reshaped(shape);
  return t.make(std::move(out), t.wants_grad(x), [x](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

// Inverted dropout: in train mode each element is zeroed with probability
// `rate` and survivors are scaled by 1/(1-rate); eval mode is the identity.
template <typename T>
VarId dropout(Tape<T>& t, VarId x, double rate, bool train, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return x;
  if (rng == nullptr) throw ConfigError("dropout: train mode requires an rng");
  const Tensor<T>& xv = t.val(x);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(xv.numel());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = rng->bernoulli(rate) ? T(0) : keep_scale;
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * mask[i];
  require_finite(out, "dropout");
  return t.make(std::move(out), t.wants_grad(x), [x, mask = std::move(mask)](Tape<T>& tp, VarId self) {
    if (!tp.wants_grad(x)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
  });
}

// a.b / (max(|a|,eps) * max(|b|,eps)); a zero vector yields similarity 0.
template <typename T>
VarId cosine_similarity(Tape<T>& t, VarId a, VarId b, double eps) {
  const Tensor<T>& av = t.val(a);
  const Tensor<T>& bv = t.val(b);
  if (av.numel() != bv.numel()) throw ShapeError("cosine_similarity: length mismatch");
  const std::size_t n = av.numel();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += static_cast<double>(av[i]) * bv[i];
    na2 += static_cast<double>(av[i]) * av[i];
    nb2 += static_cast<double>(bv[i]) * bv[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double da = std::max(na, eps), db = std::max(nb, eps);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(dot / (da * db)));
  require_finite(out, "cosine_similarity");
  bool req = t.wants_grad(a) || t.wants_grad(b);
  return t.make(std::move(out), req, [a, b, eps, n](Tape<T>& tp, VarId self) {
    const double g = static_cast<double>(tp.grad(self)[0]);
    const Tensor<T>& av2 = tp.val(a);
    const Tensor<T>& bv2 = tp.val(b);
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dot += static_cast<double>(av2[i]) * bv2[i];
      na2 += static_cast<double>(av2[i]) * av2[i];
      nb2 += static_cast<double>(bv2[i]) * bv2[i];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const double da = std::max(na, eps), db = std::max(nb, eps);
    const double inv = 1.0 / (da * db);
    if (tp.wants_grad(a)) {
      Tensor<T>& ga = tp.grad(a);
      for (std::size_t i = 0; i < n; ++i) {
        double d = bv2[i] * inv;
        if (na > eps) d -= dot * inv / (na * da) * av2[i];
        ga[i] += static_cast<T>(g * d);
      }
    }
    if (tp.wants_grad(b)) {
      Tensor<T>& gb = tp.grad(b);
      for (std::size_t i = 0; i < n; ++i) {
        double d = av2[i] * inv;
        if (nb > eps) d -= dot * inv / (nb * db) * bv2[i];
        gb[i] += static_cast<T>(g * d);
      }
    }
  });
}

}  // namespace ops
}  // namespace hafusion

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dfstrans/random.hpp"
#include "dfstrans/tensor.hpp"

// Differentiable operations recorded on a Tape. Each op computes its forward
// value eagerly and registers a closure that pushes the incoming gradient to
// its parents.

namespace dfstrans {

namespace detail {

inline void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

inline void same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

inline void check_finite(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto d = t.grad(id).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto av = t.value(ia).data();
    auto bv = t.value(ib).data();
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, c](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto d = t.grad(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
  });
}

/// x[..., n] + b[n]
inline Var add_bias(const Var& x, const Var& b) {
  detail::same_tape(x, b);
  const std::size_t n = detail::last_dim(x.value());
  if (b.value().rank() != 1 || b.value().dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  Tensor out = x.value();
  auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % n];
  const std::size_t ix = x.id(), ib = b.id();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib, n](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    if (t.requires_grad(ix)) {
      auto d = t.grad(ix).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i];
    }
  });
}

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// a[..., k] x b[k, n] -> [..., n]. Leading axes of `a` are treated as rows.
inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 1 || bv.rank() != 2 || av.shape().back() != bv.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) +
                         " x " + shape_str(bv.shape()));
  }
  const std::size_t k = bv.dim(0), n = bv.dim(1), m = av.size() / k;
  Shape shape = av.shape();
  shape.back() = n;
  Tensor out(shape);
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data().data();
    if (t.requires_grad(ia)) {
      detail::gemm_nt(g, t.value(ib).data().data(), t.grad(ia).data().data(), m, n, k);
    }
    if (t.requires_grad(ib)) {
      detail::gemm_tn(t.value(ia).data().data(), g, t.grad(ib).data().data(), m, k, n);
    }
  });
}

inline Var linear(const Var& x, const Var& w, const Var& b) { return add_bias(matmul(x, w), b); }

/// Batched a[G,n,k] x b[G,k,m] -> [G,n,m].
inline Var bmm(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1)) {
    throw DimensionError("bmm: incompatible " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  const std::size_t G = av.dim(0), n = av.dim(1), k = av.dim(2), m = bv.dim(2);
  Tensor out(Shape{G, n, m});
  for (std::size_t g = 0; g < G; ++g) {
    detail::gemm_nn(av.data().data() + g * n * k, bv.data().data() + g * k * m,
                    out.data().data() + g * n * m, n, k, m);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const double* gr = t.grad(self).data().data();
    for (std::size_t g = 0; g < G; ++g) {
      if (t.requires_grad(ia)) {
        detail::gemm_nt(gr + g * n * m, t.value(ib).data().data() + g * k * m,
                        t.grad(ia).data().data() + g * n * k, n, m, k);
      }
      if (t.requires_grad(ib)) {
        detail::gemm_tn(t.value(ia).data().data() + g * n * k, gr + g * n * m,
                        t.grad(ib).data().data() + g * k * m, n, k, m);
      }
    }
  });
}

/// Batched a[G,n,k] x b[G,m,k]^T -> [G,n,m].
inline Var bmm_nt(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2)) {
    throw DimensionError("bmm_nt: incompatible " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()) + "^T");
  }
  const std::size_t G = av.dim(0), n = av.dim(1), k = av.dim(2), m = bv.dim(1);
  Tensor out(Shape{G, n, m});
  for (std::size_t g = 0; g < G; ++g) {
    detail::gemm_nt(av.data().data() + g * n * k, bv.data().data() + g * m * k,
                    out.data().data() + g * n * m, n, k, m);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const double* gr = t.grad(self).data().data();
    for (std::size_t g = 0; g < G; ++g) {
      // dA = G B, dB = G^T A
      if (t.requires_grad(ia)) {
        detail::gemm_nn(gr + g * n * m, t.value(ib).data().data() + g * m * k,
                        t.grad(ia).data().data() + g * n * k, n, m, k);
      }
      if (t.requires_grad(ib)) {
        detail::gemm_tn(gr + g * n * m, t.value(ia).data().data() + g * n * k,
                        t.grad(ib).data().data() + g * m * k, n, m, k);
      }
    }
  });
}

/// Row softmax of scale * x over the last axis, with per-row max subtraction.
inline Tensor softmax_rows_value(const Tensor& x, double scale) {
  if (x.rank() < 1) throw DimensionError("softmax_rows: needs at least one axis");
  if (!(scale > 0.0)) throw ContractError("softmax_rows: scale must be positive");
  detail::check_finite("softmax_rows", x);
  const std::size_t n = x.shape().back();
  Tensor y(x.shape());
  auto xv = x.data();
  auto yv = y.data();
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    const double* xr = xv.data() + r * n;
    double* yr = yv.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, scale * xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(scale * xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  return y;
}

inline Var softmax_rows(const Var& x, double scale = 1.0) {
  Tensor y = softmax_rows_value(x.value(), scale);
  const std::size_t n = x.value().shape().back();
  const std::size_t ix = x.id();
  return x.tape().record(std::move(y), {ix}, [ix, n, scale](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto y = t.value(self).data();
    auto d = t.grad(ix).data();
    for (std::size_t r = 0; r < g.size() / n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        d[r * n + j] += scale * y[r * n + j] * (g[r * n + j] - dot);
      }
    }
  });
}

namespace detail {

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df_from_xy) {
  Tensor out = x.value();
  for (double& v : out.data()) v = f(v);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, df_from_xy](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto xv = t.value(ix).data();
    auto yv = t.value(self).data();
    auto d = t.grad(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * df_from_xy(xv[i], yv[i]);
  });
}

}  // namespace detail

inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, [](double v) { return sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
}

/// Sum of all entries, as a rank-0 tensor.
inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor::scalar(s), {ix}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& d : t.grad(ix).data()) d += g;
  });
}

/// Mean over one axis; the axis is removed from the shape.
inline Var mean(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) throw DimensionError("mean: axis out of range for " + shape_str(xv.shape()));
  const Shape& s = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(os);
  auto in = xv.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t b = 0; b < inner; ++b) o[a * inner + b] += in[(a * n + k) * inner + b] / n;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto d = t.grad(ix).data();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t b = 0; b < inner; ++b) d[(a * n + k) * inner + b] += g[a * inner + b] / n;
  });
}

/// Normalizes each row over the last axis, then applies gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const Tensor& xv = x.value();
  const std::size_t n = detail::last_dim(xv);
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias do not match feature axis of " +
                         shape_str(xv.shape()));
  }
  const std::size_t rows = xv.size() / n;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  auto in = xv.data();
  auto o = out.data();
  auto gv = gain.value().data();
  auto bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[r * n + j];
    mu /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[r * n + j] - mu) * (in[r * n + j] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (in[r * n + j] - mu) * is;
      (*xhat)[r * n + j] = h;
      o[r * n + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(std::move(out), {ix, ig, ib}, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto gv = t.value(ig).data();
    const auto& h = *xhat;
    if (t.requires_grad(ig)) {
      auto d = t.grad(ig).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i] * h[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i];
    }
    if (t.requires_grad(ix)) {
      auto d = t.grad(ix).data();
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[r * n + j] * gv[j];
          s1 += dh;
          s2 += dh * h[r * n + j];
        }
        const double is = (*inv_std)[r];
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[r * n + j] * gv[j];
          d[r * n + j] += is * (dh - s1 / n - h[r * n + j] * s2 / n);
        }
      }
    }
  });
}

/// Inverted dropout: a Bernoulli keep-mask scaled by 1/(1-p) in train mode,
/// identity otherwise. The mask is stored on the tape for the backward pass.
inline Var dropout(const Var& x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!train || p == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  const double keep = 1.0 / (1.0 - p);
  for (double& m : *mask) m = rng.bernoulli(p) ? 0.0 : keep;
  Tensor out = x.value();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= (*mask)[i];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, mask](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto d = t.grad(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*mask)[i];
  });
}

enum class Padding { Zeros, Replicate };

/// Same-padded 1D convolution: x[N,C,L] * w[F,C,K] + b[F] -> [N,F,L], with
/// (K-1)/2 padded samples on the left. Replicate padding repeats the edge
/// samples instead of inserting zeros.
inline Var conv1d(const Var& x, const Var& w, const Var& b, Padding padding = Padding::Zeros) {
  detail::same_tape(x, w);
  detail::same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 3 || xv.dim(1) != wv.dim(1) || b.value().size() != wv.dim(0)) {
    throw DimensionError("conv1d: input " + shape_str(xv.shape()) + " incompatible with kernel " +
                         shape_str(wv.shape()));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), L = xv.dim(2), F = wv.dim(0), K = wv.dim(2);
  const std::size_t pad = (K - 1) / 2, P = L + K - 1;
  // Padded copy of every input row: [N, C, P].
  auto padded = std::make_shared<std::vector<double>>(N * C * P, 0.0);
  {
    const double* X = xv.data().data();
    for (std::size_t r = 0; r < N * C; ++r) {
      const double* xr = X + r * L;
      double* pr = padded->data() + r * P;
      std::copy(xr, xr + L, pr + pad);
      if (padding == Padding::Replicate && L > 0) {
        std::fill(pr, pr + pad, xr[0]);
        std::fill(pr + pad + L, pr + P, xr[L - 1]);
      }
    }
  }
  Tensor out(Shape{N, F, L});
  const double* W = wv.data().data();
  const double* B = b.value().data().data();
  double* Y = out.data().data();
  for (std::size_t nn = 0; nn < N; ++nn)
    for (std::size_t f = 0; f < F; ++f) {
      double* yr = Y + (nn * F + f) * L;
      for (std::size_t l = 0; l < L; ++l) yr[l] = B[f];
      for (std::size_t c = 0; c < C; ++c) {
        const double* pr = padded->data() + (nn * C + c) * P;
        for (std::size_t j = 0; j < K; ++j) {
          const double wj = W[(f * C + c) * K + j];
          for (std::size_t l = 0; l < L; ++l) yr[l] += wj * pr[l + j];
        }
      }
    }
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(out), {ix, iw, ib}, [=](Tape& t, std::size_t self) {
    const double* G = t.grad(self).data().data();
    const double* W = t.value(iw).data().data();
    const bool gx = t.requires_grad(ix), gw = t.requires_grad(iw), gb = t.requires_grad(ib);
    double* DX = gx ? t.grad(ix).data().data() : nullptr;
    double* DW = gw ? t.grad(iw).data().data() : nullptr;
    double* DB = gb ? t.grad(ib).data().data() : nullptr;
    std::vector<double> dp(gx ? P : 0);
    for (std::size_t nn = 0; nn < N; ++nn) {
      for (std::size_t c = 0; c < C; ++c) {
        const double* pr = padded->data() + (nn * C + c) * P;
        if (gx) std::fill(dp.begin(), dp.end(), 0.0);
        for (std::size_t f = 0; f < F; ++f) {
          const double* gr = G + (nn * F + f) * L;
          for (std::size_t j = 0; j < K; ++j) {
            const std::size_t wi = (f * C + c) * K + j;
            if (DW) {
              double s = 0.0;
              for (std::size_t l = 0; l < L; ++l) s += gr[l] * pr[l + j];
              DW[wi] += s;
            }
            if (gx) {
              const double wj = W[wi];
              for (std::size_t l = 0; l < L; ++l) dp[l + j] += wj * gr[l];
            }
          }
        }
        if (gx) {
          double* dxr = DX + (nn * C + c) * L;
          for (std::size_t l = 0; l < L; ++l) dxr[l] += dp[l + pad];
          if (padding == Padding::Replicate && L > 0) {
            for (std::size_t q = 0; q < pad; ++q) dxr[0] += dp[q];
            for (std::size_t q = pad + L; q < P; ++q) dxr[L - 1] += dp[q];
          }
        }
      }
      if (DB) {
        for (std::size_t f = 0; f < F; ++f) {
          const double* gr = G + (nn * F + f) * L;
          for (std::size_t l = 0; l < L; ++l) DB[f] += gr[l];
        }
      }
    }
  });
}

/// Max pooling along the last axis of x[N,C,L].
inline Var max_pool1d(const Var& x, std::size_t size, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("max_pool1d: expects [N,C,L], got " + shape_str(xv.shape()));
  if (size == 0 || stride == 0 || xv.dim(2) < size) {
    throw ConfigError("max_pool1d: window " + std::to_string(size) + " does not fit length " +
                      std::to_string(xv.dim(2)));
  }
  const std::size_t rows = xv.dim(0) * xv.dim(1), L = xv.dim(2);
  const std::size_t Lo = (L - size) / stride + 1;
  Tensor out(Shape{xv.dim(0), xv.dim(1), Lo});
  auto arg = std::make_shared<std::vector<std::size_t>>(rows * Lo);
  auto in = xv.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t p = 0; p < Lo; ++p) {
      std::size_t best = r * L + p * stride;
      for (std::size_t q = 1; q < size; ++q) {
        const std::size_t idx = r * L + p * stride + q;
        if (in[idx] > in[best]) best = idx;
      }
      (*arg)[r * Lo + p] = best;
      o[r * Lo + p] = in[best];
    }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, arg](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto d = t.grad(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) d[(*arg)[i]] += g[i];
  });
}

/// Running statistics owned by a batch-norm layer.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

/// Batch normalization of x[N,C,L] per channel over the (N, L) axes.
/// Train mode normalizes with batch statistics and updates `stats` with the
/// given momentum; eval mode uses the stored statistics.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                      bool train, double momentum = 0.1, double eps = 1e-5) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("batch_norm: expects [N,C,L], got " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  if (gamma.value().size() != C || beta.value().size() != C || stats.running_mean.size() != C ||
      stats.running_var.size() != C) {
    throw DimensionError("batch_norm: channel count mismatch for " + shape_str(xv.shape()));
  }
  const std::size_t count = N * L;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(C);
  auto in = xv.data();
  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      mu = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l) mu += in[(n * C + c) * L + l];
      mu /= count;
      var = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l) {
          const double dv = in[(n * C + c) * L + l] - mu;
          var += dv * dv;
        }
      var /= count;
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * mu;
      stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] + momentum * unbiased;
    } else {
      mu = stats.running_mean[c];
      var = stats.running_var[c];
    }
    (*inv_std)[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t i = (n * C + c) * L + l;
        (*xhat)[i] = (in[i] - mu) * (*inv_std)[c];
      }
  }
  Tensor out(xv.shape());
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const std::size_t c = (i / L) % C;
    o[i] = gv[c] * (*xhat)[i] + bv[c];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(std::move(out), {ix, ig, ib}, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto gv = t.value(ig).data();
    const auto& h = *xhat;
    std::vector<double> sg(C, 0.0), sgh(C, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t c = (i / L) % C;
      sg[c] += g[i];
      sgh[c] += g[i] * h[i];
    }
    if (t.requires_grad(ig)) {
      auto d = t.grad(ig).data();
      for (std::size_t c = 0; c < C; ++c) d[c] += sgh[c];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t c = 0; c < C; ++c) d[c] += sg[c];
    }
    if (t.requires_grad(ix)) {
      auto d = t.grad(ix).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t c = (i / L) % C;
        const double is = (*inv_std)[c];
        if (train) {
          d[i] += gv[c] * is * (g[i] - sg[c] / count - h[i] * sgh[c] / count);
        } else {
          d[i] += gv[c] * is * g[i];
        }
      }
    }
  });
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto d = t.grad(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

namespace detail {

// For each output flat index, the corresponding input flat index.
inline std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
  const std::size_t n = shape_size(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    map[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace detail

inline Tensor permute_value(const Tensor& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) throw DimensionError("permute: rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw ContractError("permute: invalid axis permutation");
    seen[p] = true;
  }
  Shape os(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) os[i] = x.dim(perm[i]);
  const auto map = detail::permute_map(x.shape(), perm);
  Tensor out(os);
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = x[map[o]];
  return out;
}

/// Axis permutation: output axis i is input axis perm[i].
inline Var permute(const Var& x, const std::vector<std::size_t>& perm) {
  Tensor out = permute_value(x.value(), perm);
  auto map = std::make_shared<std::vector<std::size_t>>(detail::permute_map(x.shape(), perm));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, map](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    auto d = t.grad(ix).data();
    for (std::size_t o = 0; o < g.size(); ++o) d[(*map)[o]] += g[o];
  });
}

/// Stacks equally shaped tensors along a new axis.
inline Var stack(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("stack: no inputs");
  const Shape& s = xs.front().shape();
  if (axis > s.size()) throw DimensionError("stack: axis out of range");
  std::vector<std::size_t> ids;
  for (const Var& v : xs) {
    detail::same_tape(xs.front(), v);
    detail::same_shape("stack", xs.front().value(), v.value());
    ids.push_back(v.id());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = xs.size();
  Shape os = s;
  os.insert(os.begin() + static_cast<std::ptrdiff_t>(axis), n);
  Tensor out(os);
  for (std::size_t k = 0; k < n; ++k) {
    auto in = xs[k].value().data();
    for (std::size_t a = 0; a < outer; ++a)
      std::copy_n(in.data() + a * inner, inner, out.data().data() + (a * n + k) * inner);
  }
  return xs.front().tape().record(std::move(out), ids, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self).data();
    for (std::size_t k = 0; k < n; ++k) {
      if (!t.requires_grad(ids[k])) continue;
      auto d = t.grad(ids[k]).data();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t b = 0; b < inner; ++b) d[a * inner + b] += g[(a * n + k) * inner + b];
    }
  });
}

/// Summed binary cross-entropy on pre-sigmoid logits; probabilities are
/// clamped to [eps, 1 - eps].
inline Var bce_with_logits(const Var& logits, const std::vector<double>& labels, double eps = 1e-12) {
  const Tensor& z = logits.value();
  if (z.size() != labels.size()) {
    throw DimensionError("bce: " + std::to_string(z.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  double loss = 0.0;
  auto dz = std::make_shared<std::vector<double>>(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) throw ContractError("bce: label must be 0 or 1");
    const double p = sigmoid(z[i]);
    const double pc = std::clamp(p, eps, 1.0 - eps);
    loss -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    (*dz)[i] = (p == pc) ? p - y : 0.0;
  }
  const std::size_t iz = logits.id();
  return logits.tape().record(Tensor::scalar(loss), {iz}, [iz, dz](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto d = t.grad(iz).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * (*dz)[i];
  });
}

}  // namespace dfstrans

#pragma once

// Independent reference computations shared by the unit and acceptance tests.

#include <cmath>
#include <vector>

#include "dfstrans/ops.hpp"

namespace dfstrans::testing {

// Weighted sum with fixed random weights so every output coordinate matters.
inline Var probe(Tape& tape, const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(y.shape());
  for (double& v : w.data()) v = rng.uniform(-1, 1);
  return sum(mul(y, tape.constant(w)));
}

// p(k | q) = exp(s_qk) / sum_k' exp(s_qk') with s = (x_q W_Q).(x_k W_K) / sqrt(M).
inline std::vector<std::vector<double>> oracle_weights(const std::vector<std::vector<double>>& rows, const Tensor& wq,
                                                       const Tensor& wk) {
  const std::size_t n = rows.size(), m = wq.dim(0);
  auto project = [&](const std::vector<double>& x, const Tensor& w) {
    std::vector<double> out(m, 0.0);
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t i = 0; i < m; ++i) out[c] += x[i] * w(i, c);
    return out;
  };
  std::vector<std::vector<double>> p(n, std::vector<double>(n));
  for (std::size_t q = 0; q < n; ++q) {
    const auto qv = project(rows[q], wq);
    long double z = 0;
    std::vector<long double> e(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto kv = project(rows[k], wk);
      long double s = 0;
      for (std::size_t c = 0; c < m; ++c) s += qv[c] * kv[c];
      e[k] = std::exp(s / std::sqrt(static_cast<long double>(m)));
      z += e[k];
    }
    for (std::size_t k = 0; k < n; ++k) p[q][k] = static_cast<double>(e[k] / z);
  }
  return p;
}

}  // namespace dfstrans::testing

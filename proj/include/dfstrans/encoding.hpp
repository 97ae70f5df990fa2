#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dfstrans/errors.hpp"
#include "dfstrans/tensor.hpp"

// Positional encodings and the real-DFT toolkit used to analyze them.
//
// Coefficient layout used throughout (length d, K = d/2 - 1):
//   index 0            a_0  basis 1/sqrt(d)
//   index 2k-1, 2k     a_k, b_k  bases sqrt(2/d) cos(w_k t), sqrt(2/d) sin(w_k t), k = 1..K
//   index d-1          b_0  basis cos(pi t)/sqrt(d)
// with w_k = 2 pi k / d. The faithful encoding of position s is exactly the
// coefficient vector of the one-hot function at s in this layout.

namespace dfstrans {

enum class EncodingKind { Vanilla, Faithful };

inline const char* to_string(EncodingKind k) { return k == EncodingKind::Vanilla ? "vanilla" : "faithful"; }

inline EncodingKind parse_encoding_kind(const std::string& s) {
  if (s == "vanilla") return EncodingKind::Vanilla;
  if (s == "faithful") return EncodingKind::Faithful;
  throw ConfigError("unknown encoding kind '" + s + "' (expected vanilla|faithful)");
}

struct EncodingSpec {
  std::size_t d = 256;
  EncodingKind kind = EncodingKind::Faithful;
  double rho = 10000.0;

  void validate() const {
    if (d == 0 || d % 2 != 0) throw ConfigError("encoding dimension d must be a positive even integer");
    if (kind == EncodingKind::Faithful && d < 4) throw ConfigError("faithful encoding needs d >= 4");
    if (kind == EncodingKind::Vanilla && !(rho > 1.0)) throw ConfigError("vanilla base rho must exceed 1");
  }

  /// Sequence length check: lattice must be longer than the sequence.
  void validate_for_length(std::size_t n_w) const {
    validate();
    if (d <= n_w) {
      throw ConfigError("encoding dimension " + std::to_string(d) + " must exceed sequence length " +
                        std::to_string(n_w));
    }
  }
};

/// Weights over the Fourier frequencies w_k = 2 pi k / d, k = 0..d/2.
struct FrequencyDistribution {
  std::vector<double> weights;
  double sigma = 0.0;

  std::size_t d() const { return 2 * (weights.size() - 1); }
};

inline double default_kde_sigma(std::size_t d, double mult = 4.0) {
  return mult * 2.0 * std::numbers::pi / static_cast<double>(d);
}

inline std::vector<double> encode_vanilla(std::size_t tau, const EncodingSpec& spec) {
  spec.validate();
  std::vector<double> e(spec.d);
  const double t = static_cast<double>(tau);
  for (std::size_t k = 0; k < spec.d; k += 2) {
    const double w = std::pow(spec.rho, -static_cast<double>(k) / static_cast<double>(spec.d));
    e[k] = std::sin(w * t);
    e[k + 1] = std::cos(w * t);
  }
  return e;
}

inline std::vector<double> encode_faithful(std::size_t tau, const EncodingSpec& spec) {
  spec.validate();
  const std::size_t d = spec.d;
  if (tau >= d) {
    throw RangeError("faithful encoding position " + std::to_string(tau) + " outside lattice [0, " +
                     std::to_string(d) + ")");
  }
  const double norm = std::sqrt(2.0 / static_cast<double>(d));
  const double t = static_cast<double>(tau);
  std::vector<double> e(d);
  e[0] = norm / std::numbers::sqrt2;
  for (std::size_t k = 1; k + 1 < d / 2 + 1; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(d);
    e[2 * k - 1] = norm * std::cos(w * t);
    e[2 * k] = norm * std::sin(w * t);
  }
  // cos(pi t) is exactly +-1 on the lattice.
  e[d - 1] = norm * (tau % 2 == 0 ? 1.0 : -1.0) / std::numbers::sqrt2;
  return e;
}

inline std::vector<double> encode(std::size_t tau, const EncodingSpec& spec) {
  return spec.kind == EncodingKind::Faithful ? encode_faithful(tau, spec) : encode_vanilla(tau, spec);
}

/// [n_positions, d] table of encodings for positions 0..n-1.
inline Tensor encoding_table(std::size_t n_positions, const EncodingSpec& spec) {
  Tensor table(Shape{n_positions, spec.d});
  for (std::size_t tau = 0; tau < n_positions; ++tau) {
    const auto e = encode(tau, spec);
    std::copy(e.begin(), e.end(), table.data().begin() + static_cast<std::ptrdiff_t>(tau * spec.d));
  }
  return table;
}

struct GramReport {
  std::size_t d = 0;
  double max_abs_deviation = 0.0;  // max |G - I|
  double max_off_diagonal = 0.0;   // max |G_st|, s != t
  double max_diagonal_error = 0.0;  // max |G_ss - 1|
  Tensor gram;
};

/// Gram matrix of the encodings of all lattice positions [0, d) against identity.
inline GramReport verify_faithfulness(const EncodingSpec& spec) {
  spec.validate();
  const std::size_t d = spec.d;
  const Tensor E = encoding_table(d, spec);
  GramReport r;
  r.d = d;
  r.gram = Tensor(Shape{d, d});
  for (std::size_t s = 0; s < d; ++s)
    for (std::size_t t = s; t < d; ++t) {
      double g = 0.0;
      for (std::size_t j = 0; j < d; ++j) g += E(s, j) * E(t, j);
      r.gram(s, t) = r.gram(t, s) = g;
      const double dev = std::abs(g - (s == t ? 1.0 : 0.0));
      r.max_abs_deviation = std::max(r.max_abs_deviation, dev);
      if (s == t) {
        r.max_diagonal_error = std::max(r.max_diagonal_error, dev);
      } else {
        r.max_off_diagonal = std::max(r.max_off_diagonal, dev);
      }
    }
  return r;
}

/// Gaussian-KDE weights of the vanilla frequency ladder rho^(-l/d),
/// l in {0, 2, ..., d-2}, evaluated at w_k = 2 pi k / d for k = 0..d/2.
inline FrequencyDistribution frequency_distribution(const EncodingSpec& spec, double sigma) {
  spec.validate();
  if (!(sigma > 0.0)) throw ConfigError("KDE bandwidth must be positive");
  const std::size_t d = spec.d;
  FrequencyDistribution dist;
  dist.sigma = sigma;
  dist.weights.assign(d / 2 + 1, 0.0);
  for (std::size_t k = 0; k <= d / 2; ++k) {
    const double omega = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(d);
    double g = 0.0;
    for (std::size_t l = 0; l < d; l += 2) {
      const double w = std::pow(spec.rho, -static_cast<double>(l) / static_cast<double>(d));
      g += std::exp(-(omega - w) * (omega - w) / (2.0 * sigma * sigma));
    }
    dist.weights[k] = g;
  }
  double total = 0.0;
  for (double g : dist.weights) total += g;
  for (double& g : dist.weights) g /= total;
  return dist;
}

/// Frequency content of the faithful encoding: 1/d at the two terminal
/// frequencies (0 and pi), 2/d at every interior frequency.
inline FrequencyDistribution faithful_distribution(const EncodingSpec& spec) {
  if (spec.d == 0 || spec.d % 2 != 0) throw ConfigError("encoding dimension d must be a positive even integer");
  const std::size_t d = spec.d;
  FrequencyDistribution dist;
  dist.weights.assign(d / 2 + 1, 2.0 / static_cast<double>(d));
  dist.weights.front() = 1.0 / static_cast<double>(d);
  dist.weights.back() = 1.0 / static_cast<double>(d);
  return dist;
}

/// Frequency index k (0..d/2) of coefficient slot j in the layout above.
inline std::size_t coefficient_frequency(std::size_t j, std::size_t d) {
  if (j == 0) return 0;
  if (j == d - 1) return d / 2;
  return (j + 1) / 2;
}

inline double basis_value(std::size_t j, std::size_t t, std::size_t d) {
  const double dd = static_cast<double>(d);
  if (j == 0) return 1.0 / std::sqrt(dd);
  if (j == d - 1) return (t % 2 == 0 ? 1.0 : -1.0) / std::sqrt(dd);
  const std::size_t k = (j + 1) / 2;
  // Reduce k*t mod d before scaling so large products keep full precision.
  const double phase = 2.0 * std::numbers::pi * static_cast<double>((k * t) % d) / dd;
  return std::sqrt(2.0 / dd) * (j % 2 == 1 ? std::cos(phase) : std::sin(phase));
}

namespace detail {

inline void check_dft_length(std::size_t d) {
  if (d < 2 || d % 2 != 0) {
    throw DimensionError("real DFT needs an even length >= 2, got " + std::to_string(d));
  }
}

}  // namespace detail

/// Naive O(d^2) forward real DFT onto the orthonormal basis.
inline std::vector<double> real_dft(const std::vector<double>& f) {
  const std::size_t d = f.size();
  detail::check_dft_length(d);
  std::vector<double> c(d, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t t = 0; t < d; ++t) c[j] += f[t] * basis_value(j, t, d);
  return c;
}

inline std::vector<double> inverse_real_dft(const std::vector<double>& c) {
  const std::size_t d = c.size();
  detail::check_dft_length(d);
  std::vector<double> f(d, 0.0);
  for (std::size_t t = 0; t < d; ++t)
    for (std::size_t j = 0; j < d; ++j) f[t] += c[j] * basis_value(j, t, d);
  return f;
}

inline std::vector<double> dft_roundtrip(const std::vector<double>& f) {
  return inverse_real_dft(real_dft(f));
}

struct Reconstruction {
  std::vector<double> signal;
  double input_coefficient_norm = 0.0;
  double output_coefficient_norm = 0.0;
};

/// Reweights the DFT coefficients of `f` by a frequency distribution and
/// transforms back.
///
/// Each coefficient is multiplied by g_k / g_k^flat, where g^flat is the
/// frequency content of the faithful encoding (1/d terminal, 2/d interior),
/// so that the weights describe mass per frequency rather than per basis
/// function. a_0 takes g_0 and b_0 takes the last weight g_{d/2}. The
/// modified coefficients are rescaled to the original l2 norm.
inline Reconstruction reconstruct_reference(const std::vector<double>& f, const FrequencyDistribution& g) {
  const std::size_t d = f.size();
  if (g.weights.size() != d / 2 + 1 || d % 2 != 0) {
    throw DimensionError("reconstruct_reference: signal of length " + std::to_string(d) +
                         " needs " + std::to_string(d / 2 + 1) + " frequency weights, got " +
                         std::to_string(g.weights.size()));
  }
  const FrequencyDistribution flat = faithful_distribution(EncodingSpec{d, EncodingKind::Faithful});
  std::vector<double> c = real_dft(f);
  double in_norm = 0.0;
  for (double v : c) in_norm += v * v;
  in_norm = std::sqrt(in_norm);
  double out_norm = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const std::size_t k = coefficient_frequency(j, d);
    c[j] *= g.weights[k] / flat.weights[k];
    out_norm += c[j] * c[j];
  }
  out_norm = std::sqrt(out_norm);
  Reconstruction r;
  r.input_coefficient_norm = in_norm;
  if (out_norm > 0.0) {
    const double rescale = in_norm / out_norm;
    for (double& v : c) v *= rescale;
  }
  double final_norm = 0.0;
  for (double v : c) final_norm += v * v;
  r.output_coefficient_norm = std::sqrt(final_norm);
  r.signal = inverse_real_dft(c);
  return r;
}

/// Number of vanilla frequencies rho^(-l/d) that fall below the first
/// nonzero Fourier frequency 2 pi / d, rounded to the nearest integer.
inline long lowpass_bin_count(std::size_t d, double rho = 10000.0) {
  if (d < 2) throw RangeError("lowpass_bin_count needs d >= 2");
  if (!(rho > 1.0)) throw RangeError("lowpass_bin_count needs rho > 1");
  const double dd = static_cast<double>(d);
  const double l = dd * std::log(dd / (2.0 * std::numbers::pi)) / std::log(rho);
  return std::max(0L, std::lround(l));
}

}  // namespace dfstrans

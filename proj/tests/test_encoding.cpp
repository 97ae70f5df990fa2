#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfstrans/encoding.hpp"
#include "dfstrans/random.hpp"

namespace dfstrans {
namespace {

EncodingSpec vanilla(std::size_t d) { return {d, EncodingKind::Vanilla, 10000.0}; }
EncodingSpec faithful(std::size_t d) { return {d, EncodingKind::Faithful, 10000.0}; }

std::vector<double> delta(std::size_t d, std::size_t s) {
  std::vector<double> f(d, 0.0);
  f[s] = 1.0;
  return f;
}

TEST(VanillaEncoding, ZeroPositionAlternates) {
  const auto e = encode_vanilla(0, vanilla(8));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(e[i], i % 2 == 0 ? 0.0 : 1.0);
}

TEST(VanillaEncoding, ScalarEvaluation) {
  const auto e = encode_vanilla(1, vanilla(4));
  EXPECT_DOUBLE_EQ(e[0], std::sin(1.0));
  EXPECT_DOUBLE_EQ(e[1], std::cos(1.0));
  EXPECT_DOUBLE_EQ(e[2], std::sin(0.01));
  EXPECT_DOUBLE_EQ(e[3], std::cos(0.01));
}

TEST(VanillaEncoding, EntriesBounded) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 * (1 + rng.index(64));
    for (double v : encode_vanilla(rng.index(10000), vanilla(d))) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(VanillaEncoding, OddDimensionIsConfigError) {
  EXPECT_THROW(encode_vanilla(0, vanilla(7)), ConfigError);
}

TEST(FaithfulEncoding, DirectValuesAtD4) {
  const auto e0 = encode_faithful(0, faithful(4));
  const auto e1 = encode_faithful(1, faithful(4));
  const double r = std::sqrt(0.5);
  const std::vector<double> x0 = {0.5, r, 0.0, 0.5};
  const std::vector<double> x1 = {0.5, 0.0, r, -0.5};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(e0[i], x0[i], 1e-15);
    EXPECT_NEAR(e1[i], x1[i], 1e-15);
  }
  EXPECT_NEAR(std::inner_product(e0.begin(), e0.end(), e0.begin(), 0.0), 1.0, 1e-15);
  EXPECT_NEAR(std::inner_product(e0.begin(), e0.end(), e1.begin(), 0.0), 0.0, 1e-15);
}

TEST(FaithfulEncoding, UnitNormOnLattice) {
  for (std::size_t d : {4, 10, 64, 240, 256}) {
    for (std::size_t tau = 0; tau < d; ++tau) {
      const auto e = encode_faithful(tau, faithful(d));
      EXPECT_NEAR(std::inner_product(e.begin(), e.end(), e.begin(), 0.0), 1.0, 1e-12);
    }
  }
}

TEST(FaithfulEncoding, PositionOutsideLatticeIsRangeError) {
  EXPECT_THROW(encode_faithful(8, faithful(8)), RangeError);
  EXPECT_THROW(encode_faithful(0, faithful(2)), ConfigError);
}

TEST(Faithfulness, GramIsIdentity) {
  EXPECT_LT(verify_faithfulness(faithful(4)).max_abs_deviation, 1e-12);
  EXPECT_LT(verify_faithfulness(faithful(256)).max_abs_deviation, 1e-9);
}

TEST(Faithfulness, VanillaIsNotOrthonormal) {
  EXPECT_GT(verify_faithfulness(vanilla(256)).max_off_diagonal, 1e-3);
}

TEST(Faithfulness, LengthCheckRequiresLatticeLongerThanSequence) {
  EXPECT_THROW(faithful(8).validate_for_length(8), ConfigError);
  EXPECT_NO_THROW(faithful(10).validate_for_length(8));
}

TEST(FrequencyDistribution, NormalizedAndNonNegative) {
  for (std::size_t d : {128, 256, 512}) {
    const auto g = frequency_distribution(vanilla(d), default_kde_sigma(d));
    EXPECT_EQ(g.weights.size(), d / 2 + 1);
    EXPECT_NEAR(std::accumulate(g.weights.begin(), g.weights.end(), 0.0), 1.0, 1e-12);
    for (double w : g.weights) EXPECT_GE(w, 0.0);
  }
}

TEST(FrequencyDistribution, SkewedTowardZero) {
  for (std::size_t d : {128, 256, 512}) {
    const auto g = frequency_distribution(vanilla(d), default_kde_sigma(d));
    const auto peak = std::max_element(g.weights.begin(), g.weights.end());
    EXPECT_LE(peak - g.weights.begin(), 1) << d;
    EXPECT_GE(g.weights[0], 0.95 * *peak) << d;
    const double low = std::accumulate(g.weights.begin(), g.weights.begin() + 5, 0.0);
    EXPECT_GT(low, 0.4) << d;
    EXPECT_LT(g.weights[d / 3], 1e-3 * g.weights[0]) << d;
  }
  const auto g = frequency_distribution(vanilla(256), default_kde_sigma(256));
  EXPECT_GT(std::accumulate(g.weights.begin(), g.weights.begin() + 5, 0.0), 0.5);
}

TEST(FrequencyDistribution, MatchesDoubleLoopOracle) {
  const std::size_t d = 64;
  const double sigma = default_kde_sigma(d);
  std::vector<double> oracle(d / 2 + 1, 0.0);
  for (std::size_t k = 0; k <= d / 2; ++k)
    for (std::size_t l = 0; l <= d - 2; l += 2) {
      const double omega = 2.0 * M_PI * k / d;
      const double w = std::pow(10000.0, -static_cast<double>(l) / d);
      oracle[k] += std::exp(-(omega - w) * (omega - w) / (2 * sigma * sigma));
    }
  const double total = std::accumulate(oracle.begin(), oracle.end(), 0.0);
  const auto g = frequency_distribution(vanilla(d), sigma);
  for (std::size_t k = 0; k <= d / 2; ++k) EXPECT_EQ(g.weights[k], oracle[k] / total);
}

TEST(FaithfulDistribution, FlatExceptTerminals) {
  const auto g = faithful_distribution(faithful(8));
  const std::vector<double> expect = {0.125, 0.25, 0.25, 0.25, 0.125};
  EXPECT_EQ(g.weights, expect);
  for (std::size_t d = 2; d <= 64; d += 2) {
    const auto w = faithful_distribution(faithful(d)).weights;
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-14);
    for (std::size_t k = 1; k + 1 < w.size(); ++k) EXPECT_EQ(w[k], w[1]);
  }
}

TEST(LowpassBinCount, PaperValues) {
  EXPECT_EQ(lowpass_bin_count(256, 10000.0), 103);
  EXPECT_EQ(lowpass_bin_count(512, 10000.0), 245);
}

TEST(LowpassBinCount, MonotoneInD) {
  long prev = 0;
  for (std::size_t d = 8; d <= 1024; d += 2) {
    const long l = lowpass_bin_count(d);
    EXPECT_GE(l, prev);
    prev = l;
  }
  EXPECT_THROW(lowpass_bin_count(1), RangeError);
}

TEST(DftRoundtrip, ZerosAndDelta) {
  const auto z = dft_roundtrip(std::vector<double>(16, 0.0));
  for (double v : z) EXPECT_EQ(v, 0.0);
  const auto r = dft_roundtrip(delta(8, 0));
  for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(r[t], t == 0 ? 1.0 : 0.0, 1e-12);
}

TEST(DftRoundtrip, RandomSignal) {
  Rng rng(3);
  std::vector<double> f(64);
  for (double& v : f) v = rng.normal();
  const auto r = dft_roundtrip(f);
  for (std::size_t t = 0; t < 64; ++t) EXPECT_NEAR(r[t], f[t], 1e-10);
  EXPECT_THROW(real_dft(std::vector<double>(7)), DimensionError);
}

TEST(DftRoundtrip, FaithfulEncodingIsCoefficientVectorOfDelta) {
  const std::size_t d = 32;
  for (std::size_t s = 0; s < d; ++s) {
    const auto c = real_dft(delta(d, s));
    const auto e = encode_faithful(s, faithful(d));
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(c[j], e[j], 1e-14);
  }
}

TEST(Reconstruction, FaithfulWeightsAreIdentityOnEveryDelta) {
  const std::size_t d = 256;
  const auto g = faithful_distribution(faithful(d));
  for (std::size_t s = 0; s < d; ++s) {
    const auto r = reconstruct_reference(delta(d, s), g);
    for (std::size_t t = 0; t < d; ++t) ASSERT_NEAR(r.signal[t], t == s ? 1.0 : 0.0, 1e-9);
  }
}

TEST(Reconstruction, FaithfulWeightsAreIdentityOnRandomSignal) {
  Rng rng(4);
  std::vector<double> f(64);
  for (double& v : f) v = rng.uniform(-1, 1);
  const auto r = reconstruct_reference(f, faithful_distribution(faithful(64)));
  for (std::size_t t = 0; t < 64; ++t) EXPECT_NEAR(r.signal[t], f[t], 1e-12);
}

// Frozen from the first run at d=256, sigma = 4*2pi/d: the reweighting is a
// circular convolution, so every delta gives the same hump shifted to s.
constexpr double kVanillaL2Error = 1.1685362497;
constexpr std::size_t kVanillaWidth = 39;
constexpr double kVanillaPeak = 0.3172615165;

TEST(Reconstruction, VanillaWeightsSpreadTheDelta) {
  const std::size_t d = 256;
  const auto g = frequency_distribution(vanilla(d), default_kde_sigma(d));
  for (std::size_t s : {5, 40, 75}) {
    const auto r = reconstruct_reference(delta(d, s), g);
    const auto peak = std::max_element(r.signal.begin(), r.signal.end());
    EXPECT_EQ(static_cast<std::size_t>(peak - r.signal.begin()), s);
    EXPECT_NEAR(*peak, kVanillaPeak, 1e-9);
    const auto wide = std::count_if(r.signal.begin(), r.signal.end(), [&](double v) { return v >= 0.1 * *peak; });
    EXPECT_EQ(static_cast<std::size_t>(wide), kVanillaWidth);
    EXPECT_GT(wide, 10);
    double l2 = 0.0;
    for (std::size_t t = 0; t < d; ++t) l2 += std::pow(r.signal[t] - (t == s ? 1.0 : 0.0), 2);
    EXPECT_NEAR(std::sqrt(l2), kVanillaL2Error, 1e-9);
    EXPECT_GT(std::sqrt(l2), 0.5);
    EXPECT_NEAR(r.output_coefficient_norm, r.input_coefficient_norm, 1e-10);
  }
}

TEST(Reconstruction, LengthMismatchIsDimensionError) {
  EXPECT_THROW(reconstruct_reference(std::vector<double>(10), faithful_distribution(faithful(8))),
               DimensionError);
}

}  // namespace
}  // namespace dfstrans

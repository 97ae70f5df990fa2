#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dfstrans/model.hpp"

namespace dfstrans {

/// Relevance scores derived from one episode's attention maps.
struct DiagnosticReport {
  std::string episode_id;
  double logit = 0.0;
  double probability = 0.0;
  Tensor a_sensor;   // [S, N_w]  a^(s)_tau: column sums of A^(s)
  Tensor A_global;   // [N_w, N_w] mean of A^(s) over sensors
  Tensor a_global;   // [N_w]
  Tensor b_segment;  // [N_w, S]  b^(tau)_s: column sums of B^(tau)
  Tensor B_global;   // [S, S]  segment average of B^(tau), weighted by a^G_tau
  Tensor b_global;   // [S]
};

namespace detail {

inline void require_stochastic(const Tensor& maps, const char* what, double tol = 1e-8) {
  const std::size_t n = maps.dim(2);
  for (std::size_t r = 0; r < maps.size() / n; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double v = maps[r * n + k];
      if (!std::isfinite(v) || v < -tol) throw ContractError(std::string(what) + " has a negative or non-finite entry");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ContractError(std::string(what) + " row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }
}

}  // namespace detail

inline DiagnosticReport diagnostic_scores(const AttentionMaps& maps) {
  const Tensor& A = maps.temporal;
  const Tensor& Bm = maps.spatial;
  if (A.rank() != 3 || Bm.rank() != 3 || A.dim(1) != A.dim(2) || Bm.dim(1) != Bm.dim(2) || Bm.dim(0) != A.dim(1) ||
      Bm.dim(1) != A.dim(0)) {
    throw DimensionError("attention maps must be [S,N,N] and [N,S,S], got " + shape_str(A.shape()) + " and " +
                         shape_str(Bm.shape()));
  }
  detail::require_stochastic(A, "temporal attention");
  detail::require_stochastic(Bm, "spatial attention");
  const std::size_t S = A.dim(0), N = A.dim(1);
  DiagnosticReport r;
  r.a_sensor = Tensor(Shape{S, N});
  r.A_global = Tensor(Shape{N, N});
  r.a_global = Tensor(Shape{N});
  r.b_segment = Tensor(Shape{N, S});
  r.B_global = Tensor(Shape{S, S});
  r.b_global = Tensor(Shape{S});
  const double inv_s = 1.0 / static_cast<double>(S), inv_n = 1.0 / static_cast<double>(N);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t q = 0; q < N; ++q)
      for (std::size_t t = 0; t < N; ++t) {
        r.a_sensor(s, t) += A(s, q, t);
        r.A_global(q, t) += inv_s * A(s, q, t);
      }
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t s = 0; s < S; ++s) r.a_global[t] += inv_s * r.a_sensor(s, t);
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t q = 0; q < S; ++q)
      for (std::size_t s = 0; s < S; ++s) {
        r.b_segment(t, s) += Bm(t, q, s);
        r.B_global(q, s) += inv_n * Bm(t, q, s) * r.a_global[t];
      }
  for (std::size_t q = 0; q < S; ++q)
    for (std::size_t s = 0; s < S; ++s) r.b_global[s] += r.B_global(q, s);
  return r;
}

/// Largest absolute violation of the report's mass-conservation identities.
inline double conservation_error(const DiagnosticReport& r) {
  const std::size_t S = r.a_sensor.dim(0), N = r.a_sensor.dim(1);
  double worst = 0.0;
  auto check = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  for (std::size_t s = 0; s < S; ++s) {
    double a = 0.0;
    for (std::size_t t = 0; t < N; ++t) a += r.a_sensor(s, t);
    check(a, static_cast<double>(N));
  }
  check(std::accumulate(r.a_global.data().begin(), r.a_global.data().end(), 0.0), static_cast<double>(N));
  for (std::size_t q = 0; q < N; ++q) {
    double a = 0.0;
    for (std::size_t t = 0; t < N; ++t) a += r.A_global(q, t);
    check(a, 1.0);
  }
  for (std::size_t t = 0; t < N; ++t) {
    double b = 0.0;
    for (std::size_t s = 0; s < S; ++s) b += r.b_segment(t, s);
    check(b, static_cast<double>(S));
  }
  for (std::size_t q = 0; q < S; ++q) {
    double b = 0.0;
    for (std::size_t s = 0; s < S; ++s) b += r.B_global(q, s);
    check(b, 1.0);
  }
  check(std::accumulate(r.b_global.data().begin(), r.b_global.data().end(), 0.0), static_cast<double>(S));
  return worst;
}

inline DiagnosticReport diagnose(Model& model, const EpisodeRecord& episode) {
  const Prediction p = model.predict(episode.values);
  DiagnosticReport r = diagnostic_scores(p.attention);
  r.episode_id = episode.id;
  r.logit = p.logit;
  r.probability = p.probability;
  return r;
}

/// Indices of the `k` largest values, ties broken by lower index.
inline std::vector<std::size_t> top_indices(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

struct LocalizationResult {
  std::optional<bool> temporal_hit;
  std::optional<bool> spatial_hit;
  bool hit() const { return temporal_hit.value_or(false) && spatial_hit.value_or(false); }
};

/// Compares relevance scores with the injected anomaly.
///
/// Point anomaly at segment tau*: the segment must rank in the top 3 of a^G,
/// and every injected sensor in the top max(ceil(S/4), n_injected) of
/// b^(tau*). Friction anomaly: temporal relevance must be spread out
/// (max a^G < 3 * mean a^G) and the injected sensors must rank in the same
/// top set of b^G. Normal episodes leave both flags empty.
inline LocalizationResult localization_check(const DiagnosticReport& r, const std::vector<Injection>& truth) {
  LocalizationResult out;
  if (truth.empty()) return out;
  const std::size_t S = r.b_global.size(), N = r.a_global.size();
  const Injection& inj = truth.front();
  const std::size_t top_s = std::max<std::size_t>((S + 3) / 4, inj.sensors.size());
  auto sensors_hit = [&](const std::vector<double>& b) {
    const auto top = top_indices(b, top_s);
    return std::all_of(inj.sensors.begin(), inj.sensors.end(),
                       [&](std::size_t s) { return std::find(top.begin(), top.end(), s) != top.end(); });
  };
  const std::vector<double> ag(r.a_global.data().begin(), r.a_global.data().end());
  if (inj.type == AnomalyType::Point) {
    if (inj.segments.empty()) return out;
    const std::size_t seg = inj.segments.front();
    const auto top = top_indices(ag, 3);
    out.temporal_hit = std::find(top.begin(), top.end(), seg) != top.end();
    std::vector<double> b(S);
    for (std::size_t s = 0; s < S; ++s) b[s] = r.b_segment(seg, s);
    out.spatial_hit = sensors_hit(b);
  } else {
    const double mean = std::accumulate(ag.begin(), ag.end(), 0.0) / static_cast<double>(N);
    out.temporal_hit = *std::max_element(ag.begin(), ag.end()) < 3.0 * mean;
    out.spatial_hit = sensors_hit(std::vector<double>(r.b_global.data().begin(), r.b_global.data().end()));
  }
  return out;
}

enum class TopKMode { Joint, PerMap };

/// Multiplicative masks zeroing the top `percent`% of attention entries.
/// Joint mode ranks the temporal and spatial weights together; per-map mode
/// zeroes the top share of each tensor separately. The entry count is
/// round(percent/100 * total); ties go to the lower flat index.
inline AttentionMasks top_k_masks(const Tensor& temporal, const Tensor& spatial, double percent, TopKMode mode) {
  if (!(percent >= 0.0 && percent <= 100.0)) {
    throw ContractError("AT-score percentage must lie in [0, 100], got " + std::to_string(percent));
  }
  AttentionMasks m{Tensor(temporal.shape(), 1.0), Tensor(spatial.shape(), 1.0)};
  auto zero_top = [&](std::vector<std::pair<const Tensor*, Tensor*>> maps) {
    std::vector<double> values;
    for (auto& [src, _] : maps) values.insert(values.end(), src->data().begin(), src->data().end());
    const auto count = static_cast<std::size_t>(std::lround(percent / 100.0 * static_cast<double>(values.size())));
    for (std::size_t i : top_indices(values, count)) {
      std::size_t off = i;
      for (auto& [src, dst] : maps) {
        if (off < src->size()) {
          (*dst)[off] = 0.0;
          break;
        }
        off -= src->size();
      }
    }
  };
  if (mode == TopKMode::Joint) {
    zero_top({{&temporal, &*m.temporal}, {&spatial, &*m.spatial}});
  } else {
    zero_top({{&temporal, &*m.temporal}});
    zero_top({{&spatial, &*m.spatial}});
  }
  return m;
}

struct AtScoreCurve {
  std::vector<double> k;
  std::vector<double> mean;                 // AT_k
  std::vector<double> median;
  std::vector<std::vector<double>> deltas;  // [k][episode], logit minus ablated logit
  std::vector<std::string> episode_class;   // "point", "friction" or "normal"
  std::vector<std::string> episode_id;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

/// Change in the pre-sigmoid output when the top-k% attention weights are
/// zeroed, re-running the full forward pass in eval mode.
inline AtScoreCurve at_score(Model& model, const Dataset& episodes, const std::vector<double>& k_percent,
                             TopKMode mode = TopKMode::Joint) {
  for (double k : k_percent) {
    if (!(k >= 0.0 && k <= 100.0)) throw ContractError("AT-score percentage must lie in [0, 100], got " + std::to_string(k));
  }
  AtScoreCurve c;
  c.k = k_percent;
  c.deltas.assign(k_percent.size(), {});
  Rng rng(0);
  for (const EpisodeRecord& e : episodes) {
    c.episode_id.push_back(e.id);
    c.episode_class.push_back(e.injections.empty() ? "normal" : to_string(e.injections.front().type));
    const Tensor seg = model.batch_segments({&e.values});
    Tape base_tape;
    const auto base = model.forward(base_tape, seg, false, rng);
    const double y = base.logits.value()[0];
    for (std::size_t i = 0; i < k_percent.size(); ++i) {
      if (k_percent[i] == 0.0) {
        c.deltas[i].push_back(0.0);
        continue;
      }
      const AttentionMasks masks = top_k_masks(base.temporal.value(), base.spatial.value(), k_percent[i], mode);
      Tape tape;
      const double yk = model.forward(tape, seg, false, rng, &masks).logits.value()[0];
      c.deltas[i].push_back(y - yk);
    }
  }
  for (const auto& d : c.deltas) {
    c.mean.push_back(d.empty() ? 0.0 : std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size()));
    c.median.push_back(median_of(d));
  }
  return c;
}

/// Restricts a curve to episodes of one class.
inline AtScoreCurve filter_class(const AtScoreCurve& c, const std::string& cls) {
  AtScoreCurve out;
  out.k = c.k;
  out.deltas.assign(c.k.size(), {});
  for (std::size_t e = 0; e < c.episode_class.size(); ++e) {
    if (c.episode_class[e] != cls) continue;
    out.episode_class.push_back(cls);
    out.episode_id.push_back(c.episode_id[e]);
    for (std::size_t i = 0; i < c.k.size(); ++i) out.deltas[i].push_back(c.deltas[i][e]);
  }
  for (const auto& d : out.deltas) {
    out.mean.push_back(d.empty() ? 0.0 : std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size()));
    out.median.push_back(median_of(d));
  }
  return out;
}

inline bool medians_nondecreasing(const AtScoreCurve& c) {
  for (std::size_t i = 1; i < c.median.size(); ++i)
    if (c.median[i] < c.median[i - 1]) return false;
  return true;
}

}  // namespace dfstrans

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dfstrans/errors.hpp"
#include "dfstrans/random.hpp"
#include "dfstrans/tensor.hpp"

namespace dfstrans {

enum class AnomalyType { Point, Friction };

inline const char* to_string(AnomalyType t) { return t == AnomalyType::Point ? "point" : "friction"; }

inline AnomalyType parse_anomaly_type(const std::string& s) {
  if (s == "point") return AnomalyType::Point;
  if (s == "friction") return AnomalyType::Friction;
  throw IngestionError("unknown anomaly type '" + s + "'");
}

/// Ground truth for one injected anomaly. Magnitude is in units of the
/// sensor's noise standard deviation.
struct Injection {
  AnomalyType type = AnomalyType::Point;
  std::vector<std::size_t> segments;
  std::vector<std::size_t> sensors;
  double magnitude = 0.0;
};

struct EpisodeRecord {
  std::string id;
  Tensor values;  // [S, T]
  int label = 0;
  std::vector<Injection> injections;

  std::size_t sensors() const { return values.dim(0); }
  std::size_t length() const { return values.dim(1); }
};

using Dataset = std::vector<EpisodeRecord>;

struct SyntheticConfig {
  std::size_t episodes = 200;
  std::size_t sensors = 8;
  std::size_t segments = 10;
  std::size_t window = 50;
  double anomaly_ratio = 0.3;
  double point_fraction = 0.5;  // share of anomalous episodes that are point anomalies
  double noise = 0.05;          // noise std as a fraction of sensor amplitude
  double point_min = 5.0, point_max = 10.0;
  std::size_t point_sensors_min = 1, point_sensors_max = 3;
  double spike_decay = 0.1;  // e-folding length as a fraction of the window
  double friction_min = 2.0, friction_max = 4.0;
  std::size_t friction_sensors_min = 2, friction_sensors_max = 4;
  double ramp_share = 0.2;     // ramp length at each end as a fraction of the episode
  double ramp_jitter = 0.0;    // per-episode uniform jitter on ramp_share
  double gain_jitter = 0.0;    // per-episode uniform jitter on the amplitude, relative
  std::uint64_t seed = 0;

  void validate() const {
    if (episodes == 0 || sensors == 0 || segments == 0 || window == 0) {
      throw ConfigError("synthetic dataset sizes must be positive");
    }
    if (anomaly_ratio < 0.0 || anomaly_ratio > 1.0) throw ConfigError("anomaly ratio must lie in [0, 1]");
    if (point_fraction < 0.0 || point_fraction > 1.0) throw ConfigError("point fraction must lie in [0, 1]");
    if (!(noise > 0.0)) throw ConfigError("noise level must be positive");
    if (!(ramp_share > ramp_jitter && ramp_share + ramp_jitter <= 0.5) || ramp_jitter < 0.0 || gain_jitter < 0.0 ||
        gain_jitter >= 1.0) {
      throw ConfigError("ramp share/jitter must keep the ramp within (0, 0.5] and gain jitter within [0, 1)");
    }
    if (point_sensors_min == 0 || point_sensors_min > point_sensors_max || friction_sensors_min == 0 ||
        friction_sensors_min > friction_sensors_max) {
      throw ConfigError("invalid anomaly sensor-count range");
    }
  }
};

namespace detail {

// Ramp up, hold, ramp down; r is the ramp share of the episode at each end.
inline double trapezoid(double u, double r) {
  if (u < r) return u / r;
  if (u > 1.0 - r) return std::max(0.0, (1.0 - u) / r);
  return 1.0;
}

struct SensorProfile {
  double amplitude;
  double baseline;
};

}  // namespace detail

/// Episodes of trapezoidal ramp-hold-ramp sensor trajectories with Gaussian
/// noise. A stratified draw makes exactly round(ratio * n) episodes
/// anomalous; of those, round(point_fraction * n_anomalous) carry a decaying
/// spike in one segment on a few sensors and the rest a sustained offset on
/// several sensors across the whole episode.
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t S = cfg.sensors, T = cfg.segments * cfg.window;
  std::vector<detail::SensorProfile> profiles(S);
  {
    Rng rng(derive_seed(cfg.seed, 1));
    for (auto& p : profiles) p = {rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0)};
  }
  Rng layout(derive_seed(cfg.seed, 2));
  const std::size_t n_anom = static_cast<std::size_t>(std::lround(cfg.anomaly_ratio * cfg.episodes));
  const auto anomalous = layout.sample(cfg.episodes, n_anom);
  const std::size_t n_point = static_cast<std::size_t>(std::lround(cfg.point_fraction * n_anom));
  std::vector<int> kind(cfg.episodes, -1);  // -1 normal, 0 point, 1 friction
  for (std::size_t i = 0; i < anomalous.size(); ++i) kind[anomalous[i]] = i < n_point ? 0 : 1;

  Dataset out;
  out.reserve(cfg.episodes);
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    Rng rng(derive_seed(cfg.seed, 1000 + e));
    EpisodeRecord rec;
    rec.id = std::to_string(e);
    rec.values = Tensor(Shape{S, T});
    const double ramp = cfg.ramp_share + rng.uniform(-cfg.ramp_jitter, cfg.ramp_jitter);
    const double gain = 1.0 + rng.uniform(-cfg.gain_jitter, cfg.gain_jitter);
    for (std::size_t s = 0; s < S; ++s) {
      const double sd = cfg.noise * profiles[s].amplitude;
      for (std::size_t t = 0; t < T; ++t) {
        const double u = (static_cast<double>(t) + 0.5) / static_cast<double>(T);
        rec.values(s, t) = profiles[s].baseline + gain * profiles[s].amplitude * detail::trapezoid(u, ramp) +
                           rng.normal(0.0, sd);
      }
    }
    if (kind[e] == 0) {
      Injection inj;
      inj.type = AnomalyType::Point;
      const std::size_t seg = rng.index(cfg.segments);
      inj.segments = {seg};
      const std::size_t hi = std::min(cfg.point_sensors_max, S), lo = std::min(cfg.point_sensors_min, hi);
      inj.sensors = rng.sample(S, lo + rng.index(hi - lo + 1));
      std::sort(inj.sensors.begin(), inj.sensors.end());
      inj.magnitude = rng.uniform(cfg.point_min, cfg.point_max);
      const double decay = std::max(1.0, cfg.spike_decay * static_cast<double>(cfg.window));
      const std::size_t start = seg * cfg.window + rng.index(std::max<std::size_t>(1, cfg.window / 2));
      for (std::size_t s : inj.sensors) {
        const double height = inj.magnitude * cfg.noise * profiles[s].amplitude;
        for (std::size_t t = start; t < (seg + 1) * cfg.window; ++t) {
          rec.values(s, t) += height * std::exp(-static_cast<double>(t - start) / decay);
        }
      }
      rec.injections.push_back(std::move(inj));
    } else if (kind[e] == 1) {
      Injection inj;
      inj.type = AnomalyType::Friction;
      for (std::size_t k = 0; k < cfg.segments; ++k) inj.segments.push_back(k);
      const std::size_t hi = std::min(cfg.friction_sensors_max, S), lo = std::min(cfg.friction_sensors_min, hi);
      inj.sensors = rng.sample(S, lo + rng.index(hi - lo + 1));
      std::sort(inj.sensors.begin(), inj.sensors.end());
      inj.magnitude = rng.uniform(cfg.friction_min, cfg.friction_max);
      for (std::size_t s : inj.sensors) {
        const double offset = inj.magnitude * cfg.noise * profiles[s].amplitude;
        for (std::size_t t = 0; t < T; ++t) rec.values(s, t) += offset;
      }
      rec.injections.push_back(std::move(inj));
    }
    rec.label = rec.injections.empty() ? 0 : 1;
    out.push_back(std::move(rec));
  }
  return out;
}

struct ScalerState {
  std::vector<double> min;
  std::vector<double> max;
};

/// Per-sensor min/max over the training episodes only.
inline ScalerState fit_scaler(const Dataset& train) {
  if (train.empty()) throw ConfigError("cannot fit a scaler on an empty training set");
  const std::size_t S = train.front().sensors();
  ScalerState st{std::vector<double>(S, std::numeric_limits<double>::infinity()),
                 std::vector<double>(S, -std::numeric_limits<double>::infinity())};
  for (const EpisodeRecord& e : train) {
    if (e.sensors() != S) throw DimensionError("episodes disagree on sensor count");
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t t = 0; t < e.length(); ++t) {
        st.min[s] = std::min(st.min[s], e.values(s, t));
        st.max[s] = std::max(st.max[s], e.values(s, t));
      }
  }
  return st;
}

/// (x - min) / (max - min) per sensor, no clipping; constant sensors map to 0.
inline EpisodeRecord apply_scaler(const ScalerState& st, EpisodeRecord e) {
  if (e.sensors() != st.min.size()) throw DimensionError("scaler fitted for a different sensor count");
  for (std::size_t s = 0; s < e.sensors(); ++s) {
    const double range = st.max[s] - st.min[s];
    for (std::size_t t = 0; t < e.length(); ++t) {
      e.values(s, t) = range > 0.0 ? (e.values(s, t) - st.min[s]) / range : 0.0;
    }
  }
  return e;
}

inline Dataset apply_scaler(const ScalerState& st, const Dataset& data) {
  Dataset out;
  out.reserve(data.size());
  for (const EpisodeRecord& e : data) out.push_back(apply_scaler(st, e));
  return out;
}

enum class LengthPolicy { Reject, ZeroPad };

/// Splits values [S, T] into contiguous segments [N_w, S, w_l].
inline Tensor segment(const Tensor& values, std::size_t window, LengthPolicy policy = LengthPolicy::Reject) {
  if (values.rank() != 2) throw DimensionError("episode must be S x T, got " + shape_str(values.shape()));
  if (window == 0) throw ConfigError("window length must be positive");
  const std::size_t S = values.dim(0), T = values.dim(1);
  if (T % window != 0 && policy == LengthPolicy::Reject) {
    throw IngestionError("episode length " + std::to_string(T) + " is not a multiple of window " +
                         std::to_string(window));
  }
  const std::size_t n = (T + window - 1) / window;
  Tensor out(Shape{n, S, window});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t t = 0; t < window && k * window + t < T; ++t) out(k, s, t) = values(s, k * window + t);
  return out;
}

namespace detail {

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline double parse_number(std::string_view cell, std::size_t line) {
  while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
  while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
    throw IngestionError("line " + std::to_string(line) + ": non-numeric cell '" + std::string(cell) + "'");
  }
  return v;
}

}  // namespace detail

/// Long-format CSV: episode_id,t,sensor_1..sensor_S,label, one row per time step.
inline void write_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::size_t S = data.empty() ? 0 : data.front().sensors();
  os << "episode_id,t";
  for (std::size_t s = 0; s < S; ++s) os << ",sensor_" << (s + 1);
  os << ",label\n";
  for (const EpisodeRecord& e : data) {
    for (std::size_t t = 0; t < e.length(); ++t) {
      os << e.id << ',' << t;
      for (std::size_t s = 0; s < e.sensors(); ++s) os << ',' << detail::format_double(e.values(s, t));
      os << ',' << e.label << '\n';
    }
  }
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

/// Reads long-format CSV (with an episode_id column) or a single-episode file
/// (columns t?, sensor columns..., label). Errors name the offending line.
inline Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line.empty() || line == "\r") {
    throw IngestionError("'" + path.string() + "' is empty");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv(line);
  int id_col = -1, t_col = -1, label_col = -1;
  std::vector<std::size_t> sensor_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string_view h = header[c];
    if (h == "episode_id") id_col = static_cast<int>(c);
    else if (h == "t") t_col = static_cast<int>(c);
    else if (h == "label") label_col = static_cast<int>(c);
    else sensor_cols.push_back(c);
  }
  if (label_col < 0) throw IngestionError("line 1: missing 'label' column");
  if (sensor_cols.empty()) throw IngestionError("line 1: no sensor columns");

  struct Partial {
    std::string id;
    std::vector<std::vector<double>> rows;
    int label = -1;
  };
  std::vector<Partial> parts;
  std::map<std::string, std::size_t> index;
  const std::string single_id = path.stem().string();
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) {
      throw IngestionError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                           " cells, found " + std::to_string(cells.size()));
    }
    const std::string id = id_col >= 0 ? std::string(cells[id_col]) : single_id;
    auto [it, inserted] = index.try_emplace(id, parts.size());
    if (inserted) parts.push_back(Partial{id, {}, -1});
    Partial& p = parts[it->second];
    if (t_col >= 0) {
      const double t = detail::parse_number(cells[t_col], lineno);
      if (t != static_cast<double>(p.rows.size())) {
        throw IngestionError("line " + std::to_string(lineno) + ": time index " + std::string(cells[t_col]) +
                             " out of sequence for episode " + id);
      }
    }
    const double label = detail::parse_number(cells[label_col], lineno);
    if (label != 0.0 && label != 1.0) {
      throw IngestionError("line " + std::to_string(lineno) + ": label must be 0 or 1");
    }
    if (p.label >= 0 && p.label != static_cast<int>(label)) {
      throw IngestionError("line " + std::to_string(lineno) + ": label changes within episode " + id);
    }
    p.label = static_cast<int>(label);
    std::vector<double> row;
    row.reserve(sensor_cols.size());
    for (std::size_t c : sensor_cols) row.push_back(detail::parse_number(cells[c], lineno));
    p.rows.push_back(std::move(row));
  }
  if (parts.empty()) throw IngestionError("'" + path.string() + "' contains no data rows");
  Dataset out;
  for (Partial& p : parts) {
    EpisodeRecord e;
    e.id = p.id;
    e.label = p.label;
    e.values = Tensor(Shape{sensor_cols.size(), p.rows.size()});
    for (std::size_t t = 0; t < p.rows.size(); ++t)
      for (std::size_t s = 0; s < sensor_cols.size(); ++s) e.values(s, t) = p.rows[t][s];
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace dfstrans

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "dfstrans/diagnostics.hpp"
#include "dfstrans/train.hpp"

namespace dfstrans {

using json = nlohmann::json;

/// Everything a run needs besides the data.
struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
  std::uint64_t seed = 0;  // drives model init and training order

  /// Copies with the master seed pushed into the model and trainer.
  ModelConfig seeded_model() const {
    ModelConfig m = model;
    m.seed = seed;
    return m;
  }
  TrainConfig seeded_train() const {
    TrainConfig t = train;
    t.seed = derive_seed(seed, 1);
    return t;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true|false, got '" + v + "'");
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define DFSTRANS_INT_FIELD(KEY, EXPR)                                                        \
  ConfigField {                                                                              \
    KEY, [](const RunConfig& c) { return std::to_string(c.EXPR); },                          \
        [](RunConfig& c, const std::string& v) {                                             \
          c.EXPR = parse_integer<std::decay_t<decltype(c.EXPR)>>(KEY, v);                    \
        }                                                                                    \
  }
#define DFSTRANS_REAL_FIELD(KEY, EXPR)                                                                          \
  ConfigField {                                                                                                 \
    KEY, [](const RunConfig& c) { return format_double(c.EXPR); },                                              \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_real(KEY, v); }                                 \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      DFSTRANS_INT_FIELD("model.sensors", model.sensors),
      DFSTRANS_INT_FIELD("model.segments", model.segments),
      DFSTRANS_INT_FIELD("model.window", model.window),
      ConfigField{"model.encoding", [](const RunConfig& c) { return std::string(to_string(c.model.encoding)); },
                  [](RunConfig& c, const std::string& v) { c.model.encoding = parse_encoding_kind(v); }},
      DFSTRANS_REAL_FIELD("model.rho", model.rho),
      DFSTRANS_INT_FIELD("model.ff_dim", model.ff_dim),
      DFSTRANS_INT_FIELD("model.heads", model.heads),
      DFSTRANS_INT_FIELD("model.head_hidden", model.head_hidden),
      DFSTRANS_REAL_FIELD("model.dropout", model.dropout),
      DFSTRANS_REAL_FIELD("model.threshold", model.threshold),
      ConfigField{"model.length_policy",
                  [](const RunConfig& c) {
                    return std::string(c.model.length_policy == LengthPolicy::Reject ? "reject" : "zero_pad");
                  },
                  [](RunConfig& c, const std::string& v) {
                    if (v == "reject") {
                      c.model.length_policy = LengthPolicy::Reject;
                    } else if (v == "zero_pad") {
                      c.model.length_policy = LengthPolicy::ZeroPad;
                    } else {
                      throw ConfigError("'model.length_policy' expects reject|zero_pad, got '" + v + "'");
                    }
                  }},
      DFSTRANS_INT_FIELD("cnn.num_blocks", model.cnn.num_blocks),
      DFSTRANS_INT_FIELD("cnn.kernel_size", model.cnn.kernel_size),
      DFSTRANS_INT_FIELD("cnn.filters", model.cnn.filters),
      DFSTRANS_INT_FIELD("cnn.pool_size", model.cnn.pool_size),
      DFSTRANS_INT_FIELD("cnn.pool_stride", model.cnn.pool_stride),
      DFSTRANS_INT_FIELD("cnn.embed_dim", model.cnn.embed_dim),
      ConfigField{"cnn.padding",
                  [](const RunConfig& c) {
                    return std::string(c.model.cnn.padding == Padding::Zeros ? "zeros" : "replicate");
                  },
                  [](RunConfig& c, const std::string& v) {
                    if (v == "zeros") {
                      c.model.cnn.padding = Padding::Zeros;
                    } else if (v == "replicate") {
                      c.model.cnn.padding = Padding::Replicate;
                    } else {
                      throw ConfigError("'cnn.padding' expects zeros|replicate, got '" + v + "'");
                    }
                  }},
      ConfigField{"cnn.shared_weights",
                  [](const RunConfig& c) { return std::string(c.model.cnn.shared_weights ? "true" : "false"); },
                  [](RunConfig& c, const std::string& v) {
                    c.model.cnn.shared_weights = parse_bool("cnn.shared_weights", v);
                  }},
      DFSTRANS_REAL_FIELD("train.lr", train.learning_rate),
      DFSTRANS_REAL_FIELD("train.beta1", train.beta1),
      DFSTRANS_REAL_FIELD("train.beta2", train.beta2),
      DFSTRANS_REAL_FIELD("train.adam_eps", train.adam_eps),
      DFSTRANS_REAL_FIELD("train.weight_decay", train.weight_decay),
      DFSTRANS_INT_FIELD("train.batch_size", train.batch_size),
      DFSTRANS_INT_FIELD("train.max_epochs", train.max_epochs),
      DFSTRANS_INT_FIELD("train.patience", train.patience),
      DFSTRANS_INT_FIELD("run.seed", seed),
  };
  return fields;
}

#undef DFSTRANS_INT_FIELD
#undef DFSTRANS_REAL_FIELD

}  // namespace detail

/// Flat `section.key -> value` view of a run configuration, in a fixed order.
inline std::vector<std::pair<std::string, std::string>> flatten(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : detail::config_fields()) out.emplace_back(f.key, f.get(c));
  return out;
}

/// Sets one `section.key`; unknown keys are a ConfigError.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) {
      f.set(c, detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

/// Parses the plain-text config format:
///
///   # comment
///   [model]
///   encoding = faithful
///   [train]
///   lr = 0.001
///
/// Keys outside a section are rejected. Later lines override earlier ones.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw ConfigError(where + ": malformed section header '" + t + "'");
      section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    if (section.empty()) throw ConfigError(where + ": key outside of a [section]");
    out.emplace_back(section + "." + detail::trim(std::string_view(t).substr(0, eq)),
                     detail::trim(std::string_view(t).substr(eq + 1)));
  }
  return out;
}

inline void apply_config_text(RunConfig& c, const std::string& text) {
  for (const auto& [k, v] : parse_config_text(text)) set_config_value(c, k, v);
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& p) { apply_config_text(c, read_text_file(p)); }

/// Renders a config in the file format, so that parsing it back is lossless.
inline std::string config_text(const RunConfig& c) {
  std::string out, section;
  for (const auto& [k, v] : flatten(c)) {
    const auto dot = k.find('.');
    if (k.substr(0, dot) != section) {
      section = k.substr(0, dot);
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += k.substr(dot + 1) + " = " + v + "\n";
  }
  return out;
}

inline json config_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : flatten(c)) j[k] = v;
  return j;
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  for (const auto& [k, v] : j.items()) set_config_value(c, k, v.get<std::string>());
  return c;
}

inline json synthetic_json(const SyntheticConfig& c) {
  return {{"episodes", c.episodes},
          {"sensors", c.sensors},
          {"segments", c.segments},
          {"window", c.window},
          {"anomaly_ratio", c.anomaly_ratio},
          {"point_fraction", c.point_fraction},
          {"noise", c.noise},
          {"point_magnitude", {c.point_min, c.point_max}},
          {"point_sensors", {c.point_sensors_min, c.point_sensors_max}},
          {"spike_decay", c.spike_decay},
          {"friction_magnitude", {c.friction_min, c.friction_max}},
          {"friction_sensors", {c.friction_sensors_min, c.friction_sensors_max}},
          {"ramp_share", c.ramp_share},
          {"ramp_jitter", c.ramp_jitter},
          {"gain_jitter", c.gain_jitter},
          {"seed", c.seed}};
}

// ---- dataset manifest

inline json injection_json(const Injection& inj) {
  return {{"type", to_string(inj.type)},
          {"segments", inj.segments},
          {"sensors", inj.sensors},
          {"magnitude", inj.magnitude}};
}

inline Injection injection_from_json(const json& j) {
  Injection inj;
  inj.type = parse_anomaly_type(j.at("type").get<std::string>());
  inj.segments = j.at("segments").get<std::vector<std::size_t>>();
  inj.sensors = j.at("sensors").get<std::vector<std::size_t>>();
  inj.magnitude = j.at("magnitude").get<double>();
  return inj;
}

/// Counts, generator settings and per-episode ground truth.
inline json dataset_manifest(const Dataset& d, const SyntheticConfig& cfg) {
  std::size_t anomalous = 0, point = 0, friction = 0;
  json episodes = json::array();
  for (const EpisodeRecord& e : d) {
    anomalous += e.label;
    json inj = json::array();
    for (const Injection& i : e.injections) {
      (i.type == AnomalyType::Point ? point : friction) += 1;
      inj.push_back(injection_json(i));
    }
    episodes.push_back({{"id", e.id}, {"label", e.label}, {"injections", inj}});
  }
  return {{"format", "dfstrans-dataset"},
          {"version", 1},
          {"counts",
           {{"episodes", d.size()}, {"anomalous", anomalous}, {"point", point}, {"friction", friction}}},
          {"seed", cfg.seed},
          {"generator", synthetic_json(cfg)},
          {"episodes", episodes}};
}

/// Attaches injections from a dataset manifest to episodes loaded from CSV.
inline void attach_injections(Dataset& d, const json& manifest) {
  std::map<std::string, std::vector<Injection>> by_id;
  for (const json& e : manifest.at("episodes")) {
    std::vector<Injection> inj;
    for (const json& i : e.at("injections")) inj.push_back(injection_from_json(i));
    by_id[e.at("id").get<std::string>()] = std::move(inj);
  }
  for (EpisodeRecord& e : d) {
    if (const auto it = by_id.find(e.id); it != by_id.end()) e.injections = it->second;
  }
}

// ---- checkpoints
//
// {"format": "dfstrans-checkpoint", "version": 1, "trained": bool,
//  "config": {flat key/value strings},
//  "scaler": {"min": [S], "max": [S]},
//  "parameters": [{"name", "shape", "values"}],   in Model::parameters() order
//  "batch_norm": [{"running_mean", "running_var"}]}
//
// Doubles are written in shortest round-trip form, so a load/save cycle is
// byte-identical.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  ScalerState scaler;
  bool trained = false;
  json parameters = json::array();
  json batch_norm = json::array();
};

namespace detail {

inline json tensor_values(const Tensor& t, const std::string& what) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError("refusing to serialize non-finite value in " + what);
  return json(t.data());
}

inline Tensor tensor_from(const json& values, const Shape& shape, const std::string& what) {
  std::vector<double> v = values.get<std::vector<double>>();
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  if (v.size() != n) throw IngestionError("checkpoint entry '" + what + "' has the wrong number of values");
  return Tensor(shape, std::move(v));
}

}  // namespace detail

inline json checkpoint_json(Model& model, const RunConfig& cfg, const ScalerState& scaler, bool trained) {
  json params = json::array();
  for (const Parameter* p : model.parameters()) {
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"values", detail::tensor_values(p->value, p->name)}});
  }
  json bn = json::array();
  for (const BatchNormStats* s : model.batch_norm_stats()) {
    bn.push_back({{"running_mean", detail::tensor_values(s->running_mean, "batch norm")},
                  {"running_var", detail::tensor_values(s->running_var, "batch norm")}});
  }
  RunConfig c = cfg;
  c.model = model.config();
  return {{"format", "dfstrans-checkpoint"},
          {"version", kCheckpointVersion},
          {"trained", trained},
          {"config", config_json(c)},
          {"scaler", {{"min", scaler.min}, {"max", scaler.max}}},
          {"parameters", params},
          {"batch_norm", bn}};
}

inline void save_checkpoint(const std::filesystem::path& p, Model& model, const RunConfig& cfg,
                            const ScalerState& scaler, bool trained) {
  write_text_file(p, checkpoint_json(model, cfg, scaler, trained).dump(1) + "\n");
}

inline Checkpoint parse_checkpoint(const json& j) {
  try {
    if (j.at("format") != "dfstrans-checkpoint") throw IngestionError("not a dfstrans checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw IngestionError("unsupported checkpoint version " + j.at("version").dump());
    }
    Checkpoint c;
    c.config = config_from_json(j.at("config"));
    c.trained = j.at("trained").get<bool>();
    c.scaler.min = j.at("scaler").at("min").get<std::vector<double>>();
    c.scaler.max = j.at("scaler").at("max").get<std::vector<double>>();
    c.parameters = j.at("parameters");
    c.batch_norm = j.at("batch_norm");
    return c;
  } catch (const json::exception& e) {
    throw IngestionError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& p) {
  json j;
  try {
    j = json::parse(read_text_file(p));
  } catch (const json::parse_error& e) {
    throw IngestionError("checkpoint '" + p.string() + "' is not valid JSON: " + e.what());
  }
  return parse_checkpoint(j);
}

/// Fills a model built from the checkpoint's config with the stored values.
inline void load_weights(Model& model, const Checkpoint& c) {
  try {
    auto ps = model.parameters();
    if (c.parameters.size() != ps.size()) throw IngestionError("checkpoint parameter count does not match config");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const json& e = c.parameters[i];
      if (e.at("name").get<std::string>() != ps[i]->name) {
        throw IngestionError("checkpoint parameter " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                             "', expected '" + ps[i]->name + "'");
      }
      if (e.at("shape").get<Shape>() != ps[i]->value.shape()) {
        throw IngestionError("checkpoint parameter '" + ps[i]->name + "' has the wrong shape");
      }
      ps[i]->value = detail::tensor_from(e.at("values"), ps[i]->value.shape(), ps[i]->name);
    }
    auto bs = model.batch_norm_stats();
    if (c.batch_norm.size() != bs.size()) throw IngestionError("checkpoint batch-norm count does not match config");
    for (std::size_t i = 0; i < bs.size(); ++i) {
      bs[i]->running_mean = detail::tensor_from(c.batch_norm[i].at("running_mean"), bs[i]->running_mean.shape(), "batch norm");
      bs[i]->running_var = detail::tensor_from(c.batch_norm[i].at("running_var"), bs[i]->running_var.shape(), "batch norm");
    }
  } catch (const json::exception& e) {
    throw IngestionError(std::string("malformed checkpoint: ") + e.what());
  }
}

// ---- reports

inline json metrics_json(const BinaryMetrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},   {"accuracy", m.accuracy},
          {"tp", m.tp},               {"fp", m.fp},         {"tn", m.tn},   {"fn", m.fn},
          {"zero_division", m.zero_division}};
}

inline std::string history_csv(const TrainHistory& h) {
  std::string out = "epoch,train_loss,val_loss,val_f1,best\n";
  for (const EpochRecord& r : h.epochs) {
    out += std::to_string(r.epoch) + "," + detail::format_double(r.train_loss) + "," +
           detail::format_double(r.val_loss) + "," + detail::format_double(r.val_f1) + "," +
           (r.epoch == h.best_epoch ? "1" : "0") + "\n";
  }
  return out;
}

inline json cv_json(const CvReport& r) {
  json folds = json::array();
  for (const FoldResult& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"seed", f.seed},
                     {"metrics", metrics_json(f.metrics)},
                     {"best_epoch", f.history.best_epoch},
                     {"epochs_run", f.history.epochs.size()}});
  }
  return {{"folds", folds},
          {"mean", {{"precision", r.mean_precision}, {"recall", r.mean_recall}, {"f1", r.mean_f1}}},
          {"std", {{"f1", r.std_f1}}}};
}

/// Rank-2 tensor as CSV with a header of column indices; rank 3 is written
/// as one block per leading index with the index in the first column.
inline std::string matrix_csv(const Tensor& t, const std::string& row_label = "row") {
  std::string out;
  if (t.rank() == 1) {
    out = "index,value\n";
    for (std::size_t i = 0; i < t.dim(0); ++i) out += std::to_string(i) + "," + detail::format_double(t[i]) + "\n";
    return out;
  }
  const bool cube = t.rank() == 3;
  if (t.rank() != 2 && !cube) throw DimensionError("matrix_csv: rank " + std::to_string(t.rank()));
  const std::size_t G = cube ? t.dim(0) : 1, R = t.dim(cube ? 1 : 0), C = t.dim(cube ? 2 : 1);
  out = cube ? "block," + row_label : row_label;
  for (std::size_t c = 0; c < C; ++c) out += "," + std::to_string(c);
  out += "\n";
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t r = 0; r < R; ++r) {
      if (cube) out += std::to_string(g) + ",";
      out += std::to_string(r);
      for (std::size_t c = 0; c < C; ++c) out += "," + detail::format_double(t[(g * R + r) * C + c]);
      out += "\n";
    }
  return out;
}

inline json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"values", t.data()}}; }

inline json diagnostic_json(const DiagnosticReport& r, const std::optional<LocalizationResult>& loc) {
  json j = {{"episode_id", r.episode_id},
            {"logit", r.logit},
            {"probability", r.probability},
            {"a_sensor", tensor_json(r.a_sensor)},
            {"A_global", tensor_json(r.A_global)},
            {"a_global", tensor_json(r.a_global)},
            {"b_segment", tensor_json(r.b_segment)},
            {"B_global", tensor_json(r.B_global)},
            {"b_global", tensor_json(r.b_global)},
            {"conservation_error", conservation_error(r)}};
  if (loc && (loc->temporal_hit || loc->spatial_hit)) {
    json l = json::object();
    if (loc->temporal_hit) l["temporal_hit"] = *loc->temporal_hit;
    if (loc->spatial_hit) l["spatial_hit"] = *loc->spatial_hit;
    l["hit"] = loc->hit();
    j["localization"] = l;
  }
  return j;
}

/// Long format: one row per (episode, k) plus summary rows with episode "mean"
/// and "median".
inline std::string at_score_csv(const AtScoreCurve& c, const std::string& cls) {
  std::string out = "class,k_percent,episode,delta\n";
  for (std::size_t i = 0; i < c.k.size(); ++i) {
    const std::string pre = cls + "," + detail::format_double(c.k[i]) + ",";
    for (std::size_t e = 0; e < c.episode_id.size(); ++e)
      out += pre + c.episode_id[e] + "," + detail::format_double(c.deltas[i][e]) + "\n";
    out += pre + "mean," + detail::format_double(c.mean[i]) + "\n";
    out += pre + "median," + detail::format_double(c.median[i]) + "\n";
  }
  return out;
}

}  // namespace dfstrans

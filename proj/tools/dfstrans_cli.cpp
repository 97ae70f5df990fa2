// dfstrans command-line driver. See README.md for the command reference.

#include <CLI11.hpp>

#include <chrono>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dfstrans/manifest.hpp"

namespace fs = std::filesystem;
using namespace dfstrans;

namespace {

using Clock = std::chrono::steady_clock;

// Seed precedence: --seed, then run.seed from --config, then ST_DIAG_SEED, then 0.
std::uint64_t env_seed() {
  const char* s = std::getenv("ST_DIAG_SEED");
  if (!s || !*s) return 0;
  return detail::parse_integer<std::uint64_t>("ST_DIAG_SEED", s);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

struct ManifestScope {
  RunManifest m;
  Clock::time_point t0 = Clock::now();
  fs::path dir;

  ManifestScope(std::string command, fs::path out) : dir(std::move(out)) {
    m.command = std::move(command);
    m.started_at = utc_timestamp(std::chrono::system_clock::now());
  }

  fs::path output(const std::string& name) {
    m.outputs.push_back((dir / name).string());
    return dir / name;
  }

  void finish() {
    m.duration_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    write_manifest(dir, m);
  }
};

// ---- options shared by train and cv

struct RunOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string encoding;
  std::optional<std::size_t> epochs;

  void add_to(CLI::App* c) {
    c->add_option("--config", config_path, "plain-text config file ([section] key = value)");
    c->add_option("--set", overrides, "override one key, e.g. --set cnn.filters=16 (repeatable)");
    c->add_option("--seed", seed, "master seed (falls back to run.seed, then ST_DIAG_SEED)");
    c->add_option("--encoding", encoding, "positional encoding: faithful|vanilla");
    c->add_option("--epochs", epochs, "maximum training epochs");
  }

  // Applies file, then flags. Episode geometry comes from the data unless set explicitly.
  RunConfig resolve(const Dataset& data) const {
    RunConfig c;
    std::set<std::string> explicit_keys;
    if (!config_path.empty()) {
      for (const auto& [k, v] : parse_config_text(read_text_file(config_path))) {
        set_config_value(c, k, v);
        explicit_keys.insert(k);
      }
    }
    if (!explicit_keys.count("run.seed")) c.seed = env_seed();
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
      explicit_keys.insert(kv.substr(0, eq));
    }
    if (seed) c.seed = *seed;
    if (!encoding.empty()) c.model.encoding = parse_encoding_kind(encoding);
    if (epochs) c.train.max_epochs = *epochs;
    if (data.empty()) throw IngestionError("dataset has no episodes");
    if (!explicit_keys.count("model.sensors")) c.model.sensors = data.front().sensors();
    if (!explicit_keys.count("model.segments")) {
      const std::size_t T = data.front().length(), w = c.model.window;
      c.model.segments = c.model.length_policy == LengthPolicy::ZeroPad ? (T + w - 1) / w : T / w;
    }
    c.model.validate();
    c.train.validate();
    return c;
  }
};

// Loads the CSV plus ground truth from a sibling dataset.json when present.
Dataset load_data(const fs::path& csv, ManifestScope& scope) {
  Dataset d = load_csv(csv);
  scope.m.add_input(csv);
  const fs::path meta = csv.parent_path() / "dataset.json";
  if (fs::exists(meta)) {
    try {
      attach_injections(d, json::parse(read_text_file(meta)));
    } catch (const json::exception& e) {
      throw IngestionError("malformed dataset manifest '" + meta.string() + "': " + e.what());
    }
    scope.m.add_input(meta);
  }
  return d;
}

struct LoadedModel {
  Checkpoint ckpt;
  Model model;
};

LoadedModel load_model(const fs::path& p, ManifestScope& scope) {
  LoadedModel lm{load_checkpoint(p), {}};
  lm.model = Model(lm.ckpt.config.seeded_model());
  load_weights(lm.model, lm.ckpt);
  scope.m.add_input(p);
  scope.m.config = config_json(lm.ckpt.config);
  scope.m.seed = lm.ckpt.config.seed;
  return lm;
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(detail::parse_real(what, detail::trim(item)));
  if (out.empty()) throw ConfigError(std::string(what) + " list is empty");
  return out;
}

std::string episode_class(const EpisodeRecord& e) {
  return e.injections.empty() ? (e.label ? "anomalous" : "normal") : to_string(e.injections.front().type);
}

// ---- commands

int cmd_gen_data(const fs::path& out, SyntheticConfig cfg, std::optional<std::uint64_t> seed) {
  cfg.seed = seed ? *seed : env_seed();
  cfg.validate();
  ensure_dir(out);
  ManifestScope scope("gen-data", out);
  const Dataset d = generate_synthetic(cfg);
  write_csv(scope.output("data.csv"), d);
  write_text_file(scope.output("dataset.json"), dataset_manifest(d, cfg).dump(1) + "\n");
  scope.m.config = synthetic_json(cfg);
  scope.m.seed = cfg.seed;
  scope.finish();
  std::size_t anomalous = 0;
  for (const auto& e : d) anomalous += e.label;
  std::cout << "wrote " << d.size() << " episodes (" << anomalous << " anomalous) to " << out.string() << "\n";
  return 0;
}

int cmd_train(const fs::path& data_path, const fs::path& out, const RunOptions& opt, double val_fraction) {
  ensure_dir(out);
  ManifestScope scope("train", out);
  const Dataset data = load_data(data_path, scope);
  const RunConfig cfg = opt.resolve(data);
  scope.m.config = config_json(cfg);
  scope.m.seed = cfg.seed;

  const FoldSplit split = holdout_split(data, val_fraction, derive_seed(cfg.seed, 2));
  const Dataset raw_train = subset(data, split.train);
  const ScalerState scaler = fit_scaler(raw_train);
  const Dataset tr = apply_scaler(scaler, raw_train);
  const Dataset va = apply_scaler(scaler, subset(data, split.val));
  Model model(cfg.seeded_model());
  const TrainHistory hist = train(model, tr, va, cfg.seeded_train());

  save_checkpoint(scope.output("model.json"), model, cfg, scaler, true);
  const json metrics = {{"train", metrics_json(evaluate(model, tr).metrics)},
                        {"validation", metrics_json(evaluate(model, va).metrics)},
                        {"best_epoch", hist.best_epoch},
                        {"epochs_run", hist.epochs.size()},
                        {"stopped_early", hist.stopped_early}};
  write_text_file(scope.output("metrics.json"), metrics.dump(2) + "\n");
  write_text_file(scope.output("history.csv"), history_csv(hist));
  write_text_file(scope.output("config.ini"), config_text(cfg));
  scope.finish();
  std::cout << "trained " << hist.epochs.size() << " epochs, best epoch " << hist.best_epoch << ", validation F1 "
            << metrics["validation"]["f1"].get<double>() << "\n";
  return 0;
}

int cmd_eval(const fs::path& model_path, const fs::path& data_path, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path() : fs::path(out);
  if (!out.empty()) ensure_dir(dir);
  ManifestScope scope("eval", dir);
  LoadedModel lm = load_model(model_path, scope);
  const Dataset data = apply_scaler(lm.ckpt.scaler, load_data(data_path, scope));
  const Evaluation ev = evaluate(lm.model, data);
  const json j = {{"metrics", metrics_json(ev.metrics)}, {"loss", ev.loss}, {"episodes", data.size()}};
  if (!out.empty()) {
    write_text_file(scope.output("metrics.json"), j.dump(2) + "\n");
    scope.finish();
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_cv(const fs::path& data_path, const fs::path& out, const RunOptions& opt, std::size_t folds,
           std::size_t jobs) {
  ensure_dir(out);
  ManifestScope scope("cv", out);
  const Dataset data = load_data(data_path, scope);
  const RunConfig cfg = opt.resolve(data);
  scope.m.config = config_json(cfg);
  scope.m.config["cv.folds"] = std::to_string(folds);
  scope.m.seed = cfg.seed;
  const CvReport rep = cross_validate(data, cfg.model, cfg.train, folds, cfg.seed, jobs);
  write_text_file(scope.output("cv.json"), cv_json(rep).dump(2) + "\n");
  write_text_file(scope.output("config.ini"), config_text(cfg));
  scope.finish();
  std::cout << "fold,precision,recall,f1\n";
  for (const FoldResult& f : rep.folds) {
    std::cout << f.fold << "," << f.metrics.precision << "," << f.metrics.recall << "," << f.metrics.f1 << "\n";
  }
  std::cout << "mean," << rep.mean_precision << "," << rep.mean_recall << "," << rep.mean_f1 << " (f1 std "
            << rep.std_f1 << ")\n";
  return 0;
}

int cmd_diagnose(const fs::path& model_path, const fs::path& data_path, const std::string& id, const fs::path& out) {
  ensure_dir(out);
  ManifestScope scope("diagnose", out);
  LoadedModel lm = load_model(model_path, scope);
  const Dataset data = load_data(data_path, scope);
  const auto it = std::find_if(data.begin(), data.end(), [&](const EpisodeRecord& e) { return e.id == id; });
  if (it == data.end()) throw LookupError("no episode with id '" + id + "' in " + data_path.string());
  const EpisodeRecord ep = apply_scaler(lm.ckpt.scaler, *it);

  const DiagnosticReport r = diagnose(lm.model, ep);
  const Prediction pred = lm.model.predict(ep.values);
  std::optional<LocalizationResult> loc;
  if (!ep.injections.empty()) loc = localization_check(r, ep.injections);
  json j = diagnostic_json(r, loc);
  j["label"] = ep.label;
  write_text_file(scope.output("report.json"), j.dump(2) + "\n");
  write_text_file(scope.output("temporal_attention.csv"), matrix_csv(pred.attention.temporal, "query_segment"));
  write_text_file(scope.output("spatial_attention.csv"), matrix_csv(pred.attention.spatial, "query_sensor"));
  write_text_file(scope.output("a_sensor.csv"), matrix_csv(r.a_sensor, "sensor"));
  write_text_file(scope.output("A_global.csv"), matrix_csv(r.A_global, "query_segment"));
  write_text_file(scope.output("a_global.csv"), matrix_csv(r.a_global));
  write_text_file(scope.output("b_segment.csv"), matrix_csv(r.b_segment, "segment"));
  write_text_file(scope.output("B_global.csv"), matrix_csv(r.B_global, "query_sensor"));
  write_text_file(scope.output("b_global.csv"), matrix_csv(r.b_global));
  scope.finish();
  std::cout << "episode " << id << ": probability " << r.probability << ", top segment "
            << top_indices({r.a_global.data().begin(), r.a_global.data().end()}, 1).front() << ", top sensor " << top_indices({r.b_global.data().begin(), r.b_global.data().end()}, 1).front();
  if (loc) std::cout << ", localization " << (loc->hit() ? "hit" : "miss");
  std::cout << "\n";
  return 0;
}

int cmd_at_score(const fs::path& model_path, const fs::path& data_path, const std::string& ks, bool by_class,
                 const std::string& mode, const fs::path& out) {
  ensure_dir(out);
  ManifestScope scope("at-score", out);
  LoadedModel lm = load_model(model_path, scope);
  if (!lm.ckpt.trained) throw ContractError("AT-score needs a trained model; '" + model_path.string() + "' is untrained");
  std::vector<double> k = parse_list(ks, "--k");
  if (std::find(k.begin(), k.end(), 0.0) == k.end()) k.insert(k.begin(), 0.0);
  TopKMode m = TopKMode::Joint;
  if (mode == "per-map") {
    m = TopKMode::PerMap;
  } else if (mode != "joint") {
    throw ConfigError("--mode expects joint|per-map, got '" + mode + "'");
  }
  const Dataset data = apply_scaler(lm.ckpt.scaler, load_data(data_path, scope));
  AtScoreCurve all = at_score(lm.model, data, k, m);
  for (std::size_t e = 0; e < data.size(); ++e) all.episode_class[e] = episode_class(data[e]);

  std::vector<std::pair<std::string, AtScoreCurve>> curves = {{"all", all}};
  if (by_class) {
    std::set<std::string> classes(all.episode_class.begin(), all.episode_class.end());
    for (const std::string& c : classes) curves.emplace_back(c, filter_class(all, c));
  }
  std::string csv;
  json summary = json::object();
  for (const auto& [cls, c] : curves) {
    const std::string part = at_score_csv(c, cls);
    csv += csv.empty() ? part : part.substr(part.find('\n') + 1);
    summary[cls] = {{"k_percent", c.k},
                    {"mean", c.mean},
                    {"median", c.median},
                    {"episodes", c.episode_id.size()},
                    {"median_nondecreasing", medians_nondecreasing(c)}};
  }
  write_text_file(scope.output("at_score.csv"), csv);
  write_text_file(scope.output("at_score.json"), summary.dump(2) + "\n");
  scope.finish();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_encode_analyze(std::size_t d, double rho, double sigma_mult, const std::string& deltas_arg,
                       const fs::path& out) {
  if (d < 2 || d % 2 != 0) throw ConfigError("--d must be even and at least 2, got " + std::to_string(d));
  std::vector<std::size_t> deltas;
  for (double v : parse_list(deltas_arg, "--deltas")) {
    if (v < 0 || v >= static_cast<double>(d) || v != std::floor(v)) {
      throw ConfigError("delta positions must be integers in [0, d)");
    }
    deltas.push_back(static_cast<std::size_t>(v));
  }
  ensure_dir(out);
  ManifestScope scope("encode-analyze", out);
  scope.m.config = {{"d", d}, {"rho", rho}, {"sigma_mult", sigma_mult}, {"deltas", deltas}};

  const EncodingSpec vanilla{d, EncodingKind::Vanilla, rho}, faithful{d, EncodingKind::Faithful, rho};
  const FrequencyDistribution gv = frequency_distribution(vanilla, default_kde_sigma(d, sigma_mult));
  const FrequencyDistribution gf = faithful_distribution(faithful);
  std::string dist = "k,omega,vanilla,faithful\n";
  for (std::size_t k = 0; k < gv.weights.size(); ++k) {
    dist += std::to_string(k) + "," + detail::format_double(2.0 * std::numbers::pi * k / d) + "," +
            detail::format_double(gv.weights[k]) + "," + detail::format_double(gf.weights[k]) + "\n";
  }
  write_text_file(scope.output("frequency_distribution.csv"), dist);

  std::set<std::size_t> bin_ds = {256, 512, d};
  std::string bins = "d,rho,bins\n";
  for (std::size_t bd : bin_ds) {
    bins += std::to_string(bd) + "," + detail::format_double(rho) + "," + std::to_string(lowpass_bin_count(bd, rho)) +
            "\n";
  }
  write_text_file(scope.output("lowpass_bins.csv"), bins);

  std::string rec = "delta,t,target,vanilla,faithful\n";
  for (std::size_t s : deltas) {
    std::vector<double> f(d, 0.0);
    f[s] = 1.0;
    const Reconstruction rv = reconstruct_reference(f, gv), rf = reconstruct_reference(f, gf);
    for (std::size_t t = 0; t < d; ++t) {
      rec += std::to_string(s) + "," + std::to_string(t) + "," + (t == s ? "1" : "0") + "," +
             detail::format_double(rv.signal[t]) + "," + detail::format_double(rf.signal[t]) + "\n";
    }
  }
  write_text_file(scope.output("reconstruction.csv"), rec);

  std::string gram = "encoding,d,max_abs_deviation,max_off_diagonal,max_diagonal_error\n";
  for (const EncodingSpec& spec : {vanilla, faithful}) {
    const GramReport g = verify_faithfulness(spec);
    gram += std::string(to_string(spec.kind)) + "," + std::to_string(d) + "," +
            detail::format_double(g.max_abs_deviation) + "," + detail::format_double(g.max_off_diagonal) + "," +
            detail::format_double(g.max_diagonal_error) + "\n";
  }
  write_text_file(scope.output("gram.csv"), gram);

  const auto peak = std::max_element(gv.weights.begin(), gv.weights.end());
  double low_mass = 0.0;
  for (std::size_t k = 0; k <= 4 && k < gv.weights.size(); ++k) low_mass += gv.weights[k];
  const json summary = {
      {"vanilla",
       {{"argmax_k", peak - gv.weights.begin()}, {"g0_over_max", gv.weights[0] / *peak}, {"mass_k_le_4", low_mass}}},
      {"faithful", {{"max_gram_deviation", verify_faithfulness(faithful).max_abs_deviation}}},
      {"lowpass_bins", {{"256", lowpass_bin_count(256, rho)}, {"512", lowpass_bin_count(512, rho)}}}};
  write_text_file(scope.output("summary.json"), summary.dump(2) + "\n");
  scope.finish();
  std::cout << "lowpass bins: " << bins;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DFStrans anomaly diagnosis: data generation, training, diagnosis and encoding analysis"};
  app.require_subcommand(1);
  std::function<int()> run;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset (CSV + dataset.json)");
  SyntheticConfig syn;
  fs::path gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--episodes", syn.episodes, "episode count")->capture_default_str();
  gen->add_option("--sensors", syn.sensors, "sensors per episode")->capture_default_str();
  gen->add_option("--segments", syn.segments, "segments per episode")->capture_default_str();
  gen->add_option("--window", syn.window, "samples per segment")->capture_default_str();
  gen->add_option("--anomaly-ratio", syn.anomaly_ratio, "share of anomalous episodes")->capture_default_str();
  gen->add_option("--point-fraction", syn.point_fraction, "share of anomalies that are point spikes")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed (falls back to ST_DIAG_SEED)");
  gen->callback([&] { run = [&] { return cmd_gen_data(gen_out, syn, gen_seed); }; });

  // train
  auto* tr = app.add_subcommand("train", "train one model on a dataset");
  RunOptions tr_opt;
  fs::path tr_data, tr_out;
  double val_fraction = 0.15;
  tr->add_option("--data", tr_data, "dataset CSV")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--val-fraction", val_fraction, "held-out validation share")->capture_default_str();
  tr_opt.add_to(tr);
  tr->callback([&] { run = [&] { return cmd_train(tr_data, tr_out, tr_opt, val_fraction); }; });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  fs::path ev_model, ev_data;
  std::string ev_out;
  ev->add_option("--model", ev_model, "checkpoint (model.json)")->required();
  ev->add_option("--data", ev_data, "dataset CSV")->required();
  ev->add_option("--out", ev_out, "optional output directory for metrics.json");
  ev->callback([&] { run = [&] { return cmd_eval(ev_model, ev_data, ev_out); }; });

  // cv
  auto* cv = app.add_subcommand("cv", "stratified k-fold cross-validation");
  RunOptions cv_opt;
  fs::path cv_data, cv_out;
  std::size_t folds = 5, jobs = 1;
  cv->add_option("--data", cv_data, "dataset CSV")->required();
  cv->add_option("--out", cv_out, "output directory")->required();
  cv->add_option("--folds", folds, "fold count")->capture_default_str();
  cv->add_option("--jobs", jobs, "folds trained in parallel")->capture_default_str();
  cv_opt.add_to(cv);
  cv->callback([&] { run = [&] { return cmd_cv(cv_data, cv_out, cv_opt, folds, jobs); }; });

  // diagnose
  auto* dg = app.add_subcommand("diagnose", "diagnostic scores and attention maps for one episode");
  fs::path dg_model, dg_data, dg_out;
  std::string dg_id;
  dg->add_option("--model", dg_model, "checkpoint (model.json)")->required();
  dg->add_option("--data", dg_data, "dataset CSV")->required();
  dg->add_option("--episode-id", dg_id, "episode to diagnose")->required();
  dg->add_option("--out", dg_out, "output directory")->required();
  dg->callback([&] { run = [&] { return cmd_diagnose(dg_model, dg_data, dg_id, dg_out); }; });

  // at-score
  auto* at = app.add_subcommand("at-score", "logit drop when the top-k% attention weights are zeroed");
  fs::path at_model, at_data, at_out;
  std::string at_k = "1,5,10,20,50", at_mode = "joint";
  bool by_class = false;
  at->add_option("--model", at_model, "checkpoint (model.json)")->required();
  at->add_option("--data", at_data, "dataset CSV")->required();
  at->add_option("--out", at_out, "output directory")->required();
  at->add_option("--k", at_k, "comma-separated percentages; 0 is always included")->capture_default_str();
  at->add_option("--mode", at_mode, "top-k ranking: joint|per-map")->capture_default_str();
  at->add_flag("--by-class", by_class, "also report curves per episode class");
  at->callback([&] { run = [&] { return cmd_at_score(at_model, at_data, at_k, by_class, at_mode, at_out); }; });

  // encode-analyze
  auto* en = app.add_subcommand("encode-analyze", "frequency content and reconstruction of the encodings");
  std::size_t en_d = 256;
  double en_rho = 10000.0, en_sigma = 4.0;
  std::string en_deltas = "5,40,75";
  fs::path en_out;
  en->add_option("--d", en_d, "encoding dimension (even)")->capture_default_str();
  en->add_option("--rho", en_rho, "frequency base")->capture_default_str();
  en->add_option("--sigma-mult", en_sigma, "KDE bandwidth in units of 2*pi/d")->capture_default_str();
  en->add_option("--deltas", en_deltas, "reference delta positions")->capture_default_str();
  en->add_option("--out", en_out, "output directory")->required();
  en->callback([&] { run = [&] { return cmd_encode_analyze(en_d, en_rho, en_sigma, en_deltas, en_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ConfigError("").exit_code();
  }
  try {
    return run();
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

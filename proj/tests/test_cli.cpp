// Runs the dfstrans binary end to end.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

const fs::path kRoot = fs::temp_directory_path() / "dfstrans_test_cli";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Exit status of `dfstrans <args>`; stdout goes to `<kRoot>/stdout.txt`.
int cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " '" + std::string(DFSTRANS_CLI) + "' " + args + " > '" +
                          (kRoot / "stdout.txt").string() + "' 2> '" + (kRoot / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
 protected:
  static fs::path data_dir() { return kRoot / "tiny"; }
  static fs::path data() { return data_dir() / "data.csv"; }
  static fs::path run_dir() { return kRoot / "tiny_run"; }
  static fs::path model() { return run_dir() / "model.json"; }

  // A tiny dataset and a model overfit to all of it.
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    ASSERT_EQ(cli("gen-data --out " + data_dir().string() + " --episodes 24 --anomaly-ratio 0.5 --seed 4"), 0);
    ASSERT_EQ(cli("train --data " + data().string() + " --out " + run_dir().string() +
                  " --val-fraction 0 --epochs 60 --set model.dropout=0"),
              0);
  }

  static std::string first_episode(const std::string& cls) {
    const json manifest = read_json(data_dir() / "dataset.json");
    for (const json& e : manifest["episodes"]) {
      const bool normal = e["injections"].empty();
      if ((cls == "normal" && normal) || (!normal && e["injections"][0]["type"] == cls)) {
        return e["id"].get<std::string>();
      }
    }
    return {};
  }
};

TEST_F(Cli, GenDataDefaultsAndRowCount) {
  const fs::path out = kRoot / "default_data";
  ASSERT_EQ(cli("gen-data --out " + out.string() + " --seed 1"), 0);
  EXPECT_EQ(line_count(out / "data.csv"), 200u * 500u + 1u);
  const json m = read_json(out / "dataset.json");
  EXPECT_EQ(m["counts"]["episodes"], 200);
  EXPECT_EQ(m["counts"]["anomalous"], 60);
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST_F(Cli, GenDataIsByteIdenticalAndHonoursEnvSeed) {
  const fs::path a = kRoot / "seed_a", b = kRoot / "seed_b", c = kRoot / "seed_env";
  ASSERT_EQ(cli("gen-data --episodes 10 --out " + a.string() + " --seed 8"), 0);
  ASSERT_EQ(cli("gen-data --episodes 10 --out " + b.string() + " --seed 8"), 0);
  ASSERT_EQ(cli("gen-data --episodes 10 --out " + c.string(), "ST_DIAG_SEED=8"), 0);
  EXPECT_EQ(slurp(a / "data.csv"), slurp(b / "data.csv"));
  EXPECT_EQ(slurp(a / "data.csv"), slurp(c / "data.csv"));
  EXPECT_EQ(read_json(c / "manifest.json")["seed"], 8);
  EXPECT_EQ(cli("gen-data --episodes 10 --out " + c.string(), "ST_DIAG_SEED=abc"), 2);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli("no-such-command"), 2);
  EXPECT_EQ(cli("gen-data --out " + (kRoot / "x").string() + " --anomaly-ratio 2"), 2);
  // A regular file where a directory is needed.
  const fs::path blocker = kRoot / "blocker";
  std::ofstream(blocker) << "x";
  EXPECT_EQ(cli("gen-data --episodes 5 --out " + (blocker / "sub").string()), 3);
  EXPECT_EQ(cli("eval --model " + model().string() + " --data " + (kRoot / "missing.csv").string()), 3);
  const fs::path bad = kRoot / "bad.csv";
  std::ofstream(bad) << "episode_id,t,sensor_1,label\ne,0,oops,0\n";
  EXPECT_EQ(cli("eval --model " + model().string() + " --data " + bad.string()), 4);
}

TEST_F(Cli, OverfitRunScoresPerfectlyOnItsTrainingData) {
  ASSERT_EQ(cli("eval --model " + model().string() + " --data " + data().string()), 0);
  const json j = json::parse(slurp(kRoot / "stdout.txt"));
  EXPECT_EQ(j["metrics"]["f1"], 1.0);
  for (const char* f : {"model.json", "metrics.json", "history.csv", "config.ini", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(run_dir() / f)) << f;
  }
  EXPECT_EQ(line_count(run_dir() / "history.csv"), 61u);
}

TEST_F(Cli, TrainingIsBitReproducible) {
  const std::string args = "train --data " + data().string() + " --epochs 3 --seed 5 --out ";
  ASSERT_EQ(cli(args + (kRoot / "rep_a").string()), 0);
  ASSERT_EQ(cli(args + (kRoot / "rep_b").string()), 0);
  for (const char* f : {"model.json", "metrics.json", "history.csv", "config.ini"}) {
    EXPECT_EQ(slurp(kRoot / "rep_a" / f), slurp(kRoot / "rep_b" / f)) << f;
  }
}

TEST_F(Cli, ConfigFileFlagsWinAndEncodingAblationChangesOneField) {
  const fs::path cfg = kRoot / "run.ini";
  std::ofstream(cfg) << "[model]\nencoding = vanilla\n[cnn]\nfilters = 4\n[run]\nseed = 3\n";
  const std::string base = "train --data " + data().string() + " --epochs 1 --config " + cfg.string();
  ASSERT_EQ(cli(base + " --out " + (kRoot / "abl_v").string()), 0);
  ASSERT_EQ(cli(base + " --encoding faithful --out " + (kRoot / "abl_f").string()), 0);
  const json v = read_json(kRoot / "abl_v" / "manifest.json")["config"];
  const json f = read_json(kRoot / "abl_f" / "manifest.json")["config"];
  EXPECT_EQ(v["cnn.filters"], "4");
  EXPECT_EQ(v["run.seed"], "3");
  EXPECT_EQ(v["model.encoding"], "vanilla");
  EXPECT_EQ(f["model.encoding"], "faithful");
  std::size_t differing = 0;
  for (const auto& [k, val] : v.items()) differing += f[k] != val;
  EXPECT_EQ(differing, 1u);
}

TEST_F(Cli, ConfigViolationStopsBeforeTraining) {
  const fs::path out = kRoot / "bad_config";
  // An 8-dim encoding cannot hold 10 segment positions.
  EXPECT_EQ(cli("train --data " + data().string() + " --set cnn.embed_dim=8 --out " + out.string()), 2);
  EXPECT_FALSE(fs::exists(out / "model.json"));
  EXPECT_EQ(cli("train --data " + data().string() + " --set cnn.nope=1 --out " + out.string()), 2);
}

TEST_F(Cli, CrossValidationEmitsFoldRecords) {
  const fs::path d = kRoot / "cv_data", out = kRoot / "cv_run";
  ASSERT_EQ(cli("gen-data --episodes 40 --seed 2 --out " + d.string()), 0);
  ASSERT_EQ(cli("cv --data " + (d / "data.csv").string() + " --folds 5 --jobs 2 --epochs 1 --out " + out.string()), 0);
  const json j = read_json(out / "cv.json");
  EXPECT_EQ(j["folds"].size(), 5u);
  EXPECT_TRUE(j["mean"].contains("f1"));
  EXPECT_TRUE(j["std"].contains("f1"));
  EXPECT_EQ(read_json(out / "manifest.json")["config"]["cv.folds"], "5");
}

TEST_F(Cli, DiagnoseWritesConservingReports) {
  const fs::path out = kRoot / "diag_point";
  ASSERT_EQ(cli("diagnose --model " + model().string() + " --data " + data().string() + " --episode-id " +
                first_episode("point") + " --out " + out.string()),
            0);
  const json r = read_json(out / "report.json");
  ASSERT_TRUE(r.contains("localization"));
  EXPECT_TRUE(r["localization"].contains("temporal_hit"));
  EXPECT_TRUE(r["localization"].contains("spatial_hit"));
  const auto a = r["a_global"]["values"].get<std::vector<double>>();
  const auto b = r["b_global"]["values"].get<std::vector<double>>();
  const double N = static_cast<double>(a.size()), S = static_cast<double>(b.size());
  EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), N, 1e-8);
  EXPECT_NEAR(std::accumulate(b.begin(), b.end(), 0.0), S, 1e-8);
  const auto bs = r["b_segment"]["values"].get<std::vector<double>>();
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_NEAR(std::accumulate(bs.begin() + t * b.size(), bs.begin() + (t + 1) * b.size(), 0.0), S, 1e-8);
  }
  const auto A = r["A_global"]["values"].get<std::vector<double>>();
  for (std::size_t q = 0; q < a.size(); ++q) {
    EXPECT_NEAR(std::accumulate(A.begin() + q * a.size(), A.begin() + (q + 1) * a.size(), 0.0), 1.0, 1e-8);
  }
  EXPECT_LT(r["conservation_error"].get<double>(), 1e-8);
  for (const char* f : {"a_sensor.csv", "A_global.csv", "b_segment.csv", "B_global.csv", "temporal_attention.csv",
                        "spatial_attention.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }

  const fs::path normal = kRoot / "diag_normal";
  ASSERT_EQ(cli("diagnose --model " + model().string() + " --data " + data().string() + " --episode-id " +
                first_episode("normal") + " --out " + normal.string()),
            0);
  EXPECT_FALSE(read_json(normal / "report.json").contains("localization"));
  EXPECT_EQ(cli("diagnose --model " + model().string() + " --data " + data().string() +
                " --episode-id nobody --out " + normal.string()),
            8);
}

TEST_F(Cli, AtScoreCurves) {
  const fs::path out = kRoot / "at";
  ASSERT_EQ(cli("at-score --model " + model().string() + " --data " + data().string() + " --k 1,5,10,20 --by-class --out " +
                out.string()),
            0);
  const json s = read_json(out / "at_score.json");
  EXPECT_TRUE(s.contains("point"));
  EXPECT_TRUE(s.contains("normal"));
  EXPECT_EQ(s["all"]["k_percent"][0], 0.0);
  EXPECT_EQ(s["all"]["mean"][0], 0.0);
  EXPECT_TRUE(s["point"].contains("median_nondecreasing"));
  // 24 deltas plus mean and median per k, five k values, one header.
  std::ifstream in(out / "at_score.csv");
  std::string line;
  std::size_t all_rows = 0;
  while (std::getline(in, line)) {
    if (line.rfind("all,", 0) == 0) {
      ++all_rows;
      if (line.rfind("all,0,", 0) == 0) EXPECT_EQ(line.substr(line.rfind(',') + 1), "0");
    }
  }
  EXPECT_EQ(all_rows, 5u * 26u);

  json untrained = read_json(model());
  untrained["trained"] = false;
  const fs::path u = kRoot / "untrained.json";
  std::ofstream(u) << untrained.dump();
  EXPECT_EQ(cli("at-score --model " + u.string() + " --data " + data().string() + " --out " + out.string()), 7);
}

TEST_F(Cli, EncodeAnalyze) {
  const fs::path out = kRoot / "enc";
  ASSERT_EQ(cli("encode-analyze --out " + out.string()), 0);
  const std::string bins = slurp(out / "lowpass_bins.csv");
  EXPECT_NE(bins.find("256,10000,103\n"), std::string::npos);
  EXPECT_NE(bins.find("512,10000,245\n"), std::string::npos);

  std::ifstream rec(out / "reconstruction.csv");
  std::string line;
  std::getline(rec, line);
  std::size_t rows = 0;
  while (std::getline(rec, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    EXPECT_NEAR(v[4], v[2], 1e-9);  // faithful reproduces the delta
    ++rows;
  }
  EXPECT_EQ(rows, 3u * 256u);

  // The KDE peak sits in the lowest two bins and g_0 is within 5% of it.
  const json sum = read_json(out / "summary.json");
  EXPECT_LE(sum["vanilla"]["argmax_k"].get<int>(), 1);
  EXPECT_GE(sum["vanilla"]["g0_over_max"].get<double>(), 0.95);
  EXPECT_GE(sum["vanilla"]["mass_k_le_4"].get<double>(), 0.5);
  EXPECT_LT(sum["faithful"]["max_gram_deviation"].get<double>(), 1e-9);

  EXPECT_EQ(cli("encode-analyze --d 255 --out " + out.string()), 2);
}

}  // namespace

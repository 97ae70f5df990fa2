#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dfstrans/train.hpp"
#include "gradcheck.hpp"

namespace dfstrans {
namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.sensors = 3;
  c.segments = 4;
  c.window = 8;
  c.cnn.num_blocks = 2;
  c.cnn.kernel_size = 3;
  c.cnn.filters = 3;
  c.cnn.embed_dim = 8;
  c.ff_dim = 6;
  c.head_hidden = 5;
  c.seed = seed;
  return c;
}

Tensor random_episode(const ModelConfig& c, Rng& rng) {
  Tensor t(Shape{c.sensors, c.segments * c.window});
  for (double& v : t.data()) v = rng.uniform(0.0, 1.0);
  return t;
}

// Episodes whose label is carried by a level shift on every sensor.
Dataset separable_set(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    EpisodeRecord e;
    e.id = std::to_string(i);
    e.label = static_cast<int>(i % 2);
    e.values = Tensor(Shape{c.sensors, c.segments * c.window});
    for (double& v : e.values.data()) v = rng.uniform(0.0, 0.5) + 0.5 * e.label;
    d.push_back(std::move(e));
  }
  return d;
}

TEST(Model, ConfigValidation) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  EXPECT_NO_THROW(ModelConfig::desk().validate());
  ModelConfig c = tiny_config();
  c.threshold = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.cnn.embed_dim = 4;  // not > N_w
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.cnn.embed_dim = 9;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, ProbabilityIsSigmoidOfLogit) {
  const ModelConfig c = tiny_config();
  Model m(c);
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const Prediction p = m.predict(random_episode(c, rng));
    EXPECT_GT(p.probability, 0.0);
    EXPECT_LT(p.probability, 1.0);
    EXPECT_DOUBLE_EQ(p.probability, sigmoid(p.logit));
    EXPECT_EQ(p.label, p.probability >= 0.5 ? 1 : 0);
    EXPECT_EQ(p.attention.temporal.shape(), (Shape{3, 4, 4}));
    EXPECT_EQ(p.attention.spatial.shape(), (Shape{4, 3, 3}));
  }
}

TEST(Model, ZeroFinalLayerGivesOneHalf) {
  const ModelConfig c = tiny_config();
  Model m(c);
  m.head().w2.value.fill(0.0);
  m.head().b2.value.fill(0.0);
  Rng rng(3);
  EXPECT_EQ(m.predict(random_episode(c, rng)).probability, 0.5);
}

TEST(Model, BatchedForwardMatchesSingleEpisodes) {
  const ModelConfig c = tiny_config();
  Model m(c);
  Rng rng(4);
  const Tensor a = random_episode(c, rng), b = random_episode(c, rng);
  Tape tape;
  const auto out = m.forward(tape, m.batch_segments({&a, &b}), false, rng);
  EXPECT_NEAR(out.logits.value()[0], m.predict(a).logit, 1e-12);
  EXPECT_NEAR(out.logits.value()[1], m.predict(b).logit, 1e-12);
}

TEST(Model, WrongEpisodeLengthIsIngestionError) {
  const ModelConfig c = tiny_config();
  Model m(c);
  EXPECT_THROW(m.predict(Tensor(Shape{3, 30})), IngestionError);
  EXPECT_THROW(m.predict(Tensor(Shape{3, 40})), IngestionError);
}

TEST(Model, FullGradientMatchesFiniteDifferences) {
  const ModelConfig c = tiny_config();
  Model m(c);
  Rng rng(5);
  const Tensor a = random_episode(c, rng), b = random_episode(c, rng);
  const Tensor batch = m.batch_segments({&a, &b});
  std::vector<BatchNormStats> saved;
  for (BatchNormStats* s : m.batch_norm_stats()) saved.push_back(*s);
  auto loss = [&](Tape& tape) {
    Rng drop(6);
    const auto out = m.forward(tape, batch, true, drop);
    auto stats = m.batch_norm_stats();
    for (std::size_t i = 0; i < stats.size(); ++i) *stats[i] = saved[i];
    return bce_with_logits(out.logits, {1.0, 0.0});
  };
  Rng pick(7);
  const auto r = testing::gradcheck(m.parameters(), loss, 4, pick);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 100u);
}

TEST(Model, LogitsStayFiniteOnScaledInputs) {
  Model m(ModelConfig::desk());
  Rng rng(8);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(std::isfinite(m.predict(random_episode(m.config(), rng)).logit));
}

TEST(Model, EncodingAblationOnlyChangesTheEncoding) {
  ModelConfig f = tiny_config(9), v = tiny_config(9);
  v.encoding = EncodingKind::Vanilla;
  Model mf(f), mv(v);
  const auto pf = mf.parameters(), pv = mv.parameters();
  ASSERT_EQ(pf.size(), pv.size());
  for (std::size_t i = 0; i < pf.size(); ++i) {
    EXPECT_EQ(pf[i]->name, pv[i]->name);
    EXPECT_EQ(pf[i]->value, pv[i]->value);
  }
  EXPECT_EQ(mf.encoding().shape(), mv.encoding().shape());
  EXPECT_NE(mf.encoding(), mv.encoding());
  Rng rng(10);
  const Tensor x = random_episode(f, rng);
  EXPECT_EQ(mf.batch_segments({&x}), mv.batch_segments({&x}));
}

TEST(Bce, KnownValues) {
  Prediction half;
  half.probability = 0.5;
  EXPECT_NEAR(bce_loss({half}, {1}), 0.693147, 1e-6);
  Prediction zero;
  zero.probability = 0.0;
  EXPECT_LT(bce_loss({zero}, {0}), 1e-11);
  EXPECT_NEAR(bce_loss({zero}, {1}), -std::log(1e-12), 1e-9);
  std::vector<Prediction> ps(3);
  ps[0].probability = 0.9;
  ps[1].probability = 0.2;
  ps[2].probability = 0.6;
  EXPECT_NEAR(bce_loss(ps, {1, 0, 0}), -(std::log(0.9) + std::log(0.8) + std::log(0.4)), 1e-14);
  EXPECT_THROW(bce_loss(ps, {1, 0, 2}), ContractError);
  EXPECT_THROW(bce_loss(ps, {1, 0}), ContractError);
}

TEST(Metrics, DefinitionExamples) {
  const BinaryMetrics all = binary_metrics({1, 0, 1}, {1, 0, 1});
  EXPECT_EQ(all.precision, 1.0);
  EXPECT_EQ(all.recall, 1.0);
  EXPECT_EQ(all.f1, 1.0);
  const BinaryMetrics m = binary_metrics({1, 1}, {1, 0});
  EXPECT_EQ(m.precision, 0.5);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_DOUBLE_EQ(m.f1, 2.0 / 3.0);
  const BinaryMetrics none = binary_metrics({0, 0}, {0, 0});
  EXPECT_TRUE(none.zero_division);
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.f1, 0.0);
}

TEST(Metrics, MatchCountingOracle) {
  Rng rng(11);
  std::vector<int> p(100), y(100);
  for (std::size_t i = 0; i < 100; ++i) {
    p[i] = rng.bernoulli(0.4);
    y[i] = rng.bernoulli(0.3);
  }
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    if (p[i] && y[i]) tp += 1;
    if (p[i] && !y[i]) fp += 1;
    if (!p[i] && y[i]) fn += 1;
  }
  const BinaryMetrics m = binary_metrics(p, y);
  EXPECT_DOUBLE_EQ(m.precision, tp / (tp + fp));
  EXPECT_DOUBLE_EQ(m.recall, tp / (tp + fn));
  EXPECT_DOUBLE_EQ(m.f1, 2 * tp / (2 * tp + fp + fn));
}

TEST(Metrics, RaisingThresholdNeverIncreasesRecall) {
  Rng rng(12);
  std::vector<double> prob(60);
  std::vector<int> y(60);
  for (std::size_t i = 0; i < 60; ++i) {
    prob[i] = rng.uniform(0.0, 1.0);
    y[i] = rng.bernoulli(0.5);
  }
  double prev = 2.0;
  for (double th = 0.05; th < 1.0; th += 0.05) {
    std::vector<int> pred;
    for (double q : prob) pred.push_back(q >= th ? 1 : 0);
    const double r = binary_metrics(pred, y).recall;
    EXPECT_LE(r, prev);
    prev = r;
  }
}

TEST(CrossValidation, SplitsHonourProportionsAndRotate) {
  SyntheticConfig sc;
  sc.seed = 13;
  const Dataset d = generate_synthetic(sc);
  const auto folds = cv_splits(d, 5, 4);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::size_t> tested;
  for (const FoldSplit& f : folds) {
    EXPECT_EQ(f.test.size(), 30u);
    EXPECT_EQ(f.val.size(), 30u);
    EXPECT_EQ(f.train.size(), 140u);
    std::set<std::size_t> all(f.train.begin(), f.train.end());
    all.insert(f.val.begin(), f.val.end());
    all.insert(f.test.begin(), f.test.end());
    EXPECT_EQ(all.size(), 200u);
    std::size_t pos = 0;
    for (std::size_t i : f.test) {
      EXPECT_TRUE(tested.insert(i).second) << "episode " << i << " tested twice";
      pos += d[i].label;
    }
    EXPECT_GE(pos, 8u);
    EXPECT_LE(pos, 10u);
  }
  EXPECT_GE(tested.size(), 150u);
  EXPECT_EQ(cv_splits(d, 5, 4)[2].test, folds[2].test);
}

TEST(CrossValidation, TooSmallDatasetIsConfigError) {
  SyntheticConfig sc;
  sc.episodes = 3;
  EXPECT_THROW(cv_splits(generate_synthetic(sc), 5, 0), ConfigError);
  EXPECT_THROW(cv_splits(generate_synthetic(SyntheticConfig{}), 1, 0), ConfigError);
}

TEST(CrossValidation, MeanAndStd) {
  const auto [m, s] = mean_std({0.5, 0.7, 0.9});
  EXPECT_DOUBLE_EQ(m, 0.7);
  EXPECT_NEAR(s, std::sqrt(0.08 / 3.0), 1e-15);
}

TEST(Training, SameSeedGivesIdenticalParameters) {
  const ModelConfig c = tiny_config(14);
  const Dataset d = separable_set(c, 12, 15);
  TrainConfig tc;
  tc.max_epochs = 2;
  tc.batch_size = 4;
  tc.seed = 16;
  Model a(c), b(c);
  train(a, d, {}, tc);
  train(b, d, {}, tc);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  const ModelConfig c = tiny_config(17);
  Model m(c);
  std::vector<Tensor> before;
  for (const Parameter* p : m.parameters()) before.push_back(p->value);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.max_epochs = 2;
  train(m, separable_set(c, 8, 18), {}, tc);
  const auto after = m.parameters();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i]->value, before[i]);
}

// Epoch losses of the first five epochs, recorded from the first run.
TEST(Training, LossDecreasesOnSeparableData) {
  ModelConfig c = tiny_config(19);
  c.dropout = 0.0;
  Model m(c);
  TrainConfig tc;
  tc.max_epochs = 5;
  tc.batch_size = 8;
  tc.seed = 20;
  const auto h = train(m, separable_set(c, 32, 21), {}, tc);
  ASSERT_EQ(h.epochs.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(h.epochs[e].train_loss, h.epochs[e - 1].train_loss) << e;
}

TEST(Training, DivergenceReportsTheEpoch) {
  const ModelConfig c = tiny_config(22);
  Model m(c);
  m.head().w1.value[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.max_epochs = 1;
  try {
    train(m, separable_set(c, 4, 23), {}, tc);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch(), 0);
    EXPECT_EQ(e.exit_code(), 5);
  }
}

TEST(Training, EarlyStoppingRestoresBestEpoch) {
  const ModelConfig c = tiny_config(24);
  const Dataset d = separable_set(c, 16, 25);
  TrainConfig tc;
  tc.max_epochs = 30;
  tc.patience = 3;
  tc.batch_size = 8;
  Model m(c);
  const auto h = train(m, d, d, tc);
  EXPECT_LE(h.epochs.size(), 30u);
  if (h.stopped_early) EXPECT_EQ(h.epochs.size(), h.best_epoch + 1 + tc.patience);
  EXPECT_DOUBLE_EQ(evaluate(m, d).metrics.f1, h.best_val_f1);
  // F1 ties go to the lower validation loss.
  const EpochRecord& best = h.epochs[h.best_epoch];
  for (const EpochRecord& r : h.epochs) {
    EXPECT_LE(r.val_f1, best.val_f1);
    if (r.val_f1 == best.val_f1) EXPECT_GE(r.val_loss, best.val_loss) << r.epoch;
  }
}

TEST(Training, WeightDecayIsDecoupled) {
  Parameter p{"w", Tensor(Shape{3}, std::vector<double>{1.0, -2.0, 0.5}), Tensor(Shape{3})};
  TrainConfig tc;
  tc.learning_rate = 0.01;
  tc.weight_decay = 0.5;
  Adam adam({&p}, tc);
  adam.step();  // zero gradient: only the decay acts
  EXPECT_DOUBLE_EQ(p.value[0], 0.995);
  EXPECT_DOUBLE_EQ(p.value[1], -1.99);
  tc.weight_decay = -1.0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

}  // namespace
}  // namespace dfstrans

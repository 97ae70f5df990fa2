#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>
#include <vector>

#include "dfstrans/model.hpp"

namespace dfstrans {

struct BinaryMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0, accuracy = 0.0;
  bool zero_division = false;  // set when any ratio had a zero denominator
};

inline BinaryMetrics binary_metrics(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw ContractError("binary_metrics: length mismatch");
  BinaryMetrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if ((predicted[i] != 0 && predicted[i] != 1) || (truth[i] != 0 && truth[i] != 1)) {
      throw ContractError("binary_metrics: labels must be 0 or 1");
    }
    if (predicted[i] == 1) {
      truth[i] == 1 ? ++m.tp : ++m.fp;
    } else {
      truth[i] == 1 ? ++m.fn : ++m.tn;
    }
  }
  auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.zero_division = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  m.accuracy = ratio(m.tp + m.tn, truth.size());
  m.f1 = ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn);
  return m;
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, scaled by the learning rate
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate < 0.0 || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (weight_decay < 0.0 || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be >= 0");
    if (batch_size == 0 || max_epochs == 0) throw ConfigError("batch size and epoch count must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean per-episode BCE
  double val_f1 = 0.0;
  double val_loss = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_f1 = 0.0;
  bool stopped_early = false;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (Parameter* p : params_) {
      m_.push_back(Tensor::zeros_like(p->value));
      v_.push_back(Tensor::zeros_like(p->value));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double shrink = 1.0 - cfg_.learning_rate * cfg_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i]->value.data();
      auto g = params_[i]->grad.data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] = shrink * w[j] - cfg_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.adam_eps);
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// Eval-mode logits for a whole dataset, batched.
inline std::vector<double> predict_logits(Model& model, const Dataset& data, std::size_t batch = 32) {
  std::vector<double> out;
  out.reserve(data.size());
  Rng rng(0);
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<const Tensor*> eps;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) eps.push_back(&data[i].values);
    Tape tape;
    auto fwd = model.forward(tape, model.batch_segments(eps), false, rng);
    for (double v : fwd.logits.value().data()) {
      if (!std::isfinite(v)) throw NumericError("model produced a non-finite logit");
      out.push_back(v);
    }
  }
  return out;
}

struct Evaluation {
  BinaryMetrics metrics;
  double loss = 0.0;  // mean per-episode BCE
  std::vector<double> probabilities;
};

inline Evaluation evaluate(Model& model, const Dataset& data) {
  Evaluation ev;
  std::vector<int> pred, truth;
  for (double z : predict_logits(model, data)) ev.probabilities.push_back(sigmoid(z));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double p = std::clamp(ev.probabilities[i], 1e-12, 1.0 - 1e-12);
    const int y = data[i].label;
    ev.loss -= y * std::log(p) + (1 - y) * std::log(1.0 - p);
    pred.push_back(ev.probabilities[i] >= model.config().threshold ? 1 : 0);
    truth.push_back(y);
  }
  if (!data.empty()) ev.loss /= static_cast<double>(data.size());
  ev.metrics = binary_metrics(pred, truth);
  return ev;
}

namespace detail {

struct ModelState {
  std::vector<Tensor> values;
  std::vector<BatchNormStats> stats;
};

inline ModelState snapshot(Model& m) {
  ModelState s;
  for (Parameter* p : m.parameters()) s.values.push_back(p->value);
  for (BatchNormStats* b : m.batch_norm_stats()) s.stats.push_back(*b);
  return s;
}

inline void restore(Model& m, const ModelState& s) {
  auto ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = s.values[i];
  auto bs = m.batch_norm_stats();
  for (std::size_t i = 0; i < bs.size(); ++i) *bs[i] = s.stats[i];
}

}  // namespace detail

/// Minibatch Adam on summed BCE. Keeps the parameters from the epoch with the
/// best validation F1 (lower validation loss on ties); stops after `patience` epochs
/// without improvement. An empty validation set disables early stopping.
inline TrainHistory train(Model& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  std::vector<Parameter*> params = model.parameters();
  Adam adam(params, cfg);
  Rng order_rng(derive_seed(cfg.seed, 11));
  Rng dropout_rng(derive_seed(cfg.seed, 12));
  TrainHistory hist;
  detail::ModelState best = detail::snapshot(model);
  bool have_best = false;
  double best_loss = 0.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Tensor*> eps;
      std::vector<double> labels;
      for (std::size_t i = start; i < end; ++i) {
        eps.push_back(&train_set[order[i]].values);
        labels.push_back(train_set[order[i]].label);
      }
      for (Parameter* p : params) p->zero_grad();
      const Tensor batch = model.batch_segments(eps);
      Tape tape;
      double lv = 0.0;
      try {
        auto fwd = model.forward(tape, batch, true, dropout_rng);
        Var loss = bce_with_logits(fwd.logits, labels);
        lv = loss.value().item();
        if (!std::isfinite(lv)) throw NumericError("loss is " + std::to_string(lv));
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), static_cast<int>(epoch));
      }
      for (Parameter* p : params)
        for (double g : p->grad.data())
          if (!std::isfinite(g)) throw TrainingError("gradient became non-finite", static_cast<int>(epoch));
      adam.step();
      total += lv;
    }
    EpochRecord rec{epoch, total / static_cast<double>(train_set.size()), 0.0, 0.0};
    if (!val_set.empty()) {
      const Evaluation ev = evaluate(model, val_set);
      rec.val_f1 = ev.metrics.f1;
      rec.val_loss = ev.loss;
    }
    hist.epochs.push_back(rec);
    if (val_set.empty()) continue;
    if (!have_best || rec.val_f1 > hist.best_val_f1 || (rec.val_f1 == hist.best_val_f1 && rec.val_loss < best_loss)) {
      have_best = true;
      hist.best_val_f1 = rec.val_f1;
      best_loss = rec.val_loss;
      hist.best_epoch = epoch;
      best = detail::snapshot(model);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      hist.stopped_early = true;
      break;
    }
  }
  if (have_best) {
    detail::restore(model, best);
  } else {
    hist.best_epoch = hist.epochs.size() - 1;
  }
  return hist;
}

struct FoldSplit {
  std::vector<std::size_t> train, val, test;
};

namespace detail {

// Shuffles each class and interleaves them by fractional position, so every
// contiguous block of the result is close to stratified.
inline std::vector<std::size_t> stratified_order(const Dataset& data, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < data.size(); ++i) (data[i].label == 1 ? pos : neg).push_back(i);
  Rng rng(derive_seed(seed, 21));
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t i = 0; i < pos.size(); ++i) keyed.emplace_back((i + 0.5) / pos.size(), pos[i]);
  for (std::size_t i = 0; i < neg.size(); ++i) keyed.emplace_back((i + 0.5) / neg.size(), neg[i]);
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> out;
  for (const auto& kv : keyed) out.push_back(kv.second);
  return out;
}

}  // namespace detail

/// k splits with 70/15/15 proportions over the stratified order; fold f tests
/// on the block starting at round(f*n/k) and validates on the next one.
inline std::vector<FoldSplit> cv_splits(const Dataset& data, std::size_t k, std::uint64_t seed) {
  const std::size_t n = data.size();
  if (k < 2) throw ConfigError("cross-validation needs at least 2 folds");
  const std::size_t block = static_cast<std::size_t>(std::lround(0.15 * static_cast<double>(n)));
  if (block == 0 || n < k || 2 * block >= n) {
    throw ConfigError("dataset of " + std::to_string(n) + " episodes is too small for " + std::to_string(k) +
                      "-fold 70/15/15 cross-validation");
  }
  const std::vector<std::size_t> order = detail::stratified_order(data, seed);

  std::vector<FoldSplit> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t start = static_cast<std::size_t>(std::lround(static_cast<double>(f * n) / k));
    std::vector<int> role(n, 0);  // 0 train, 1 val, 2 test
    for (std::size_t i = 0; i < block; ++i) {
      role[(start + i) % n] = 2;
      role[(start + block + i) % n] = 1;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t e = order[i];
      (role[i] == 2 ? folds[f].test : role[i] == 1 ? folds[f].val : folds[f].train).push_back(e);
    }
  }
  return folds;
}

/// Single stratified train/validation split; `test` stays empty.
inline FoldSplit holdout_split(const Dataset& data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  const std::size_t nv = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(data.size())));
  if (nv >= data.size()) throw ConfigError("validation split leaves no training episodes");
  const std::vector<std::size_t> order = detail::stratified_order(data, seed);
  FoldSplit s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nv));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(nv), order.end());
  return s;
}

struct FoldResult {
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  BinaryMetrics metrics;
  TrainHistory history;
};

struct CvReport {
  std::vector<FoldResult> folds;
  double mean_f1 = 0.0, std_f1 = 0.0;
  double mean_precision = 0.0, mean_recall = 0.0;
};

inline Dataset subset(const Dataset& data, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(data[i]);
  return out;
}

/// Trains and tests one fold. The scaler is fit on the fold's training part.
inline FoldResult run_fold(const Dataset& data, const FoldSplit& split, ModelConfig mcfg, TrainConfig tcfg,
                           std::size_t fold, std::uint64_t master_seed) {
  FoldResult r;
  r.fold = fold;
  r.seed = derive_seed(master_seed, 100 + fold);
  mcfg.seed = r.seed;
  tcfg.seed = derive_seed(r.seed, 1);
  const Dataset raw_train = subset(data, split.train);
  const ScalerState scaler = fit_scaler(raw_train);
  const Dataset tr = apply_scaler(scaler, raw_train);
  const Dataset va = apply_scaler(scaler, subset(data, split.val));
  const Dataset te = apply_scaler(scaler, subset(data, split.test));
  Model model(mcfg);
  r.history = train(model, tr, va, tcfg);
  r.metrics = evaluate(model, te).metrics;
  return r;
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

/// Folds are independent; `jobs` > 1 runs them on separate threads with
/// bit-identical results.
inline CvReport cross_validate(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                               std::size_t k = 5, std::uint64_t seed = 0, std::size_t jobs = 1) {
  mcfg.validate();
  tcfg.validate();
  const std::vector<FoldSplit> splits = cv_splits(data, k, seed);
  CvReport rep;
  rep.folds.resize(k);
  jobs = std::clamp<std::size_t>(jobs, 1, k);
  if (jobs == 1) {
    for (std::size_t f = 0; f < k; ++f) rep.folds[f] = run_fold(data, splits[f], mcfg, tcfg, f, seed);
  } else {
    std::vector<std::exception_ptr> errors(k);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t f = w; f < k; f += jobs) {
          try {
            rep.folds[f] = run_fold(data, splits[f], mcfg, tcfg, f, seed);
          } catch (...) {
            errors[f] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<double> f1, pr, rc;
  for (const FoldResult& r : rep.folds) {
    f1.push_back(r.metrics.f1);
    pr.push_back(r.metrics.precision);
    rc.push_back(r.metrics.recall);
  }
  std::tie(rep.mean_f1, rep.std_f1) = mean_std(f1);
  rep.mean_precision = mean_std(pr).first;
  rep.mean_recall = mean_std(rc).first;
  return rep;
}

}  // namespace dfstrans

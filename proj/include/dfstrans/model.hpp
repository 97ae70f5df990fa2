#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dfstrans/data.hpp"
#include "dfstrans/encoding.hpp"
#include "dfstrans/feature_cnn.hpp"
#include "dfstrans/st_attention.hpp"

namespace dfstrans {

struct ModelConfig {
  std::size_t sensors = 8;   // S
  std::size_t segments = 80;  // N_w
  std::size_t window = 100;   // w_l
  EncodingKind encoding = EncodingKind::Faithful;
  double rho = 10000.0;
  CnnConfig cnn;  // cnn.embed_dim is M
  std::size_t ff_dim = 2048;
  std::size_t heads = 1;
  std::size_t head_hidden = 512;
  double dropout = 0.1;
  double threshold = 0.5;
  LengthPolicy length_policy = LengthPolicy::Reject;
  std::uint64_t seed = 0;

  std::size_t embed_dim() const noexcept { return cnn.embed_dim; }

  StLayerConfig st_layer() const { return {cnn.embed_dim, ff_dim, heads, dropout}; }

  EncodingSpec encoding_spec() const { return {cnn.embed_dim, encoding, rho}; }

  void validate() const {
    if (sensors == 0 || segments == 0 || window == 0 || head_hidden == 0) {
      throw ConfigError("model sizes must be positive");
    }
    cnn.validate(window);
    st_layer().validate();
    if (cnn.embed_dim % 2 != 0) throw ConfigError("embedding dimension M must be even");
    encoding_spec().validate_for_length(segments);
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("classification threshold must lie in (0, 1)");
  }

  /// Small configuration that trains in minutes on one CPU core. One CNN is
  /// shared by all sensors: with a few hundred episodes each per-sensor CNN
  /// sees only a handful of spikes and memorizes noise instead.
  static ModelConfig desk(std::size_t sensors = 8, std::size_t segments = 10, std::size_t window = 50) {
    ModelConfig c;
    c.sensors = sensors;
    c.segments = segments;
    c.window = window;
    c.cnn.filters = 16;
    c.cnn.shared_weights = true;
    c.cnn.embed_dim = 32;
    c.ff_dim = 64;
    c.head_hidden = 32;
    return c;
  }
};

struct HeadParams {
  Parameter w1, b1;  // [S*M, hidden], [hidden]
  Parameter w2, b2;  // [hidden, 1], [1]
};

struct Prediction {
  double logit = 0.0;
  double probability = 0.5;
  int label = 0;
  AttentionMaps attention;
};

/// Feature CNN -> positional encoding -> spatio-temporal layer ->
/// sensor-flatten, temporal average pooling -> FC+ReLU+dropout -> FC logit.
class Model {
 public:
  Model() = default;

  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, 0x5eed));
    cnn_ = FeatureCnn(cfg.sensors, cfg.window, cfg.cnn, rng);
    st_ = init_st_layer(cfg.st_layer(), rng);
    const std::size_t flat = cfg.sensors * cfg.embed_dim();
    head_.w1 = detail::uniform_parameter("head.fc1.weight", {flat, cfg.head_hidden},
                                         std::sqrt(1.0 / static_cast<double>(flat)), rng);
    head_.b1 = detail::constant_parameter("head.fc1.bias", {cfg.head_hidden}, 0.0);
    head_.w2 = detail::uniform_parameter("head.fc2.weight", {cfg.head_hidden, 1},
                                         std::sqrt(1.0 / static_cast<double>(cfg.head_hidden)), rng);
    head_.b2 = detail::constant_parameter("head.fc2.bias", {1}, 0.0);
    encoding_ = encoding_table(cfg.segments, cfg.encoding_spec());
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  FeatureCnn& cnn() noexcept { return cnn_; }
  const FeatureCnn& cnn() const noexcept { return cnn_; }
  StLayerParams& st_layer() noexcept { return st_; }
  HeadParams& head() noexcept { return head_; }
  const Tensor& encoding() const noexcept { return encoding_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps = cnn_.parameters();
    for (Parameter* p : st_.parameters()) ps.push_back(p);
    ps.insert(ps.end(), {&head_.w1, &head_.b1, &head_.w2, &head_.b2});
    return ps;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
    return out;
  }

  std::vector<BatchNormStats*> batch_norm_stats() {
    std::vector<BatchNormStats*> out;
    for (SensorHead& h : cnn_.heads())
      for (ConvBlock& b : h.blocks) out.push_back(&b.stats);
    return out;
  }

  /// Segments every episode into [B*N_w, S, w_l], applying the length policy.
  Tensor batch_segments(const std::vector<const Tensor*>& episodes) const {
    const std::size_t S = cfg_.sensors, N = cfg_.segments, W = cfg_.window;
    Tensor out(Shape{episodes.size() * N, S, W});
    for (std::size_t b = 0; b < episodes.size(); ++b) {
      const Tensor seg = segment(*episodes[b], W, cfg_.length_policy);
      if (seg.dim(0) != N || seg.dim(1) != S) {
        throw IngestionError("episode yields " + std::to_string(seg.dim(0)) + " segments of " +
                             std::to_string(seg.dim(1)) + " sensors; model expects " + std::to_string(N) + " x " +
                             std::to_string(S));
      }
      std::copy(seg.data().begin(), seg.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(b * N * S * W));
    }
    return out;
  }

  struct Output {
    Var logits;     // [B]
    Var temporal;   // [B*S*h, N_w, N_w]
    Var spatial;    // [B*N_w*h, S, S]
    Var embedding;  // [B, N_w, S, M] after encoding, before attention
  };

  Output forward(Tape& tape, const Tensor& segments, bool train, Rng& rng,
                 const AttentionMasks* masks = nullptr) {
    const std::size_t S = cfg_.sensors, N = cfg_.segments, M = cfg_.embed_dim();
    if (segments.rank() != 3 || segments.dim(0) % N != 0) {
      throw DimensionError("forward expects [B*N_w,S,w_l], got " + shape_str(segments.shape()));
    }
    const std::size_t B = segments.dim(0) / N;
    Var x = reshape(cnn_.extract(tape, segments, train), {B, N, S, M});
    Tensor pe(Shape{B, N, S, M});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t s = 0; s < S; ++s)
          std::copy_n(encoding_.data().begin() + static_cast<std::ptrdiff_t>(t * M), M,
                      pe.data().begin() + static_cast<std::ptrdiff_t>(((b * N + t) * S + s) * M));
    x = add(x, tape.constant(std::move(pe)));
    StLayerOutput st = st_layer_forward(tape, x, st_, cfg_.st_layer(), train, rng, masks);
    Var pooled = mean(reshape(st.output, {B, N, S * M}), 1);
    Var hidden = dropout(relu(linear(pooled, tape.parameter(head_.w1), tape.parameter(head_.b1))), cfg_.dropout,
                         rng, train);
    Var logits = reshape(linear(hidden, tape.parameter(head_.w2), tape.parameter(head_.b2)), {B});
    return {logits, st.temporal, st.spatial, x};
  }

  /// Eval-mode prediction for one episode [S, T].
  Prediction predict(const Tensor& values, const AttentionMasks* masks = nullptr) {
    Tape tape;
    Rng rng(0);
    const Tensor seg = batch_segments({&values});
    Output out = forward(tape, seg, false, rng, masks);
    Prediction p;
    p.logit = out.logits.value()[0];
    if (!std::isfinite(p.logit)) throw NumericError("model produced a non-finite logit");
    p.probability = sigmoid(p.logit);
    p.label = p.probability >= cfg_.threshold ? 1 : 0;
    p.attention = extract_attention_maps(out.temporal.value(), out.spatial.value(), 0, cfg_.sensors,
                                         cfg_.segments, cfg_.heads);
    return p;
  }

 private:
  ModelConfig cfg_;
  FeatureCnn cnn_;
  StLayerParams st_;
  HeadParams head_;
  Tensor encoding_;
};

/// Summed binary cross-entropy over predictions, probabilities clamped to
/// [eps, 1 - eps].
inline double bce_loss(const std::vector<Prediction>& preds, const std::vector<int>& labels, double eps = 1e-12) {
  if (preds.size() != labels.size()) throw ContractError("bce_loss: predictions and labels differ in length");
  double loss = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("bce_loss: label must be 0 or 1");
    const double p = std::clamp(preds[i].probability, eps, 1.0 - eps);
    loss -= labels[i] * std::log(p) + (1 - labels[i]) * std::log(1.0 - p);
  }
  return loss;
}

}  // namespace dfstrans

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dfstrans/ops.hpp"

namespace dfstrans {

struct CnnConfig {
  std::size_t num_blocks = 4;
  std::size_t kernel_size = 5;
  std::size_t filters = 32;
  std::size_t pool_size = 2;
  std::size_t pool_stride = 2;
  std::size_t embed_dim = 240;
  Padding padding = Padding::Zeros;
  bool shared_weights = false;  // one head applied to every sensor

  /// Time length left after all pooling stages, or 0 if a stage cannot fit.
  std::size_t output_length(std::size_t window) const {
    std::size_t len = window;
    for (std::size_t b = 0; b < num_blocks; ++b) {
      if (len < pool_size) return 0;
      len = (len - pool_size) / pool_stride + 1;
    }
    return len;
  }

  void validate(std::size_t window) const {
    if (num_blocks == 0 || kernel_size == 0 || filters == 0 || pool_size == 0 || pool_stride == 0 ||
        embed_dim == 0) {
      throw ConfigError("CNN sizes must be positive");
    }
    if (output_length(window) == 0) {
      throw ConfigError("pooling " + std::to_string(num_blocks) + " times collapses window length " +
                        std::to_string(window) + " to zero");
    }
  }
};

struct ConvBlock {
  Parameter weight;  // [filters, in_channels, kernel]
  Parameter bias;    // [filters]
  Parameter gamma;   // batch-norm gain
  Parameter beta;    // batch-norm bias
  BatchNormStats stats;
};

/// One sensor's convolutional stack and final projection to the embedding.
struct SensorHead {
  std::vector<ConvBlock> blocks;
  Parameter proj_weight;  // [filters * out_len, embed_dim]
  Parameter proj_bias;    // [embed_dim]
};

namespace detail {

inline Parameter uniform_parameter(std::string name, Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  Parameter p{std::move(name), std::move(t), {}};
  p.zero_grad();
  return p;
}

inline Parameter constant_parameter(std::string name, Shape shape, double value) {
  Parameter p{std::move(name), Tensor(std::move(shape), value), {}};
  p.zero_grad();
  return p;
}

}  // namespace detail

/// Multi-head 1D CNN: an independent convolutional head per sensor maps each
/// raw segment row of length w_l to an M-dimensional embedding.
///
/// Block order is conv (same padding) -> max-pool -> ReLU -> batch-norm.
/// Batch-norm normalizes each channel over (segments in the batch x time).
class FeatureCnn {
 public:
  FeatureCnn() = default;

  FeatureCnn(std::size_t sensors, std::size_t window, const CnnConfig& config, Rng& rng)
      : config_(config), window_(window) {
    config.validate(window);
    const std::size_t out_len = config.output_length(window);
    sensors_ = sensors;
    const std::size_t n_heads = config.shared_weights ? 1 : sensors;
    for (std::size_t s = 0; s < n_heads; ++s) {
      SensorHead head;
      std::size_t in_channels = 1;
      for (std::size_t b = 0; b < config.num_blocks; ++b) {
        const std::string prefix = "cnn.s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
        const double bound = std::sqrt(1.0 / static_cast<double>(in_channels * config.kernel_size));
        ConvBlock block{
            detail::uniform_parameter(prefix + "conv.weight", {config.filters, in_channels, config.kernel_size},
                                      bound, rng),
            detail::constant_parameter(prefix + "conv.bias", {config.filters}, 0.0),
            detail::constant_parameter(prefix + "bn.gamma", {config.filters}, 1.0),
            detail::constant_parameter(prefix + "bn.beta", {config.filters}, 0.0),
            BatchNormStats{Tensor(Shape{config.filters}, 0.0), Tensor(Shape{config.filters}, 1.0)}};
        head.blocks.push_back(std::move(block));
        in_channels = config.filters;
      }
      const std::size_t flat = config.filters * out_len;
      const std::string prefix = "cnn.s" + std::to_string(s) + ".proj.";
      head.proj_weight = detail::uniform_parameter(prefix + "weight", {flat, config.embed_dim},
                                                   std::sqrt(1.0 / static_cast<double>(flat)), rng);
      head.proj_bias = detail::constant_parameter(prefix + "bias", {config.embed_dim}, 0.0);
      heads_.push_back(std::move(head));
    }
  }

  std::size_t sensors() const noexcept { return sensors_; }
  std::size_t window() const noexcept { return window_; }
  const CnnConfig& config() const noexcept { return config_; }
  std::vector<SensorHead>& heads() noexcept { return heads_; }
  const std::vector<SensorHead>& heads() const noexcept { return heads_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (SensorHead& h : heads_) {
      for (ConvBlock& b : h.blocks) {
        ps.insert(ps.end(), {&b.weight, &b.bias, &b.gamma, &b.beta});
      }
      ps.insert(ps.end(), {&h.proj_weight, &h.proj_bias});
    }
    return ps;
  }

  /// segments [N, S, w_l] -> embeddings [N, S, M]. Train mode updates the
  /// batch-norm running statistics.
  Var extract(Tape& tape, const Tensor& segments, bool train) {
    if (segments.rank() != 3 || segments.dim(1) != sensors_ || segments.dim(2) != window_) {
      throw DimensionError("feature CNN expects [N," + std::to_string(sensors_) + "," +
                           std::to_string(window_) + "], got " + shape_str(segments.shape()));
    }
    const std::size_t n = segments.dim(0);
    if (config_.shared_weights) {
      // Every sensor row becomes its own sample for the single head.
      Var y = extract_sensor(tape, 0, tape.constant(segments.reshaped({n * sensors_, 1, window_})), train);
      return reshape(y, {n, sensors_, config_.embed_dim});
    }
    std::vector<Var> rows;
    rows.reserve(sensors_);
    for (std::size_t s = 0; s < sensors_; ++s) {
      Tensor slice(Shape{n, 1, window_});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < window_; ++t) slice(i, 0, t) = segments(i, s, t);
      rows.push_back(extract_sensor(tape, s, tape.constant(std::move(slice)), train));
    }
    return stack(rows, 1);
  }

  /// Convenience overload for a single S x w_l segment; returns S x M.
  Tensor extract(const Tensor& segment, bool train) {
    if (segment.rank() != 2) throw DimensionError("segment must be S x w_l, got " + shape_str(segment.shape()));
    Tape tape;
    const Tensor batched = segment.reshaped({1, segment.dim(0), segment.dim(1)});
    return extract(tape, batched, train).value().reshaped({segment.dim(0), config_.embed_dim});
  }

 private:
  Var extract_sensor(Tape& tape, std::size_t s, Var x, bool train) {
    SensorHead& h = heads_[s];
    for (ConvBlock& b : h.blocks) {
      x = conv1d(x, tape.parameter(b.weight), tape.parameter(b.bias), config_.padding);
      x = max_pool1d(x, config_.pool_size, config_.pool_stride);
      x = relu(x);
      x = batch_norm(x, tape.parameter(b.gamma), tape.parameter(b.beta), b.stats, train);
    }
    const std::size_t n = x.shape()[0];
    x = reshape(x, {n, x.value().size() / n});
    return linear(x, tape.parameter(h.proj_weight), tape.parameter(h.proj_bias));
  }

  CnnConfig config_;
  std::size_t window_ = 0;
  std::size_t sensors_ = 0;
  std::vector<SensorHead> heads_;
};

}  // namespace dfstrans

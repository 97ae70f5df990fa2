#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dfstrans/feature_cnn.hpp"
#include "dfstrans/ops.hpp"

// Factorized spatio-temporal dependency layer.
//
// Embeddings are laid out as X[B, N_w, S, M]. The temporal branch attends
// over segments independently per sensor; the spatial branch attends over
// sensors independently per segment. Each attention row is a transition
// distribution: A[s](q, k) = p(k | q, s) over segments, B[tau](q, k) = p(k | q, tau)
// over sensors, with log-probability (x_q W_Q) . (x_k W_K) / sqrt(M) + const.

namespace dfstrans {

struct StLayerConfig {
  std::size_t embed_dim = 240;
  std::size_t ff_dim = 2048;
  std::size_t heads = 1;
  double dropout = 0.1;

  void validate() const {
    if (embed_dim == 0 || ff_dim == 0 || heads == 0) throw ConfigError("attention sizes must be positive");
    if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by the head count");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  }
};

struct AttentionBranch {
  Parameter wq;  // [M, M]
  Parameter wk;
  Parameter wv;
};

struct StLayerParams {
  AttentionBranch temporal;
  AttentionBranch spatial;
  Parameter fuse_gain, fuse_bias;  // shared by both branch residuals
  Parameter out_gain, out_bias;    // after the feed-forward block
  Parameter w1, b1;                // [M, d_ff], [d_ff]
  Parameter w2, b2;                // [d_ff, M], [M]

  std::vector<Parameter*> parameters() {
    return {&temporal.wq, &temporal.wk, &temporal.wv, &spatial.wq, &spatial.wk, &spatial.wv,
            &fuse_gain,   &fuse_bias,   &out_gain,    &out_bias,   &w1,         &b1,
            &w2,          &b2};
  }
};

inline StLayerParams init_st_layer(const StLayerConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t m = cfg.embed_dim, f = cfg.ff_dim;
  const double bm = std::sqrt(1.0 / static_cast<double>(m));
  const double bf = std::sqrt(1.0 / static_cast<double>(f));
  auto branch = [&](const std::string& p) {
    return AttentionBranch{detail::uniform_parameter(p + ".wq", {m, m}, bm, rng),
                           detail::uniform_parameter(p + ".wk", {m, m}, bm, rng),
                           detail::uniform_parameter(p + ".wv", {m, m}, bm, rng)};
  };
  StLayerParams p;
  p.temporal = branch("st.temporal");
  p.spatial = branch("st.spatial");
  p.fuse_gain = detail::constant_parameter("st.fuse_norm.gain", {m}, 1.0);
  p.fuse_bias = detail::constant_parameter("st.fuse_norm.bias", {m}, 0.0);
  p.out_gain = detail::constant_parameter("st.out_norm.gain", {m}, 1.0);
  p.out_bias = detail::constant_parameter("st.out_norm.bias", {m}, 0.0);
  p.w1 = detail::uniform_parameter("st.ffn.w1", {m, f}, bm, rng);
  p.b1 = detail::constant_parameter("st.ffn.b1", {f}, 0.0);
  p.w2 = detail::uniform_parameter("st.ffn.w2", {f, m}, bf, rng);
  p.b2 = detail::constant_parameter("st.ffn.b2", {m}, 0.0);
  return p;
}

/// Multiplicative masks applied to the post-softmax attention weights (no
/// renormalization). Shapes match the attention Vars returned by the layer.
struct AttentionMasks {
  std::optional<Tensor> temporal;
  std::optional<Tensor> spatial;
};

struct AttentionResult {
  Var output;     // [B, N_w, S, M]
  Var attention;  // temporal: [B*S*h, N_w, N_w]; spatial: [B*N_w*h, S, S]
};

namespace detail {

// Attention over axis 1 of x[G, N, M] with `heads` heads. Returns the
// attended values [G, N, M] and the weights [G*h, N, N].
inline AttentionResult grouped_attention(Tape& tape, const Var& x, AttentionBranch& branch, std::size_t heads,
                                         const std::optional<Tensor>& mask) {
  const std::size_t G = x.shape()[0], N = x.shape()[1], M = x.shape()[2];
  const std::size_t dh = M / heads;
  Var q = matmul(x, tape.parameter(branch.wq));
  Var k = matmul(x, tape.parameter(branch.wk));
  Var v = matmul(x, tape.parameter(branch.wv));
  auto split = [&](const Var& t) {
    if (heads == 1) return t;
    return reshape(permute(reshape(t, {G, N, heads, dh}), {0, 2, 1, 3}), {G * heads, N, dh});
  };
  q = split(q);
  k = split(k);
  v = split(v);
  Var a = softmax_rows(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask) {
    if (mask->shape() != a.shape()) {
      throw DimensionError("attention mask " + shape_str(mask->shape()) + " does not match weights " +
                           shape_str(a.shape()));
    }
    a = mul(a, tape.constant(*mask));
  }
  Var out = bmm(a, v);
  if (heads > 1) out = reshape(permute(reshape(out, {G, heads, N, dh}), {0, 2, 1, 3}), {G, N, M});
  return {out, a};
}

}  // namespace detail

/// Per-sensor attention over segments: X[B,N_w,S,M] -> (X_hat, A).
inline AttentionResult temporal_attention(Tape& tape, const Var& x, StLayerParams& params, std::size_t heads = 1,
                                          const std::optional<Tensor>& mask = std::nullopt) {
  const Shape s = x.shape();
  if (s.size() != 4) throw DimensionError("temporal_attention expects [B,N_w,S,M], got " + shape_str(s));
  const std::size_t B = s[0], N = s[1], S = s[2], M = s[3];
  Var per_sensor = reshape(permute(x, {0, 2, 1, 3}), {B * S, N, M});
  AttentionResult r = detail::grouped_attention(tape, per_sensor, params.temporal, heads, mask);
  r.output = permute(reshape(r.output, {B, S, N, M}), {0, 2, 1, 3});
  return r;
}

/// Per-segment attention over sensors: X[B,N_w,S,M] -> (X_bar, B).
inline AttentionResult spatial_attention(Tape& tape, const Var& x, StLayerParams& params, std::size_t heads = 1,
                                         const std::optional<Tensor>& mask = std::nullopt) {
  const Shape s = x.shape();
  if (s.size() != 4) throw DimensionError("spatial_attention expects [B,N_w,S,M], got " + shape_str(s));
  const std::size_t B = s[0], N = s[1], S = s[2], M = s[3];
  AttentionResult r = detail::grouped_attention(tape, reshape(x, {B * N, S, M}), params.spatial, heads, mask);
  r.output = reshape(r.output, {B, N, S, M});
  return r;
}

/// X <- LN(X + Drop(X_hat)) + LN(X + Drop(X_bar));
/// X <- LN(X + Drop(ReLU(X W1 + b1) W2 + b2)).
inline Var fuse_and_ffn(Tape& tape, const Var& x, const Var& x_hat, const Var& x_bar, StLayerParams& p,
                        double dropout_rate, bool train, Rng& rng) {
  Var fg = tape.parameter(p.fuse_gain), fb = tape.parameter(p.fuse_bias);
  Var h = add(layer_norm(add(x, dropout(x_hat, dropout_rate, rng, train)), fg, fb),
              layer_norm(add(x, dropout(x_bar, dropout_rate, rng, train)), fg, fb));
  Var ff = linear(relu(linear(h, tape.parameter(p.w1), tape.parameter(p.b1))), tape.parameter(p.w2),
                  tape.parameter(p.b2));
  return layer_norm(add(h, dropout(ff, dropout_rate, rng, train)), tape.parameter(p.out_gain),
                    tape.parameter(p.out_bias));
}

struct StLayerOutput {
  Var output;
  Var temporal;
  Var spatial;
};

inline StLayerOutput st_layer_forward(Tape& tape, const Var& x, StLayerParams& p, const StLayerConfig& cfg,
                                      bool train, Rng& rng, const AttentionMasks* masks = nullptr) {
  AttentionResult t = temporal_attention(tape, x, p, cfg.heads, masks ? masks->temporal : std::nullopt);
  AttentionResult s = spatial_attention(tape, x, p, cfg.heads, masks ? masks->spatial : std::nullopt);
  return {fuse_and_ffn(tape, x, t.output, s.output, p, cfg.dropout, train, rng), t.attention, s.attention};
}

/// Max |x^T (W_Q W_K^T) x' - (x W_Q).(x' W_K)| / sqrt(M) over random pairs,
/// for both branches.
inline double quadratic_form_equivalence_check(const StLayerParams& p, Rng& rng, std::size_t pairs = 100) {
  double worst = 0.0;
  for (const AttentionBranch* br : {&p.temporal, &p.spatial}) {
    const Tensor& wq = br->wq.value;
    const Tensor& wk = br->wk.value;
    const std::size_t m = wq.dim(0), r = wq.dim(1);
    Tensor h(Shape{m, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double v = 0.0;
        for (std::size_t c = 0; c < r; ++c) v += wq(i, c) * wk(j, c);
        h(i, j) = v;
      }
    const double scale = 1.0 / std::sqrt(static_cast<double>(m));
    std::vector<double> x(m), y(m);
    for (std::size_t n = 0; n < pairs; ++n) {
      for (std::size_t i = 0; i < m; ++i) {
        x[i] = rng.normal();
        y[i] = rng.normal();
      }
      double quad = 0.0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) quad += x[i] * h(i, j) * y[j];
      double factored = 0.0;
      for (std::size_t c = 0; c < r; ++c) {
        double qx = 0.0, ky = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          qx += x[i] * wq(i, c);
          ky += y[i] * wk(i, c);
        }
        factored += qx * ky;
      }
      worst = std::max(worst, std::abs(quad - factored) * scale);
    }
  }
  return worst;
}

/// Per-episode attention tensors for diagnostics, averaged over heads.
struct AttentionMaps {
  Tensor temporal;  // [S, N_w, N_w], row tau' of sensor s is p(. | tau', s)
  Tensor spatial;   // [N_w, S, S], row s' of segment tau is p(. | s', tau)

  std::size_t sensors() const { return temporal.dim(0); }
  std::size_t segments() const { return temporal.dim(1); }
};

/// Slices episode `b` out of batched attention weights.
inline AttentionMaps extract_attention_maps(const Tensor& temporal, const Tensor& spatial, std::size_t b,
                                            std::size_t sensors, std::size_t segments, std::size_t heads) {
  const std::size_t S = sensors, N = segments;
  AttentionMaps maps{Tensor(Shape{S, N, N}), Tensor(Shape{N, S, S})};
  const double w = 1.0 / static_cast<double>(heads);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t g = (b * S + s) * heads + h;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) maps.temporal(s, i, j) += w * temporal(g, i, j);
    }
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t g = (b * N + t) * heads + h;
      for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) maps.spatial(t, i, j) += w * spatial(g, i, j);
    }
  return maps;
}

}  // namespace dfstrans

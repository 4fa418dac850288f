#pragma once

// Missing-aware representation block: temporal attention with an
// observation bias, CLS-queried variable attention, and a position-wise
// feed-forward. Each sublayer is post-norm: LayerNorm(x + Dropout(f(x))).

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "smart/config.hpp"
#include "smart/encoder.hpp"
#include "smart/ops.hpp"

namespace smart {

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct NormParams {
  Tensor gamma;
  Tensor beta;
};

struct AttentionParams {
  LinearParams query, key, value, output;
  NormParams norm;
};

struct FeedForwardParams {
  LinearParams up, down;
  NormParams norm;
};

struct MartBlockParams {
  AttentionParams temporal;
  AttentionParams variable;
  FeedForwardParams ffn;
};

inline Tensor apply(const LinearParams& p, const Tensor& x) { return linear(x, p.weight, p.bias); }
inline Tensor apply(const NormParams& p, const Tensor& x) { return layer_norm(x, p.gamma, p.beta); }

/// Observation bias for one record in CLS-extended coordinates.
/// at(i, j, n) is 2 when both visits are observed for variable n, 1 when exactly one is, 0 otherwise.
struct TemporalBias {
  std::size_t rows = 0;
  std::size_t N = 0;
  std::vector<std::uint8_t> values;  // [rows, rows, N]

  std::uint8_t at(std::size_t i, std::size_t j, std::size_t n) const { return values[(i * rows + j) * N + n]; }
};

inline TemporalBias build_bias(std::span<const std::uint8_t> extended_mask, std::size_t rows, std::size_t N) {
  if (extended_mask.size() != rows * N) throw ShapeError("build_bias: mask does not match rows x N");
  TemporalBias bias{rows, N, std::vector<std::uint8_t>(rows * rows * N)};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < rows; ++j)
      for (std::size_t n = 0; n < N; ++n) {
        const bool a = extended_mask[i * N + n] != 0, b = extended_mask[j * N + n] != 0;
        bias.values[(i * rows + j) * N + n] = a && b ? 2 : (a != b ? 1 : 0);
      }
  return bias;
}

/// Logit offset that removes padded key positions from every softmax.
inline constexpr double kPaddedKeyLogit = -1e9;

/// Additive attention-logit tensor [B, N, heads, rows, rows]: the observation
/// bias (when enabled) shared by every head, plus padding exclusion.
inline Tensor temporal_score_bias(const HiddenState& state, std::size_t heads, bool use_observation_bias) {
  const std::size_t B = state.B, R = state.rows, N = state.N;
  Tensor out(Shape{B, N, heads, R, R});
  double* dst = out.data().data();
  std::vector<double> tile(R * R);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = state.length[b];
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < R; ++j) {
          double v = 0.0;
          if (j >= len) {
            v = kPaddedKeyLogit;
          } else if (use_observation_bias) {
            const bool a = state.mask[state.index(b, i, n)] != 0, c = state.mask[state.index(b, j, n)] != 0;
            v = a && c ? 2.0 : (a != c ? 1.0 : 0.0);
          }
          tile[i * R + j] = v;
        }
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy(tile.begin(), tile.end(), dst);
        dst += R * R;
      }
    }
  }
  return out;
}

/// Optional record of attention internals (tests and diagnostics).
struct AttentionTrace {
  std::vector<Tensor> temporal_weights;  // [B, N, H, rows, rows] per block
  std::vector<Tensor> variable_weights;  // [B, H, N, N] per block
  std::vector<Tensor> variable_keys;     // pooled key input [B, N, d] per block
};

struct BlockContext {
  std::size_t heads = 4;
  double dropout = 0.0;
  bool training = false;
  std::mt19937_64* rng = nullptr;
  KeyPooling pooling = KeyPooling::mean;
  AblationFlags ablation;
  AttentionTrace* trace = nullptr;
};

namespace detail {

inline Tensor maybe_dropout(const Tensor& x, const BlockContext& ctx) {
  if (!ctx.training || ctx.dropout == 0.0) return x;
  if (!ctx.rng) throw std::invalid_argument("training-mode dropout needs an rng");
  return dropout(x, ctx.dropout, true, *ctx.rng);
}

}  // namespace detail

/// Multi-head self-attention over time, independently for every variable.
/// score_bias is the [B, N, H, rows, rows] tensor from temporal_score_bias.
inline Tensor temporal_attention(const Tensor& h, const Tensor& score_bias, const AttentionParams& p,
                                 const BlockContext& ctx) {
  if (h.dim() != 4) throw ShapeError("temporal_attention: expected [B, rows, N, d], got " + to_string(h.shape()));
  const std::size_t B = h.size(0), R = h.size(1), N = h.size(2), d = h.size(3), H = ctx.heads;
  if (H == 0 || d % H != 0) throw ShapeError("temporal_attention: d not divisible by heads");
  const std::size_t dh = d / H;
  if (score_bias.shape() != Shape{B, N, H, R, R}) {
    throw ShapeError("temporal_attention: bias " + to_string(score_bias.shape()) + " does not fit " +
                     to_string(h.shape()));
  }
  auto split_heads = [&](const Tensor& t) { return permute(reshape(t, Shape{B, R, N, H, dh}), {0, 2, 3, 1, 4}); };
  const Tensor q = split_heads(apply(p.query, h));
  const Tensor k = split_heads(apply(p.key, h));
  const Tensor v = split_heads(apply(p.value, h));
  const Tensor weights = softmax(matmul_nt(q, k, 1.0 / std::sqrt(static_cast<double>(dh)), score_bias), -1);
  if (ctx.trace) ctx.trace->temporal_weights.push_back(weights);
  const Tensor context = reshape(permute(matmul(weights, v), {0, 3, 1, 2, 4}), Shape{B, R, N, d});
  return apply(p.norm, add(h, detail::maybe_dropout(apply(p.output, context), ctx)));
}

/// Time-invariant attention across variables. The query comes from the CLS row
/// (or the last valid row when there is no CLS), keys pool observed rows, and
/// the resulting N x N map mixes the values of every row.
inline Tensor variable_attention(const Tensor& h, const HiddenState& state, const AttentionParams& p,
                                 const BlockContext& ctx) {
  if (h.dim() != 4 || h.size(0) != state.B || h.size(1) != state.rows || h.size(2) != state.N) {
    throw ShapeError("variable_attention: hidden " + to_string(h.shape()) + " does not match state");
  }
  const std::size_t B = h.size(0), R = h.size(1), N = h.size(2), d = h.size(3), H = ctx.heads;
  if (H == 0 || d % H != 0) throw ShapeError("variable_attention: d not divisible by heads");
  const std::size_t dh = d / H;

  std::vector<std::size_t> query_row(B, 0);
  if (!state.has_cls)
    for (std::size_t b = 0; b < B; ++b) query_row[b] = state.length[b] - 1;

  const bool observed_only = ctx.ablation.mask_in_variable();
  std::vector<double> pool(B * R * N, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t count = 0;
      for (std::size_t t = 0; t < state.length[b]; ++t)
        if (!observed_only || state.mask[state.index(b, t, n)]) {
          pool[state.index(b, t, n)] = 1.0;
          ++count;
        }
      if (ctx.pooling == KeyPooling::mean && count > 0)
        for (std::size_t t = 0; t < state.length[b]; ++t) pool[state.index(b, t, n)] /= static_cast<double>(count);
    }
  const Tensor pooled = weighted_time_sum(h, std::move(pool));
  if (ctx.trace) ctx.trace->variable_keys.push_back(pooled);

  auto split = [&](const Tensor& t) { return permute(reshape(t, Shape{B, N, H, dh}), {0, 2, 1, 3}); };
  const Tensor q = split(apply(p.query, gather_rows(h, query_row)));
  const Tensor k = split(apply(p.key, pooled));
  const Tensor weights = softmax(matmul_nt(q, k, 1.0 / std::sqrt(static_cast<double>(dh))), -1);
  if (ctx.trace) ctx.trace->variable_weights.push_back(weights);

  // Values as [B, H, N, rows * dh] so one product applies the map to every row.
  const Tensor v = reshape(permute(reshape(apply(p.value, h), Shape{B, R, N, H, dh}), {0, 3, 2, 1, 4}),
                           Shape{B, H, N, R * dh});
  const Tensor mixed = permute(reshape(matmul(weights, v), Shape{B, H, N, R, dh}), {0, 3, 2, 1, 4});
  const Tensor context = reshape(mixed, Shape{B, R, N, d});
  return apply(p.norm, add(h, detail::maybe_dropout(apply(p.output, context), ctx)));
}

inline Tensor feed_forward(const Tensor& h, const FeedForwardParams& p, const BlockContext& ctx) {
  Tensor inner = detail::maybe_dropout(gelu(apply(p.up, h)), ctx);
  return apply(p.norm, add(h, detail::maybe_dropout(apply(p.down, inner), ctx)));
}

inline Tensor mart_block(const Tensor& h, const HiddenState& state, const Tensor& score_bias,
                         const MartBlockParams& p, const BlockContext& ctx) {
  Tensor out = h;
  if (!ctx.ablation.no_temporal_attention) out = temporal_attention(out, score_bias, p.temporal, ctx);
  if (!ctx.ablation.no_variable_attention) out = variable_attention(out, state, p.variable, ctx);
  return feed_forward(out, p.ffn, ctx);
}

/// Applies the blocks in order. The score bias is built once and reused by
/// every block and head.
inline Tensor mart_forward(const HiddenState& state, std::span<const MartBlockParams> blocks,
                           const BlockContext& ctx) {
  if (blocks.empty()) throw std::invalid_argument("mart_forward: need at least one block");
  Tensor score_bias;
  if (!ctx.ablation.no_temporal_attention)
    score_bias = temporal_score_bias(state, ctx.heads, ctx.ablation.mask_in_temporal());
  Tensor h = state.h;
  for (const auto& block : blocks) h = mart_block(h, state, score_bias, block, ctx);
  return h;
}

}  // namespace smart

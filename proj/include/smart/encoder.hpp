#pragma once

// Variable-independent input encoder.
//
// Every variable owns a linear map from its (value, observed) pair to d
// dimensions. A learnable CLS row is prepended along time, the observation
// mask gets a matching all-true row, and sinusoidal positions are added to all
// rows (CLS sits at position 0).

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "smart/data.hpp"
#include "smart/ops.hpp"

namespace smart {

struct EncoderParams {
  Tensor proj_weight;  // [N, 2, d]
  Tensor proj_bias;    // [N, d]
  Tensor cls;          // [N, d]
};

struct EncodeOptions {
  bool use_mask_channel = true;
  bool use_cls = true;
};

/// Encoder output plus the mask and valid lengths in the same row coordinates.
struct HiddenState {
  Tensor h;                         // [B, rows, N, d]
  std::vector<std::uint8_t> mask;   // [B, rows, N]; CLS row all true
  std::vector<std::size_t> length;  // valid rows per record, CLS included
  std::size_t B = 0;
  std::size_t rows = 0;
  std::size_t N = 0;
  bool has_cls = true;

  std::size_t index(std::size_t b, std::size_t t, std::size_t n) const { return (b * rows + t) * N + n; }
};

/// Sinusoidal table [rows, d]: even channels sin(pos / 10000^(2i/d)), odd channels cos.
inline Tensor positional_encoding(std::size_t rows, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ShapeError("positional_encoding: d must be even, got " + std::to_string(d));
  Tensor pe(Shape{rows, d});
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe[pos * d + 2 * i] = std::sin(angle);
      pe[pos * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return pe;
}

inline HiddenState encode(const Batch& batch, const EncoderParams& params, const EncodeOptions& options = {}) {
  const std::size_t N = params.proj_weight.size(0), d = params.proj_weight.size(2);
  if (batch.N != N) {
    throw ShapeError("encode: batch has " + std::to_string(batch.N) + " variables, encoder expects " +
                     std::to_string(N));
  }
  const std::size_t B = batch.B, T = batch.T;
  std::vector<double> cells(B * T * N * 2);
  for (std::size_t i = 0; i < B * T * N; ++i) {
    cells[2 * i] = batch.m[i] ? batch.x[i] : 0.0;
    cells[2 * i + 1] = options.use_mask_channel && batch.m[i] ? 1.0 : 0.0;
  }
  Tensor h = grouped_linear(Tensor(Shape{B, T, N, 2}, std::move(cells)), params.proj_weight, params.proj_bias);

  HiddenState state;
  state.B = B;
  state.N = N;
  state.has_cls = options.use_cls;
  state.rows = options.use_cls ? T + 1 : T;
  if (options.use_cls) {
    Tensor cls = reshape(expand_leading(params.cls, B), Shape{B, 1, N, d});
    h = concat({cls, h}, 1);
  }

  // Positions broadcast over the variable axis.
  const Tensor pe = positional_encoding(state.rows, d);
  Tensor pe_full(Shape{state.rows, N, d});
  for (std::size_t t = 0; t < state.rows; ++t)
    for (std::size_t n = 0; n < N; ++n)
      std::copy(pe.data().begin() + t * d, pe.data().begin() + (t + 1) * d, pe_full.data().begin() + (t * N + n) * d);
  state.h = add(h, pe_full);

  const std::size_t offset = options.use_cls ? 1 : 0;
  state.mask.assign(B * state.rows * N, 0);
  for (std::size_t b = 0; b < B; ++b) {
    if (options.use_cls)
      for (std::size_t n = 0; n < N; ++n) state.mask[state.index(b, 0, n)] = 1;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n) state.mask[state.index(b, t + offset, n)] = batch.m[batch.index(b, t, n)];
    state.length.push_back(batch.length[b] + offset);
  }
  return state;
}

/// Single-record convenience: x and m are T x N.
inline HiddenState encode(std::span<const double> x, std::span<const std::uint8_t> m, std::size_t T, std::size_t N,
                          const EncoderParams& params, const EncodeOptions& options = {}) {
  if (x.size() != T * N || m.size() != T * N) throw ShapeError("encode: x/m do not match T x N");
  Batch batch;
  batch.B = 1;
  batch.T = T;
  batch.N = N;
  batch.x.assign(x.begin(), x.end());
  batch.m.assign(m.begin(), m.end());
  batch.length = {T};
  batch.y = {{}};
  return encode(batch, params, options);
}

}  // namespace smart

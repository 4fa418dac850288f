#pragma once

// Removal masks for self-supervised pre-training.
//
// Plans live in CLS-extended coordinates: row 0 is the CLS position and is
// never removed; row t + 1 corresponds to hour t of the record.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smart/data.hpp"
#include "smart/ops.hpp"

namespace smart {

struct MaskPlan {
  std::size_t rows = 0;  // T + 1
  std::size_t N = 0;
  std::vector<std::uint8_t> removed;
  double rate = 0.0;  // removal probability actually drawn

  bool at(std::size_t row, std::size_t n) const { return removed[row * N + n] != 0; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto v : removed) c += v;
    return c;
  }
};

/// Prepends an all-true row (the CLS position) to a T x N mask.
inline std::vector<std::uint8_t> extend_mask(std::span<const std::uint8_t> m, std::size_t T, std::size_t N) {
  if (m.size() != T * N) throw ShapeError("extend_mask: mask size does not match T x N");
  std::vector<std::uint8_t> out((T + 1) * N, 1);
  std::copy(m.begin(), m.end(), out.begin() + static_cast<std::ptrdiff_t>(N));
  return out;
}

/// Per-record stream derived from (seed, patient index, epoch), independent of
/// the order in which records are processed.
inline std::mt19937_64 plan_rng(std::uint64_t seed, std::uint64_t patient, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(patient), static_cast<std::uint32_t>(patient >> 32),
                    static_cast<std::uint32_t>(epoch), 0x6d61736bU};
  return std::mt19937_64(seq);
}

/// Removes each observed non-CLS cell of the extended mask independently with probability rate.
inline MaskPlan sample_mask_plan_at_rate(std::span<const std::uint8_t> extended, std::size_t rows,
                                         std::size_t N, double rate, std::mt19937_64& rng) {
  if (extended.size() != rows * N || rows == 0) throw ShapeError("mask plan: extended mask size mismatch");
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("mask plan: rate outside [0, 1]");
  MaskPlan plan{rows, N, std::vector<std::uint8_t>(rows * N, 0), rate};
  for (std::size_t i = N; i < rows * N; ++i) {
    if (!extended[i]) continue;
    plan.removed[i] = uniform01(rng) < rate ? 1 : 0;
  }
  return plan;
}

/// Draws r ~ Uniform(lo, hi) once, then removes observed cells with probability r.
/// lo == hi is accepted as a degenerate interval.
inline MaskPlan sample_mask_plan(std::span<const std::uint8_t> extended, std::size_t rows, std::size_t N,
                                 std::pair<double, double> interval, std::mt19937_64& rng) {
  const auto [lo, hi] = interval;
  if (!(lo >= 0.0 && hi < 1.0 && lo <= hi)) {
    throw std::invalid_argument("mask plan: probability interval must satisfy 0 <= lo <= hi < 1, got (" +
                                std::to_string(lo) + ", " + std::to_string(hi) + ")");
  }
  const double r = lo + (hi - lo) * uniform01(rng);
  return sample_mask_plan_at_rate(extended, rows, N, r, rng);
}

struct Augmented {
  std::vector<double> x;
  std::vector<std::uint8_t> m;
};

/// (x*, m*) in record coordinates: removed cells become unobserved with value 0.
inline Augmented apply_mask_plan(std::span<const double> x, std::span<const std::uint8_t> m, std::size_t T,
                                 std::size_t N, const MaskPlan& plan) {
  if (x.size() != T * N || m.size() != T * N || plan.rows != T + 1 || plan.N != N) {
    throw ShapeError("apply_mask_plan: plan " + std::to_string(plan.rows) + "x" + std::to_string(plan.N) +
                     " does not fit record " + std::to_string(T) + "x" + std::to_string(N));
  }
  Augmented out{std::vector<double>(x.begin(), x.end()), std::vector<std::uint8_t>(m.begin(), m.end())};
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n) {
      if (!plan.at(t + 1, n)) continue;
      if (!m[t * N + n]) throw std::invalid_argument("apply_mask_plan: plan removes an unobserved cell");
      out.m[t * N + n] = 0;
      out.x[t * N + n] = 0.0;
    }
  return out;
}

inline Augmented apply_mask_plan(const EhrRecord& r, const MaskPlan& plan) {
  return apply_mask_plan(r.x, r.m, r.T, r.N, plan);
}

}  // namespace smart

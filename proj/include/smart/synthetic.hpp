#pragma once

// Synthetic sparse EHR cohorts.
//
// Each patient follows a smooth latent severity trajectory (baseline, linear
// drift, a sinusoid and a small random walk). Variables are noisy affine reads
// of the latent state in their own clinical units. Labels threshold terminal
// severity at a population percentile, so prevalence is controlled exactly.
// In MNAR mode a cell is more likely to be measured when the patient is sicker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "smart/data.hpp"

namespace smart {

enum class Missingness { mcar, mnar };

inline std::string to_string(Missingness m) { return m == Missingness::mcar ? "mcar" : "mnar"; }

inline Missingness parse_missingness(std::string_view s) {
  if (s == "mcar") return Missingness::mcar;
  if (s == "mnar") return Missingness::mnar;
  throw std::invalid_argument("unknown missingness mode '" + std::string(s) + "'");
}

struct SyntheticSpec {
  std::size_t n_patients = 1000;
  std::size_t n_vars = 8;
  std::size_t t_max = 48;
  double observed_rate = 0.25;
  Missingness missingness = Missingness::mcar;
  double positive_rate = 0.14;
  std::uint64_t seed = 7;
  TaskSpec task = TaskSpec::binary();

  void validate() const {
    if (n_patients < 10) throw std::invalid_argument("synthetic: need at least 10 patients for an 8:1:1 split");
    if (n_vars == 0 || t_max == 0) throw std::invalid_argument("synthetic: variables and hours must be positive");
    if (!(observed_rate > 0.0 && observed_rate <= 1.0))
      throw std::invalid_argument("synthetic: observed rate must lie in (0, 1]");
    if (task.kind != TaskKind::multiclass) {
      if (!(positive_rate > 0.0 && positive_rate < 1.0))
        throw std::invalid_argument("synthetic: positive rate must lie strictly between 0 and 1");
      const double expected = positive_rate * static_cast<double>(n_patients);
      if (expected < 1.0 || expected > static_cast<double>(n_patients) - 1.0)
        throw std::invalid_argument("synthetic: positive rate leaves one class empty");
    }
    if (task.kind == TaskKind::multiclass && task.outputs < 2)
      throw std::invalid_argument("synthetic: multiclass needs at least 2 classes");
  }
};

struct SyntheticDataset {
  SplitDataset splits;
  double observed_rate = 0.0;  // realized over all cells
  double prevalence = 0.0;     // realized positive fraction (binary / mean over multilabel columns)
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Indices of the k largest scores (ties broken by index).
inline std::vector<std::uint8_t> top_k_flags(const std::vector<double>& score, std::size_t k) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
  std::vector<std::uint8_t> flag(score.size(), 0);
  for (std::size_t i = 0; i < k && i < order.size(); ++i) flag[order[i]] = 1;
  return flag;
}

}  // namespace detail

inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t P = spec.n_patients, N = spec.n_vars, T = spec.t_max;
  constexpr double two_pi = 2.0 * std::numbers::pi;

  // Variable read-outs: value = offset + scale * (loading * severity + noise).
  std::vector<double> loading(N), offset(N), unit(N);
  {
    auto rng = detail::stream(spec.seed, 1, 0);
    std::uniform_real_distribution<double> mag(0.6, 1.4), off(0.0, 100.0), sc(1.0, 15.0);
    std::bernoulli_distribution flip(0.3);
    for (std::size_t n = 0; n < N; ++n) {
      loading[n] = mag(rng) * (flip(rng) ? -1.0 : 1.0);
      offset[n] = off(rng);
      unit[n] = sc(rng);
    }
  }

  std::vector<double> severity(P * T);
  for (std::size_t p = 0; p < P; ++p) {
    auto rng = detail::stream(spec.seed, 2, p);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> amp_d(0.2, 1.0), period_d(8.0, 36.0), phase_d(0.0, two_pi);
    const double base = gauss(rng);
    const double drift = gauss(rng);
    const double amp = amp_d(rng), period = period_d(rng), phase = phase_d(rng);
    double walk = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      walk += 0.15 * gauss(rng);
      const double frac = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
      severity[p * T + t] = base + drift * frac + amp * std::sin(two_pi * t / period + phase) + walk;
    }
  }

  // Observation probabilities; MNAR shifts a logistic curve in severity so the
  // population mean hits the target rate.
  std::vector<double> obs_prob(P * T, spec.observed_rate);
  if (spec.missingness == Missingness::mnar && spec.observed_rate < 1.0) {
    constexpr double slope = 1.0;
    auto mean_prob = [&](double bias) {
      double s = 0.0;
      for (double v : severity) s += detail::logistic(bias + slope * v);
      return s / static_cast<double>(severity.size());
    };
    double lo = -30.0, hi = 30.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (mean_prob(mid) < spec.observed_rate ? lo : hi) = mid;
    }
    const double bias = 0.5 * (lo + hi);
    for (std::size_t i = 0; i < obs_prob.size(); ++i) obs_prob[i] = detail::logistic(bias + slope * severity[i]);
  }

  std::vector<EhrRecord> records(P);
  std::size_t observed = 0;
  for (std::size_t p = 0; p < P; ++p) {
    auto rng = detail::stream(spec.seed, 3, p);
    std::normal_distribution<double> noise(0.0, 0.6);
    EhrRecord& r = records[p];
    r.patient_id = "P" + std::to_string(p);
    r.T = T;
    r.N = N;
    r.x.assign(T * N, 0.0);
    r.m.assign(T * N, 0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n) {
        const double e = noise(rng);
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        if (u < obs_prob[p * T + t]) {
          r.m[t * N + n] = 1;
          r.x[t * N + n] = offset[n] + unit[n] * (loading[n] * severity[p * T + t] + e);
          ++observed;
        }
      }
  }

  // Terminal severity: mean over the last eighth of the window.
  const std::size_t tail = std::max<std::size_t>(1, T / 8);
  std::vector<double> terminal(P), overall(P);
  for (std::size_t p = 0; p < P; ++p) {
    double s = 0.0, a = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      a += severity[p * T + t];
      if (t >= T - tail) s += severity[p * T + t];
    }
    terminal[p] = s / static_cast<double>(tail);
    overall[p] = a / static_cast<double>(T);
  }

  double prevalence = 0.0;
  const auto n_pos = static_cast<std::size_t>(std::llround(spec.positive_rate * static_cast<double>(P)));
  switch (spec.task.kind) {
    case TaskKind::binary: {
      const auto flag = detail::top_k_flags(terminal, n_pos);
      for (std::size_t p = 0; p < P; ++p) records[p].y = {flag[p]};
      prevalence = static_cast<double>(n_pos) / static_cast<double>(P);
      break;
    }
    case TaskKind::multilabel: {
      const std::size_t K = spec.task.outputs;
      for (auto& r : records) r.y.assign(K, 0);
      auto rng = detail::stream(spec.seed, 4, 0);
      std::normal_distribution<double> gauss(0.0, 1.0);
      std::uniform_real_distribution<double> mix(0.0, 1.0);
      for (std::size_t k = 0; k < K; ++k) {
        const double w = mix(rng);
        std::vector<double> score(P);
        for (std::size_t p = 0; p < P; ++p) score[p] = w * terminal[p] + (1.0 - w) * overall[p] + 0.3 * gauss(rng);
        const auto flag = detail::top_k_flags(score, n_pos);
        for (std::size_t p = 0; p < P; ++p) records[p].y[k] = flag[p];
      }
      prevalence = static_cast<double>(n_pos) / static_cast<double>(P);
      break;
    }
    case TaskKind::multiclass: {
      const std::size_t C = spec.task.outputs;
      std::vector<std::size_t> order(P);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return terminal[a] < terminal[b]; });
      for (std::size_t i = 0; i < P; ++i) records[order[i]].y = {static_cast<int>(i * C / P)};
      break;
    }
  }

  SyntheticDataset out;
  out.observed_rate = static_cast<double>(observed) / static_cast<double>(P * T * N);
  out.prevalence = prevalence;
  std::vector<std::string> names;
  for (std::size_t n = 0; n < N; ++n) names.push_back("var_" + std::to_string(n));
  out.splits = split_dataset(std::move(records), spec.seed, std::move(names));
  return out;
}

}  // namespace smart

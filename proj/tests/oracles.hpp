#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance runner: central finite differences, brute-force bias and metric
// enumerations, and small random generators.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "smart/smart.hpp"

namespace oracle {

using smart::Tensor;

inline Tensor random_tensor(smart::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline Tensor leaf(smart::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  return random_tensor(std::move(shape), rng, lo, hi).set_requires_grad(true);
}

inline constexpr double kGradNoiseFloor = 1e-8;

/// ||a - n|| / max(||a||, ||n||) per leaf, where a is the autodiff gradient
/// and n the central difference. Returns the worst leaf. Leaves whose
/// gradient vanishes on both sides (norms below the difference noise floor,
/// e.g. key biases under softmax shift invariance) count as exact.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double h = 1e-5) {
  for (auto& p : leaves) p.zero_grad();
  smart::backward(f());
  double worst = 0.0;
  for (auto& p : leaves) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double keep = p[i];
      double plus, minus;
      {
        smart::NoGradGuard g;
        p[i] = keep + h;
        plus = f().item();
        p[i] = keep - h;
        minus = f().item();
      }
      p[i] = keep;
      const double numeric = (plus - minus) / (2.0 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    const double scale = std::sqrt(std::max(na, nn));
    if (scale > kGradNoiseFloor) worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

/// Triple loop over (i, j, n) straight from the case definition.
inline std::vector<std::uint8_t> brute_bias(const std::vector<std::uint8_t>& m, std::size_t rows, std::size_t N) {
  std::vector<std::uint8_t> out(rows * rows * N);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < rows; ++j)
      for (std::size_t n = 0; n < N; ++n) {
        const int a = m[i * N + n], b = m[j * N + n];
        std::uint8_t v = 0;
        if (a == 1 && b == 1) v = 2;
        else if (a == 1 || b == 1) v = 1;
        out[(i * rows + j) * N + n] = v;
      }
  return out;
}

/// Distinct scores from high to low; each one is a threshold "score >= thr".
inline std::vector<double> thresholds(const std::vector<double>& scores) {
  std::set<double, std::greater<>> s(scores.begin(), scores.end());
  return {s.begin(), s.end()};
}

struct Confusion {
  std::size_t tp = 0, fp = 0;
};

inline Confusion confusion_at(const std::vector<int>& y, const std::vector<double>& s, double thr) {
  Confusion c;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (s[i] >= thr) (y[i] ? c.tp : c.fp)++;
  return c;
}

inline std::size_t positives(const std::vector<int>& y) {
  return static_cast<std::size_t>(std::count_if(y.begin(), y.end(), [](int v) { return v != 0; }));
}

/// Step-wise average precision: precision at each threshold times the
/// positives it admits, recounted from scratch per threshold.
inline double auprc(const std::vector<int>& y, const std::vector<double>& s) {
  double acc = 0.0;
  std::size_t prev_tp = 0;
  for (double thr : thresholds(s)) {
    const auto c = confusion_at(y, s, thr);
    if (c.tp > prev_tp)
      acc += static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) * static_cast<double>(c.tp - prev_tp);
    prev_tp = c.tp;
  }
  return acc / static_cast<double>(positives(y));
}

/// O(n^2) pair count; ties are worth one half.
inline double auroc(const std::vector<int>& y, const std::vector<double>& s) {
  std::size_t twice_wins = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < y.size(); ++i) (y[i] ? pos : neg)++;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (y[i] && !y[j]) twice_wins += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
  return 0.5 * static_cast<double>(twice_wins) / (static_cast<double>(pos) * static_cast<double>(neg));
}

inline double min_se_pplus(const std::vector<int>& y, const std::vector<double>& s) {
  const double P = static_cast<double>(positives(y));
  double best = 0.0;
  for (double thr : thresholds(s)) {
    const auto c = confusion_at(y, s, thr);
    const double se = static_cast<double>(c.tp) / P;
    const double pp = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    best = std::max(best, std::min(se, pp));
  }
  return best;
}

struct Roc {
  double macro = 0.0, micro = 0.0;
};

/// y and s are n x K row-major; single-class columns are skipped in the macro mean.
inline Roc macro_micro(const std::vector<int>& y, const std::vector<double>& s, std::size_t K) {
  const std::size_t n = y.size() / K;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<int> cy;
    std::vector<double> cs;
    for (std::size_t i = 0; i < n; ++i) {
      cy.push_back(y[i * K + k]);
      cs.push_back(s[i * K + k]);
    }
    const auto p = positives(cy);
    if (p == 0 || p == n) continue;
    total += auroc(cy, cs);
    ++used;
  }
  return {total / static_cast<double>(used), auroc(y, s)};
}

/// Random binary instance with both classes; scores sometimes drawn from a
/// coarse grid so ties occur.
inline void random_binary(std::mt19937_64& rng, std::size_t n, std::vector<int>& y, std::vector<double>& s) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool coarse = u(rng) < 0.5;
  do {
    y.assign(n, 0);
    s.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = u(rng) < 0.4 ? 1 : 0;
      s[i] = coarse ? std::floor(u(rng) * 5.0) / 5.0 : u(rng);
    }
  } while (positives(y) == 0 || positives(y) == n);
}

/// Small random records with valid masks (x zero where unobserved).
inline std::vector<smart::EhrRecord> random_records(std::mt19937_64& rng, std::size_t count, std::size_t max_T,
                                                    std::size_t N, double observed = 0.5, std::size_t min_T = 1) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<smart::EhrRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    smart::EhrRecord r;
    r.patient_id = "p" + std::to_string(i);
    r.T = min_T + static_cast<std::size_t>(u(rng) * static_cast<double>(max_T - min_T + 1));
    r.T = std::min(r.T, max_T);
    r.N = N;
    r.x.assign(r.T * N, 0.0);
    r.m.assign(r.T * N, 0);
    for (std::size_t c = 0; c < r.T * N; ++c)
      if (u(rng) < observed) {
        r.m[c] = 1;
        r.x[c] = g(rng);
      }
    r.y = {u(rng) < 0.3 ? 1 : 0};
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace oracle

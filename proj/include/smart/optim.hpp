#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "smart/tensor.hpp"

namespace smart {

/// A named leaf tensor. Trainability is carried by the tensor's requires_grad
/// flag so frozen parameters are also excluded from graph recording.
struct Parameter {
  std::string name;
  Tensor tensor;

  bool trainable() const { return tensor.requires_grad(); }
};

using ParameterList = std::vector<Parameter>;

inline void check_unique_names(const ParameterList& params) {
  std::unordered_set<std::string> seen;
  for (const auto& p : params) {
    if (!seen.insert(p.name).second) throw std::invalid_argument("duplicate parameter name: " + p.name);
  }
}

inline void zero_grads(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

inline void set_trainable(ParameterList& params, bool trainable) {
  for (auto& p : params) p.tensor.set_requires_grad(trainable);
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
  long step = 0;
};

/// Adam with bias correction. State is keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  void reset() { state_.clear(); }

  /// Updates every trainable parameter that holds a gradient. Frozen
  /// parameters are never touched.
  void step(ParameterList& params) {
    for (auto& p : params) {
      if (!p.trainable() || !p.tensor.has_grad()) continue;
      update(p.name, p.tensor.data(), p.tensor.grad());
    }
  }

  /// Single-parameter update on raw buffers.
  void update(const std::string& name, std::span<double> value, std::span<const double> grad) {
    if (value.size() != grad.size()) {
      throw ShapeError("adam: parameter '" + name + "' has " + std::to_string(value.size()) +
                       " values but gradient has " + std::to_string(grad.size()));
    }
    auto& s = state_[name];
    if (s.first.size() != value.size()) {
      s.first.assign(value.size(), 0.0);
      s.second.assign(value.size(), 0.0);
      s.step = 0;
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < value.size(); ++i) {
      s.first[i] = options_.beta1 * s.first[i] + (1.0 - options_.beta1) * grad[i];
      s.second[i] = options_.beta2 * s.second[i] + (1.0 - options_.beta2) * grad[i] * grad[i];
      const double mhat = s.first[i] / c1;
      const double vhat = s.second[i] / c2;
      value[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }

  const std::map<std::string, AdamMoments>& state() const { return state_; }
  std::map<std::string, AdamMoments>& state() { return state_; }

 private:
  AdamOptions options_;
  std::map<std::string, AdamMoments> state_;
};

}  // namespace smart

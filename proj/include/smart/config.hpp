#pragma once

// Model, training and experiment configuration.
//
// ExperimentConfig serializes to a flat `key = value` text with [sections].
// Parsing rejects unknown sections and keys; to_ini() followed by parse_ini()
// reproduces the config exactly (doubles use shortest round-trip formatting).

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "smart/data.hpp"

namespace smart {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Reduced model variants. The aggregate no_mask switch implies the three
/// fine-grained mask switches.
struct AblationFlags {
  bool no_mask = false;
  bool no_mask_encoder = false;
  bool no_mask_temporal = false;
  bool no_mask_variable = false;
  bool no_temporal_attention = false;
  bool no_variable_attention = false;
  bool no_cls = false;
  bool no_pretrain = false;
  bool impute_input_space = false;

  bool mask_in_encoder() const { return !no_mask && !no_mask_encoder; }
  bool mask_in_temporal() const { return !no_mask && !no_mask_temporal; }
  bool mask_in_variable() const { return !no_mask && !no_mask_variable; }

  bool any() const {
    return no_mask || no_mask_encoder || no_mask_temporal || no_mask_variable || no_temporal_attention ||
           no_variable_attention || no_cls || no_pretrain || impute_input_space;
  }

  void validate() const {
    if (no_temporal_attention && no_variable_attention) {
      throw ConfigError("ablation: removing both attentions leaves no interaction between positions");
    }
    if (no_pretrain && impute_input_space) {
      throw ConfigError("ablation: impute_input_space changes the pre-training target but pre-training is disabled");
    }
  }

  /// Short name used in ablation tables.
  std::string label() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += '+';
      s += name;
    };
    add(impute_input_space, "w/ Imputation");
    add(no_pretrain, "w/o Pre-training");
    add(no_mask, "w/o Mask");
    add(no_mask_encoder, "w/o Mask in Encoder");
    add(no_mask_temporal, "w/o Mask in Temporal Attention");
    add(no_mask_variable, "w/o Mask in Variable Attention");
    add(no_temporal_attention, "w/o Temporal Attention");
    add(no_variable_attention, "w/o Variable Attention");
    add(no_cls, "w/o CLS Vector");
    return s.empty() ? "Full" : s;
  }

  bool operator==(const AblationFlags&) const = default;
};

/// How variable-attention keys pool observed steps.
enum class KeyPooling { mean, sum };

struct ModelConfig {
  std::size_t n_vars = 0;
  std::size_t d = 32;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ff_mult = 4;
  double dropout = 0.1;
  KeyPooling key_pooling = KeyPooling::mean;
  TaskSpec task = TaskSpec::binary();
  AblationFlags ablation;

  std::size_t head_dim() const { return d / heads; }

  void validate() const {
    if (n_vars == 0) throw ConfigError("model: n_vars must be positive");
    if (d == 0 || d % 2 != 0) throw ConfigError("model: hidden size must be even and positive");
    if (heads == 0 || d % heads != 0) throw ConfigError("model: hidden size must be divisible by heads");
    if (layers == 0) throw ConfigError("model: need at least one MART block");
    if (ff_mult == 0) throw ConfigError("model: ff_mult must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
    if (task.outputs == 0) throw ConfigError("model: task needs at least one output");
    if (task.kind == TaskKind::binary && task.outputs != 1) throw ConfigError("model: binary task has one output");
    if (task.kind == TaskKind::multiclass && task.outputs < 2) throw ConfigError("model: multiclass needs >= 2 classes");
    ablation.validate();
  }

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  std::size_t pretrain_epochs = 25;
  std::size_t finetune_epochs = 25;
  std::size_t unfreeze_epoch = 5;
  double mask_lo = 0.0;
  double mask_hi = 0.75;
  double ema_decay = 0.996;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 256;
  /// Gradient-accumulation chunk inside a batch; only affects memory use.
  std::size_t micro_batch = 32;
  std::uint64_t seed = 1;
  /// Use the raw masked L1 sum instead of dividing by (removed cells x d).
  bool raw_loss_sum = false;
  double f1_threshold = 0.5;

  void validate() const {
    if (unfreeze_epoch > finetune_epochs) throw ConfigError("train: unfreeze_epoch exceeds finetune_epochs");
    if (!(mask_lo >= 0.0 && mask_hi < 1.0 && mask_lo <= mask_hi))
      throw ConfigError("train: mask interval must satisfy 0 <= lo <= hi < 1");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("train: ema_decay must lie in [0, 1]");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (batch_size == 0 || micro_batch == 0) throw ConfigError("train: batch sizes must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::string dir;
  std::size_t max_hours = 48;

  bool operator==(const DataConfig&) const = default;
};

enum class SweepMode { test_only, retrain };

struct RunConfig {
  std::string out = "runs/default";
  std::vector<std::uint64_t> seeds{1, 42, 3407};
  bool deterministic = true;
  SweepMode sweep_mode = SweepMode::test_only;
  std::vector<double> sweep_rates{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

  bool operator==(const RunConfig&) const = default;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  RunConfig run;

  void validate() const {
    model.validate();
    train.validate();
  }

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }

inline double parse_real(std::string_view s, std::string_view key) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" + std::string(s) + "'");
  }
  return v;
}

inline std::uint64_t parse_uint(std::string_view s, std::string_view key) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects a non-negative integer, got '" +
                      std::string(s) + "'");
  }
  return v;
}

inline bool parse_flag(std::string_view s, std::string_view key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config: '" + std::string(key) + "' expects true/false, got '" + std::string(s) + "'");
}

inline std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(',', start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct ConfigField {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

#define SMART_SIZE_FIELD(sec, name, member)                                                     \
  ConfigField{sec, name, [](const ExperimentConfig& c) { return fmt(std::size_t{c.member}); }, \
              [](ExperimentConfig& c, std::string_view v) { c.member = parse_uint(v, name); }}
#define SMART_REAL_FIELD(sec, name, member)                                        \
  ConfigField{sec, name, [](const ExperimentConfig& c) { return fmt(c.member); }, \
              [](ExperimentConfig& c, std::string_view v) { c.member = parse_real(v, name); }}
#define SMART_FLAG_FIELD(sec, name, member)                                        \
  ConfigField{sec, name, [](const ExperimentConfig& c) { return fmt(c.member); }, \
              [](ExperimentConfig& c, std::string_view v) { c.member = parse_flag(v, name); }}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      ConfigField{"data", "dir", [](const ExperimentConfig& c) { return c.data.dir; },
                  [](ExperimentConfig& c, std::string_view v) { c.data.dir = std::string(v); }},
      SMART_SIZE_FIELD("data", "max_hours", data.max_hours),
      SMART_SIZE_FIELD("model", "n_vars", model.n_vars),
      SMART_SIZE_FIELD("model", "d", model.d),
      SMART_SIZE_FIELD("model", "heads", model.heads),
      SMART_SIZE_FIELD("model", "layers", model.layers),
      SMART_SIZE_FIELD("model", "ff_mult", model.ff_mult),
      SMART_REAL_FIELD("model", "dropout", model.dropout),
      ConfigField{"model", "key_pooling",
                  [](const ExperimentConfig& c) {
                    return std::string(c.model.key_pooling == KeyPooling::mean ? "mean" : "sum");
                  },
                  [](ExperimentConfig& c, std::string_view v) {
                    if (v == "mean") c.model.key_pooling = KeyPooling::mean;
                    else if (v == "sum") c.model.key_pooling = KeyPooling::sum;
                    else throw ConfigError("config: key_pooling must be mean or sum");
                  }},
      ConfigField{"task", "kind", [](const ExperimentConfig& c) { return to_string(c.model.task.kind); },
                  [](ExperimentConfig& c, std::string_view v) {
                    try {
                      c.model.task.kind = parse_task_kind(v);
                    } catch (const std::invalid_argument& e) {
                      throw ConfigError(e.what());
                    }
                  }},
      SMART_SIZE_FIELD("task", "outputs", model.task.outputs),
      SMART_FLAG_FIELD("ablation", "no_mask", model.ablation.no_mask),
      SMART_FLAG_FIELD("ablation", "no_mask_encoder", model.ablation.no_mask_encoder),
      SMART_FLAG_FIELD("ablation", "no_mask_temporal", model.ablation.no_mask_temporal),
      SMART_FLAG_FIELD("ablation", "no_mask_variable", model.ablation.no_mask_variable),
      SMART_FLAG_FIELD("ablation", "no_temporal_attention", model.ablation.no_temporal_attention),
      SMART_FLAG_FIELD("ablation", "no_variable_attention", model.ablation.no_variable_attention),
      SMART_FLAG_FIELD("ablation", "no_cls", model.ablation.no_cls),
      SMART_FLAG_FIELD("ablation", "no_pretrain", model.ablation.no_pretrain),
      SMART_FLAG_FIELD("ablation", "impute_input_space", model.ablation.impute_input_space),
      SMART_SIZE_FIELD("train", "pretrain_epochs", train.pretrain_epochs),
      SMART_SIZE_FIELD("train", "finetune_epochs", train.finetune_epochs),
      SMART_SIZE_FIELD("train", "unfreeze_epoch", train.unfreeze_epoch),
      SMART_REAL_FIELD("train", "mask_lo", train.mask_lo),
      SMART_REAL_FIELD("train", "mask_hi", train.mask_hi),
      SMART_REAL_FIELD("train", "ema_decay", train.ema_decay),
      SMART_REAL_FIELD("train", "lr", train.lr),
      SMART_REAL_FIELD("train", "beta1", train.beta1),
      SMART_REAL_FIELD("train", "beta2", train.beta2),
      SMART_REAL_FIELD("train", "adam_eps", train.adam_eps),
      SMART_SIZE_FIELD("train", "batch_size", train.batch_size),
      SMART_SIZE_FIELD("train", "micro_batch", train.micro_batch),
      SMART_SIZE_FIELD("train", "seed", train.seed),
      SMART_FLAG_FIELD("train", "raw_loss_sum", train.raw_loss_sum),
      SMART_REAL_FIELD("train", "f1_threshold", train.f1_threshold),
      ConfigField{"run", "out", [](const ExperimentConfig& c) { return c.run.out; },
                  [](ExperimentConfig& c, std::string_view v) { c.run.out = std::string(v); }},
      ConfigField{"run", "seeds",
                  [](const ExperimentConfig& c) {
                    std::string s;
                    for (std::size_t i = 0; i < c.run.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.run.seeds[i]);
                    return s;
                  },
                  [](ExperimentConfig& c, std::string_view v) {
                    c.run.seeds.clear();
                    for (auto item : split_list(v)) c.run.seeds.push_back(parse_uint(item, "seeds"));
                  }},
      SMART_FLAG_FIELD("run", "deterministic", run.deterministic),
      ConfigField{"run", "sweep_mode",
                  [](const ExperimentConfig& c) {
                    return std::string(c.run.sweep_mode == SweepMode::test_only ? "test-only" : "retrain");
                  },
                  [](ExperimentConfig& c, std::string_view v) {
                    if (v == "test-only") c.run.sweep_mode = SweepMode::test_only;
                    else if (v == "retrain") c.run.sweep_mode = SweepMode::retrain;
                    else throw ConfigError("config: sweep_mode must be test-only or retrain");
                  }},
      ConfigField{"run", "sweep_rates",
                  [](const ExperimentConfig& c) {
                    std::string s;
                    for (std::size_t i = 0; i < c.run.sweep_rates.size(); ++i) s += (i ? "," : "") + fmt(c.run.sweep_rates[i]);
                    return s;
                  },
                  [](ExperimentConfig& c, std::string_view v) {
                    c.run.sweep_rates.clear();
                    for (auto item : split_list(v)) c.run.sweep_rates.push_back(parse_real(item, "sweep_rates"));
                  }},
  };
  return fields;
}

#undef SMART_SIZE_FIELD
#undef SMART_REAL_FIELD
#undef SMART_FLAG_FIELD

}  // namespace detail

inline std::string to_ini(const ExperimentConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    if (section != f.section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(config) << '\n';
  }
  return os.str();
}

/// Applies `key = value` lines on top of base. Unknown sections or keys are errors.
inline ExperimentConfig parse_ini(std::string_view text, ExperimentConfig base = {}) {
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      bool known = false;
      for (const auto& f : detail::config_fields()) known = known || section == f.section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const detail::ConfigField* field = nullptr;
    for (const auto& f : detail::config_fields())
      if (section == f.section && key == f.key) field = &f;
    if (!field) throw ConfigError(where + "unknown key '" + std::string(key) + "' in [" + section + "]");
    field->set(base, value);
  }
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_ini(ss.str(), std::move(base));
}

}  // namespace smart

#pragma once

// Experiment harness: dataset directories, the two-stage pipeline per seed,
// the observed-rate sweep and ablation comparisons.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smart/checkpoint.hpp"
#include "smart/config.hpp"
#include "smart/data.hpp"
#include "smart/synthetic.hpp"
#include "smart/training.hpp"

namespace smart {

/// Reads train.csv / val.csv / test.csv from dir. Labels come from a trailing
/// label column or, when present, from labels_<split>.csv.
inline SplitDataset load_dataset_dir(const std::filesystem::path& dir, std::size_t max_hours = 0) {
  SplitDataset out;
  CsvSchema schema;
  schema.max_hours = max_hours;
  auto load = [&](const std::string& split) {
    const auto path = dir / (split + ".csv");
    if (!std::filesystem::exists(path)) throw DataError("missing " + path.string());
    auto records = load_csv(path, schema);
    const auto labels = dir / ("labels_" + split + ".csv");
    if (std::filesystem::exists(labels)) load_labels(labels, records);
    return records;
  };
  out.train = load("train");
  if (out.train.empty()) throw DataError(dir.string() + ": training split is empty");
  {
    std::ifstream in(dir / "train.csv");
    std::string header;
    std::getline(in, header);
    const auto cols = detail::split_csv_line(header);
    for (std::size_t i = 2; i < cols.size(); ++i) {
      std::string name(detail::trim(cols[i]));
      if (name != "label") out.variables.push_back(std::move(name));
    }
  }
  schema.variables = out.variables;
  out.val = load("val");
  out.test = load("test");
  return out;
}

/// Writes a dataset in the layout read by load_dataset_dir.
inline void write_dataset_dir(const std::filesystem::path& dir, const SplitDataset& data, const TaskSpec& task) {
  std::filesystem::create_directories(dir);
  const bool inline_label = task.kind != TaskKind::multilabel;
  const std::pair<const char*, const std::vector<EhrRecord>*> splits[] = {
      {"train", &data.train}, {"val", &data.val}, {"test", &data.test}};
  for (const auto& [name, records] : splits) {
    write_csv(dir / (std::string(name) + ".csv"), data.variables, *records, inline_label);
    if (!inline_label) write_labels_csv(dir / ("labels_" + std::string(name) + ".csv"), *records);
  }
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return nlohmann::json{{"n_patients", s.n_patients},        {"n_vars", s.n_vars},
                        {"t_max", s.t_max},                  {"observed_rate", s.observed_rate},
                        {"missingness", to_string(s.missingness)},
                        {"positive_rate", s.positive_rate},  {"seed", s.seed},
                        {"task", to_string(s.task.kind)},    {"outputs", s.task.outputs}};
}

/// Fraction of observed cells over all records.
inline double observed_fraction(std::span<const EhrRecord> records) {
  std::size_t obs = 0, cells = 0;
  for (const auto& r : records) {
    obs += r.observed_count();
    cells += r.T * r.N;
  }
  return cells ? static_cast<double>(obs) / static_cast<double>(cells) : 0.0;
}

struct PipelineResult {
  MartModel model;
  std::vector<EpochLog> pretrain_log;
  FinetuneResult finetune;
  MetricsReport test;
};

/// Model config with the variable count taken from the data.
inline ModelConfig resolved_model_config(const ExperimentConfig& config, const SplitDataset& data) {
  ModelConfig mc = config.model;
  if (mc.n_vars == 0) mc.n_vars = data.variables.empty() ? data.train.front().N : data.variables.size();
  return mc;
}

/// Pre-training (unless ablated away) followed by fine-tuning and test
/// evaluation, all driven by one seed. data must already be normalized.
inline PipelineResult run_pipeline(const ExperimentConfig& config, const SplitDataset& data, std::uint64_t seed,
                                   const EpochCallback& on_epoch = {}) {
  TrainConfig tc = config.train;
  tc.seed = seed;
  PipelineResult out;
  out.model = init_model(resolved_model_config(config, data), seed);
  if (!out.model.config.ablation.no_pretrain && tc.pretrain_epochs > 0) {
    auto st = start_pretraining(out.model, tc);
    out.pretrain_log = pretrain(out.model, st, data.train, tc, on_epoch);
  }
  out.finetune = finetune(out.model, data.train, data.val, tc, on_epoch);
  out.test = evaluate(out.model, data.test, tc.f1_threshold);
  return out;
}

/// Keeps round(rate * observed) randomly chosen observed cells of every
/// record; rate 1 returns the records untouched.
inline std::vector<EhrRecord> subsample_observed(std::span<const EhrRecord> records, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("subsample_observed: rate must lie in (0, 1]");
  std::vector<EhrRecord> out(records.begin(), records.end());
  if (rate == 1.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& r = out[i];
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(std::llround(rate * 1e6)), static_cast<std::uint32_t>(i),
                      0x73776570U};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> cells;
    for (std::size_t c = 0; c < r.m.size(); ++c)
      if (r.m[c]) cells.push_back(c);
    const auto keep = static_cast<std::size_t>(std::llround(rate * static_cast<double>(cells.size())));
    // Partial Fisher-Yates: the first `keep` entries form the kept sample.
    for (std::size_t k = 0; k < keep; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(cells.size() - k));
      std::swap(cells[k], cells[std::min(j, cells.size() - 1)]);
    }
    for (std::size_t k = keep; k < cells.size(); ++k) {
      r.m[cells[k]] = 0;
      r.x[cells[k]] = 0.0;
    }
  }
  return out;
}

struct SweepRow {
  double rate = 0.0;
  std::uint64_t seed = 0;
  MetricsReport report;
};

/// Rates are fractions of the native observed cells. Rates above 1 cannot be
/// reached by removal and are skipped with a warning.
inline std::vector<double> usable_sweep_rates(const std::vector<double>& rates, std::ostream& warn = std::clog) {
  std::vector<double> out;
  for (double r : rates) {
    if (!(r > 0.0)) throw ConfigError("sweep: rates must be positive, got " + std::to_string(r));
    if (r > 1.0) {
      warn << "warning: sweep rate " << r << " exceeds the native observed rate; skipped\n";
      continue;
    }
    out.push_back(r);
  }
  return out;
}

inline SplitDataset subsample_split(const SplitDataset& data, double rate, std::uint64_t seed, bool all_splits) {
  SplitDataset out = data;
  out.test = subsample_observed(data.test, rate, seed);
  if (all_splits) {
    out.train = subsample_observed(data.train, rate, seed + 1);
    out.val = subsample_observed(data.val, rate, seed + 2);
  }
  return out;
}

/// Test-only mode trains once per seed and degrades only the test split;
/// retrain mode degrades every split and trains per rate.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& config, const SplitDataset& data,
                                       const EpochCallback& on_epoch = {}) {
  const auto rates = usable_sweep_rates(config.run.sweep_rates);
  std::vector<SweepRow> rows;
  for (auto seed : config.run.seeds) {
    if (config.run.sweep_mode == SweepMode::test_only) {
      const auto trained = run_pipeline(config, data, seed, on_epoch);
      for (double rate : rates) {
        const auto test = subsample_observed(data.test, rate, seed);
        rows.push_back({rate, seed, evaluate(trained.model, test, config.train.f1_threshold)});
      }
    } else {
      for (double rate : rates) {
        const auto degraded = subsample_split(data, rate, seed, true);
        rows.push_back({rate, seed, run_pipeline(config, degraded, seed, on_epoch).test});
      }
    }
  }
  return rows;
}

namespace detail {

inline std::string csv_metric(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os << std::setprecision(17) << *v;
  return os.str();
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

// Sample standard deviation (0 for a single value).
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.n = v.size();
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) m.std += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(m.std / static_cast<double>(v.size() - 1));
  }
  return m;
}

inline std::string pm(const std::vector<double>& v) {
  if (v.empty()) return "n/a";
  const auto m = mean_std(v);
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << m.mean << " ± " << m.std;
  return os.str();
}

}  // namespace detail

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "rate,seed,auprc,auroc,f1\n";
  for (const auto& r : rows) {
    os << detail::csv_metric(r.rate) << ',' << r.seed << ',' << detail::csv_metric(r.report.auprc) << ','
       << detail::csv_metric(r.report.auroc) << ',' << detail::csv_metric(r.report.f1) << '\n';
  }
  return os.str();
}

/// One line per rate: mean ± sample std over seeds.
inline std::string sweep_summary(const std::vector<SweepRow>& rows) {
  std::vector<double> rates;
  for (const auto& r : rows)
    if (std::find(rates.begin(), rates.end(), r.rate) == rates.end()) rates.push_back(r.rate);
  std::ostringstream os;
  os << "rate  auprc               auroc               f1\n";
  for (double rate : rates) {
    std::vector<double> a, b, c;
    for (const auto& r : rows) {
      if (r.rate != rate) continue;
      if (r.report.auprc) a.push_back(*r.report.auprc);
      if (r.report.auroc) b.push_back(*r.report.auroc);
      if (r.report.f1) c.push_back(*r.report.f1);
    }
    os << std::fixed << std::setprecision(2) << rate << "  " << detail::pm(a) << "  " << detail::pm(b) << "  "
       << detail::pm(c) << '\n';
  }
  return os.str();
}

/// Every single-switch variant from the ablation tables.
inline std::vector<AblationFlags> standard_ablations() {
  std::vector<AblationFlags> v(10);
  v[1].no_mask = true;
  v[2].no_mask_encoder = true;
  v[3].no_mask_temporal = true;
  v[4].no_mask_variable = true;
  v[5].no_temporal_attention = true;
  v[6].no_variable_attention = true;
  v[7].no_cls = true;
  v[8].no_pretrain = true;
  v[9].impute_input_space = true;
  return v;
}

struct AblationRow {
  AblationFlags flags;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> reports;
};

inline std::vector<AblationRow> run_ablation(const ExperimentConfig& config, const SplitDataset& data,
                                             const std::vector<AblationFlags>& variants,
                                             const EpochCallback& on_epoch = {}) {
  std::vector<AblationRow> rows;
  for (const auto& flags : variants) {
    flags.validate();
    ExperimentConfig c = config;
    c.model.ablation = flags;
    AblationRow row{flags, config.run.seeds, {}};
    for (auto seed : config.run.seeds) row.reports.push_back(run_pipeline(c, data, seed, on_epoch).test);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Variant rows with mean ± std per metric; binary tasks report AUPRC, AUROC
/// and F1, the others ma-ROC and mi-ROC.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  if (rows.empty()) return "";
  const bool binary = !rows.front().reports.empty() && rows.front().reports.front().task == "binary";
  std::size_t width = 8;
  for (const auto& r : rows) width = std::max(width, r.flags.label().size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "Model";
  if (binary) os << "  AUPRC              AUROC              F1\n";
  else os << "  ma-ROC             mi-ROC\n";
  for (const auto& r : rows) {
    std::vector<double> a, b, c;
    for (const auto& m : r.reports) {
      if (binary) {
        if (m.auprc) a.push_back(*m.auprc);
        if (m.auroc) b.push_back(*m.auroc);
        if (m.f1) c.push_back(*m.f1);
      } else {
        if (m.ma_roc) a.push_back(*m.ma_roc);
        if (m.mi_roc) b.push_back(*m.mi_roc);
      }
    }
    os << std::left << std::setw(static_cast<int>(width)) << r.flags.label() << "  " << detail::pm(a) << "  "
       << detail::pm(b);
    if (binary) os << "  " << detail::pm(c);
    os << '\n';
  }
  return os.str();
}

}  // namespace smart

// smart: data generation, two-stage training, evaluation, observed-rate
// sweeps and ablations from the command line.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "smart/smart.hpp"

namespace fs = std::filesystem;
using namespace smart;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
  std::optional<std::size_t> pretrain_epochs;
  std::optional<std::size_t> finetune_epochs;
  std::string data;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw std::runtime_error("write failed: " + path.string());
}

ExperimentConfig resolve_config(const GlobalOptions& g) {
  ExperimentConfig c = g.config_path.empty() ? ExperimentConfig{} : load_config(g.config_path);
  if (g.seed) c.run.seeds = {*g.seed};
  if (!g.out.empty()) c.run.out = g.out;
  if (g.deterministic) c.run.deterministic = true;
  if (g.pretrain_epochs) c.train.pretrain_epochs = *g.pretrain_epochs;
  if (g.finetune_epochs) c.train.finetune_epochs = *g.finetune_epochs;
  if (!g.data.empty()) c.data.dir = g.data;
  if (c.run.seeds.empty()) throw ConfigError("config: at least one seed is required");
  return c;
}

// Loads and z-scores the dataset, fills n_vars and validates the result.
SplitDataset prepare(ExperimentConfig& c) {
  if (c.data.dir.empty()) throw ConfigError("no dataset directory; pass --data or set [data] dir");
  SplitDataset data = load_dataset_dir(c.data.dir, c.data.max_hours);
  zscore_fit_apply(data);
  c.model = resolved_model_config(c, data);
  if (c.model.n_vars != data.variables.size()) {
    throw ConfigError("config has n_vars = " + std::to_string(c.model.n_vars) + " but the data has " +
                      std::to_string(data.variables.size()) + " variables");
  }
  c.validate();
  return data;
}

fs::path out_dir(const ExperimentConfig& c) {
  fs::path dir(c.run.out);
  fs::create_directories(dir);
  write_text(dir / "config.ini", to_ini(c));
  return dir;
}

class JsonLog {
 public:
  explicit JsonLog(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }

  EpochCallback callback(std::optional<std::uint64_t> seed = std::nullopt) {
    return [this, seed](const EpochLog& e) {
      auto j = to_json(e);
      if (seed) j["seed"] = *seed;
      out_ << j.dump() << '\n';
      out_.flush();
      std::cout << e.stage << " epoch " << e.epoch << " loss " << std::setprecision(6) << e.loss;
      if (e.val_metric) std::cout << " val " << *e.val_metric;
      std::cout << " (" << std::fixed << std::setprecision(1) << e.seconds << "s)" << std::defaultfloat << '\n';
    };
  }

 private:
  std::ofstream out_;
};

void print_report(const MetricsReport& r) { std::cout << to_json(r).dump(2) << '\n'; }

int cmd_generate(const GlobalOptions& g, SyntheticSpec spec, const std::string& missingness, const std::string& task,
                 std::size_t outputs) {
  if (g.seed && spec.seed == SyntheticSpec{}.seed) spec.seed = *g.seed;
  try {
    spec.missingness = parse_missingness(missingness);
    spec.task.kind = parse_task_kind(task);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  spec.task.outputs = spec.task.kind == TaskKind::binary ? 1 : outputs;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const fs::path dir = g.out.empty() ? fs::path("data/synthetic") : fs::path(g.out);
  const auto ds = generate_synthetic(spec);
  write_dataset_dir(dir, ds.splits, spec.task);
  auto meta = to_json(spec);
  meta["realized_observed_rate"] = ds.observed_rate;
  meta["realized_prevalence"] = ds.prevalence;
  meta["split"] = {ds.splits.train.size(), ds.splits.val.size(), ds.splits.test.size()};
  write_text(dir / "spec.json", meta.dump(2) + "\n");

  ExperimentConfig c;
  c.data.dir = dir.string();
  c.data.max_hours = spec.t_max;
  c.model.task = spec.task;
  c.run.out = dir.string();
  write_text(dir / "config.ini", to_ini(c));

  std::cout << "wrote " << dir.string() << '\n'
            << "observed rate " << ds.observed_rate << '\n'
            << "prevalence " << ds.prevalence << '\n'
            << "split " << ds.splits.train.size() << '/' << ds.splits.val.size() << '/' << ds.splits.test.size()
            << '\n';
  return 0;
}

int cmd_pretrain(const GlobalOptions& g, const std::string& resume) {
  auto c = resolve_config(g);
  const auto data = prepare(c);
  if (c.model.ablation.no_pretrain) throw ConfigError("pretrain: the no_pretrain ablation is set");
  const auto seed = c.run.seeds.front();
  c.train.seed = seed;
  const auto dir = out_dir(c);

  MartModel model;
  PretrainState st;
  if (!resume.empty()) {
    auto ck = load_checkpoint(resume);
    if (ck.stage != "pretrain") throw CheckpointError(resume + ": not a pre-training checkpoint");
    if (ck.model.config != c.model) throw ConfigError("pretrain: --resume checkpoint was trained with another model config");
    st = resume_pretraining(ck);
    model = std::move(ck.model);
  } else {
    model = init_model(c.model, seed);
    st = start_pretraining(model, c.train);
  }
  JsonLog log(dir / "pretrain_log.jsonl");
  pretrain(model, st, data.train, c.train, log.callback());
  save_checkpoint(dir / "pretrain.ckpt", model, c, "pretrain", st.epochs_done, &st.teacher, &st.optimizer);
  std::cout << "saved " << (dir / "pretrain.ckpt").string() << '\n';
  return 0;
}

int cmd_finetune(const GlobalOptions& g, const std::string& from) {
  auto c = resolve_config(g);
  const auto data = prepare(c);
  const auto seed = c.run.seeds.front();
  c.train.seed = seed;
  const auto dir = out_dir(c);

  MartModel model;
  if (!from.empty()) {
    auto ck = load_checkpoint(from);
    ModelConfig expected = c.model;
    expected.ablation.no_pretrain = ck.model.config.ablation.no_pretrain;
    if (ck.model.config != expected) {
      throw ConfigError("finetune: " + from + " was built with a different model or task configuration");
    }
    model = std::move(ck.model);
    model.config = c.model;
  } else {
    model = init_model(c.model, seed);
  }
  JsonLog log(dir / "finetune_log.jsonl");
  const auto result = finetune(model, data.train, data.val, c.train, log.callback());
  save_checkpoint(dir / "model.ckpt", model, c, "finetune", result.best_epoch.value_or(0));
  const auto report = evaluate(model, data.test, c.train.f1_threshold);
  auto j = to_json(report);
  j["split"] = "test";
  j["seed"] = seed;
  j["best_epoch"] = result.best_epoch ? nlohmann::json(*result.best_epoch) : nlohmann::json(nullptr);
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  print_report(report);
  return 0;
}

int cmd_eval(const GlobalOptions& g, const std::string& checkpoint, const std::string& split) {
  auto ck = load_checkpoint(checkpoint);
  ExperimentConfig c = g.config_path.empty() ? ck.config : resolve_config(g);
  if (!g.data.empty()) c.data.dir = g.data;
  if (!g.out.empty()) c.run.out = g.out;
  c.model = ck.model.config;
  const auto data = prepare(c);
  if (c.model != ck.model.config) throw ConfigError("eval: checkpoint does not match the dataset");
  const auto dir = out_dir(c);
  const auto& records = split == "val" ? data.val : split == "train" ? data.train : data.test;
  const auto report = evaluate(ck.model, records, c.train.f1_threshold);
  auto j = to_json(report);
  j["split"] = split;
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  print_report(report);
  return 0;
}

int cmd_sweep(const GlobalOptions& g, const std::vector<double>& rates, const std::string& mode) {
  auto c = resolve_config(g);
  if (!rates.empty()) c.run.sweep_rates = rates;
  if (!mode.empty()) {
    if (mode == "test-only") c.run.sweep_mode = SweepMode::test_only;
    else if (mode == "retrain") c.run.sweep_mode = SweepMode::retrain;
    else throw ConfigError("--sweep-mode must be test-only or retrain");
  }
  const auto data = prepare(c);
  const auto dir = out_dir(c);
  JsonLog log(dir / "train_log.jsonl");
  const auto rows = run_sweep(c, data, log.callback());
  write_text(dir / "sweep.csv", sweep_csv(rows));
  const auto summary = sweep_summary(rows);
  write_text(dir / "sweep_summary.txt", summary);
  std::cout << summary;
  return 0;
}

int cmd_ablate(const GlobalOptions& g, const AblationFlags& flags, bool all) {
  auto c = resolve_config(g);
  if (all && flags.any()) throw ConfigError("ablate: --all cannot be combined with individual ablation flags");
  const auto data = prepare(c);
  std::vector<AblationFlags> variants = all ? standard_ablations() : std::vector<AblationFlags>{flags};
  for (const auto& v : variants) v.validate();
  c.model.ablation = variants.size() == 1 ? variants.front() : AblationFlags{};
  const auto dir = out_dir(c);
  JsonLog log(dir / "train_log.jsonl");
  const auto rows = run_ablation(c, data, variants, log.callback());
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t i = 0; i < r.reports.size(); ++i) {
      auto m = to_json(r.reports[i]);
      m["seed"] = r.seeds[i];
      runs.push_back(m);
    }
    j.push_back({{"variant", r.flags.label()}, {"runs", runs}});
  }
  write_text(dir / "ablation.json", j.dump(2) + "\n");
  const auto table = ablation_table(rows);
  write_text(dir / "ablation.txt", table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"SMART: masked attention transformers for irregular clinical time series"};
  app.require_subcommand(1);

  GlobalOptions g;
  std::uint64_t seed_value = 0;
  std::size_t pre_epochs = 0, fine_epochs = 0;
  app.add_option("--config", g.config_path, "Experiment config file (INI)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "Run a single seed instead of the configured set");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--deterministic", g.deterministic, "Single-threaded bitwise reproducible execution");
  auto* pre_opt = app.add_option("--pretrain-epochs", pre_epochs, "Override the pre-training epoch count");
  auto* fine_opt = app.add_option("--finetune-epochs", fine_epochs, "Override the fine-tuning epoch count");
  app.add_option("--data", g.data, "Dataset directory with train/val/test CSV files");

  SyntheticSpec spec;
  std::string missingness = "mcar", task = "binary";
  std::size_t outputs = 1;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  gen->add_option("--patients", spec.n_patients, "Number of patients")->capture_default_str();
  gen->add_option("--vars", spec.n_vars, "Number of variables")->capture_default_str();
  gen->add_option("--tmax", spec.t_max, "Hours per stay")->capture_default_str();
  gen->add_option("--observed", spec.observed_rate, "Target observed rate")->capture_default_str();
  gen->add_option("--positive", spec.positive_rate, "Target positive rate")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  gen->add_option("--missingness", missingness, "mcar or mnar")->capture_default_str();
  gen->add_option("--task", task, "binary, multilabel or multiclass")->capture_default_str();
  gen->add_option("--outputs", outputs, "Labels (multilabel) or classes (multiclass)")->capture_default_str();

  std::string resume;
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pre-training");
  pre->add_option("--data", g.data, "Dataset directory");
  pre->add_option("--resume", resume, "Continue from a pre-training checkpoint")->check(CLI::ExistingFile);

  std::string from;
  auto* fine = app.add_subcommand("finetune", "Supervised fine-tuning and test evaluation");
  fine->add_option("--data", g.data, "Dataset directory");
  fine->add_option("--from-pretrained", from, "Pre-training checkpoint")->check(CLI::ExistingFile);

  std::string checkpoint, split = "test";
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", g.data, "Dataset directory");
  ev->add_option("--split", split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));

  std::vector<double> rates;
  std::string sweep_mode;
  auto* sw = app.add_subcommand("sweep", "Metrics as a function of the observed rate");
  sw->add_option("--data", g.data, "Dataset directory");
  sw->add_option("--rates", rates, "Fractions of the native observed cells to keep")->delimiter(',');
  sw->add_option("--sweep-mode", sweep_mode, "test-only or retrain");

  AblationFlags flags;
  bool all = false;
  auto* ab = app.add_subcommand("ablate", "Train and compare model variants");
  ab->add_option("--data", g.data, "Dataset directory");
  ab->add_flag("--no-mask", flags.no_mask, "Drop every use of the missingness mask");
  ab->add_flag("--no-mask-encoder", flags.no_mask_encoder, "Drop the mask channel of the encoder");
  ab->add_flag("--no-mask-temporal", flags.no_mask_temporal, "Drop the temporal attention bias");
  ab->add_flag("--no-mask-variable", flags.no_mask_variable, "Pool variable-attention keys over all steps");
  ab->add_flag("--no-temporal-attention", flags.no_temporal_attention, "Remove temporal attention");
  ab->add_flag("--no-variable-attention", flags.no_variable_attention, "Remove variable attention");
  ab->add_flag("--no-cls", flags.no_cls, "Use the last valid step instead of a CLS vector");
  ab->add_flag("--no-pretrain", flags.no_pretrain, "Skip pre-training");
  ab->add_flag("--impute-input-space", flags.impute_input_space, "Reconstruct raw values during pre-training");
  ab->add_flag("--all", all, "Run the full model and every single-switch variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (*seed_opt) g.seed = seed_value;
  if (*pre_opt) g.pretrain_epochs = pre_epochs;
  if (*fine_opt) g.finetune_epochs = fine_epochs;

  try {
    if (*gen) return cmd_generate(g, spec, missingness, task, outputs);
    if (*pre) return cmd_pretrain(g, resume);
    if (*fine) return cmd_finetune(g, from);
    if (*ev) return cmd_eval(g, checkpoint, split);
    if (*sw) return cmd_sweep(g, rates, sweep_mode);
    if (*ab) return cmd_ablate(g, flags, all);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

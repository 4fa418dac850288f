#pragma once

// Two-stage training: latent reconstruction of removed cells against an EMA
// teacher, then supervised fine-tuning of a label decoder on the pooled
// representation with the backbone frozen for the first epochs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "smart/config.hpp"
#include "smart/data.hpp"
#include "smart/masking.hpp"
#include "smart/metrics.hpp"
#include "smart/model.hpp"
#include "smart/optim.hpp"

namespace smart {

/// One line of the training log.
struct EpochLog {
  std::string stage;
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> val_metric;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return nlohmann::json{{"stage", e.stage},
                        {"epoch", e.epoch},
                        {"loss", e.loss},
                        {"val_metric", e.val_metric ? nlohmann::json(*e.val_metric) : nlohmann::json(nullptr)},
                        {"seconds", e.seconds}};
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// teacher <- decay * teacher + (1 - decay) * student, parameter by parameter.
inline void ema_update(Backbone& teacher, const Backbone& student, double decay) {
  auto t = backbone_parameters(teacher);
  const auto s = backbone_parameters(student);
  if (t.size() != s.size()) throw std::invalid_argument("ema_update: teacher and student differ in parameter count");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].name != s[i].name || t[i].tensor.shape() != s[i].tensor.shape()) {
      throw std::invalid_argument("ema_update: parameter mismatch at '" + t[i].name + "' vs '" + s[i].name + "'");
    }
    auto dst = t[i].tensor.data();
    const auto src = s[i].tensor.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = decay * dst[k] + (1.0 - decay) * src[k];
  }
}

namespace detail {

enum class Stage : std::uint64_t { pretrain = 1, finetune = 2 };

inline std::mt19937_64 epoch_rng(std::uint64_t seed, Stage stage, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(epoch)};
  return std::mt19937_64(seq);
}

inline std::vector<std::size_t> shuffled_order(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates on our own draws; std::shuffle is not specified bit for bit.
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline AdamOptions adam_options(const TrainConfig& c) { return {c.lr, c.beta1, c.beta2, c.adam_eps}; }

}  // namespace detail

/// Per-cell loss weights [B, rows, N] in hidden-state coordinates: 1 where a
/// cell was removed, 0 elsewhere (the CLS row is never removed).
inline std::vector<double> removal_weights(const HiddenState& state, std::span<const MaskPlan> plans) {
  if (plans.size() != state.B) throw ShapeError("removal_weights: one plan per batch item required");
  std::vector<double> w(state.B * state.rows * state.N, 0.0);
  const std::size_t shift = state.has_cls ? 0 : 1;
  for (std::size_t b = 0; b < state.B; ++b) {
    const auto& plan = plans[b];
    if (plan.N != state.N || plan.rows - shift > state.rows) throw ShapeError("removal_weights: plan does not fit");
    for (std::size_t r = 1; r < plan.rows; ++r)
      for (std::size_t n = 0; n < plan.N; ++n)
        if (plan.at(r, n)) w[state.index(b, r - shift, n)] = 1.0;
  }
  return w;
}

/// sum over removed cells of ||pred - target||_1, divided by normalizer. target is a constant.
inline Tensor pretrain_loss(const Tensor& pred, const Tensor& target, std::vector<double> weights,
                            double normalizer) {
  return scale(weighted_l1(pred, target, std::move(weights)), 1.0 / normalizer);
}

/// Raw values laid out like the hidden state ([B, rows, N, 1]); the
/// reconstruction target of the input-space imputation variant.
inline Tensor raw_value_target(const Batch& batch, const HiddenState& state) {
  Tensor out(Shape{state.B, state.rows, state.N, 1});
  const std::size_t offset = state.has_cls ? 1 : 0;
  for (std::size_t b = 0; b < batch.B; ++b)
    for (std::size_t t = 0; t < batch.T; ++t)
      for (std::size_t n = 0; n < batch.N; ++n)
        out[state.index(b, t + offset, n)] = batch.x[batch.index(b, t, n)];
  return out;
}

struct PretrainState {
  Backbone teacher;
  Adam optimizer;
  std::size_t epochs_done = 0;
};

/// Teacher starts as an exact copy of the student backbone.
inline PretrainState start_pretraining(const MartModel& model, const TrainConfig& config) {
  PretrainState st{clone(model.backbone), Adam(detail::adam_options(config)), 0};
  auto tp = backbone_parameters(st.teacher);
  set_trainable(tp, false);
  return st;
}

inline Batch augmented_batch(std::span<const EhrRecord> records, std::span<const std::size_t> idx,
                             std::span<const MaskPlan> plans) {
  std::vector<EhrRecord> aug;
  aug.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    EhrRecord r = records[idx[i]];
    auto a = apply_mask_plan(r, plans[i]);
    r.x = std::move(a.x);
    r.m = std::move(a.m);
    aug.push_back(std::move(r));
  }
  return make_batch(aug);
}

/// Forward pass of the pre-training objective on one micro-batch. Returns the
/// loss divided by normalizer; the caller chooses normalizer for the whole batch.
inline Tensor pretrain_batch_loss(const MartModel& model, const Backbone& teacher,
                                  std::span<const EhrRecord> records, std::span<const std::size_t> idx,
                                  std::span<const MaskPlan> plans, double normalizer, const ForwardMode& mode) {
  const Batch original = make_batch(records, idx);
  const Batch augmented = augmented_batch(records, idx, plans);
  const auto student = backbone_forward(model.backbone, model.config, augmented, mode);
  const Tensor pred = apply(model.embedding_decoder, student.s);
  Tensor target;
  if (model.config.ablation.impute_input_space) {
    target = raw_value_target(original, student.state);
  } else {
    NoGradGuard no_grad;
    target = backbone_forward(teacher, model.config, original).s;
  }
  return pretrain_loss(pred, target, removal_weights(student.state, plans), normalizer);
}

/// One pass over the training records. Mask plans come from a stream keyed by
/// (seed, record index, epoch); the teacher follows the student after every optimizer step.
inline EpochLog pretrain_epoch(MartModel& model, PretrainState& st, std::span<const EhrRecord> train,
                               const TrainConfig& config, std::size_t epoch) {
  const auto start = std::chrono::steady_clock::now();
  auto dropout_rng = detail::epoch_rng(config.seed, detail::Stage::pretrain, epoch);
  const auto order = detail::shuffled_order(train.size(), dropout_rng);

  ParameterList params = backbone_parameters(model.backbone);
  for (auto& p : embedding_decoder_parameters(model)) params.push_back(p);
  set_trainable(params, true);
  auto lp = label_decoder_parameters(model);
  set_trainable(lp, false);

  const std::size_t width = model.config.ablation.impute_input_space ? 1 : model.config.d;
  const ForwardMode mode{true, &dropout_rng, nullptr};
  double loss_total = 0.0;
  std::size_t steps = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
    const std::size_t end = std::min(order.size(), begin + config.batch_size);
    std::vector<MaskPlan> plans;
    std::size_t removed = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& r = train[order[i]];
      auto rng = plan_rng(config.seed, order[i], epoch);
      plans.push_back(sample_mask_plan(extend_mask(r.m, r.T, r.N), r.T + 1, r.N, {config.mask_lo, config.mask_hi}, rng));
      removed += plans.back().count();
    }
    if (removed == 0) continue;
    const double normalizer = config.raw_loss_sum ? 1.0 : static_cast<double>(removed * width);

    zero_grads(params);
    double batch_loss = 0.0;
    for (std::size_t mb = begin; mb < end; mb += config.micro_batch) {
      const std::size_t mb_end = std::min(end, mb + config.micro_batch);
      const std::span<const std::size_t> idx(order.data() + mb, mb_end - mb);
      const std::span<const MaskPlan> mb_plans(plans.data() + (mb - begin), mb_end - mb);
      Tensor loss = pretrain_batch_loss(model, st.teacher, train, idx, mb_plans, normalizer, mode);
      batch_loss += loss.item();
      backward(loss);
    }
    if (!std::isfinite(batch_loss)) throw NumericError("pre-training loss is not finite at epoch " + std::to_string(epoch));
    st.optimizer.step(params);
    ema_update(st.teacher, model.backbone, config.ema_decay);
    loss_total += batch_loss;
    ++steps;
  }
  zero_grads(params);
  st.epochs_done = epoch + 1;
  return {"pretrain", epoch, steps ? loss_total / static_cast<double>(steps) : 0.0, std::nullopt,
          detail::seconds_since(start)};
}

inline std::vector<EpochLog> pretrain(MartModel& model, PretrainState& st, std::span<const EhrRecord> train,
                                      const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  std::vector<EpochLog> log;
  for (std::size_t e = st.epochs_done; e < config.pretrain_epochs; ++e) {
    log.push_back(pretrain_epoch(model, st, train, config, e));
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

/// Class probabilities, n x outputs row-major, in eval mode.
inline std::vector<double> predict(const MartModel& model, std::span<const EhrRecord> records,
                                   std::size_t batch_size = 256) {
  NoGradGuard no_grad;
  const std::size_t K = model.config.task.outputs;
  std::vector<double> out;
  out.reserve(records.size() * K);
  for (std::size_t begin = 0; begin < records.size(); begin += batch_size) {
    const std::size_t end = std::min(records.size(), begin + batch_size);
    const Batch batch = make_batch(records.subspan(begin, end - begin));
    const Tensor logits = predict_logits(model, batch);
    for (std::size_t b = 0; b < batch.B; ++b) {
      const double* z = logits.data().data() + b * K;
      if (model.config.task.kind == TaskKind::multiclass) {
        const double mx = *std::max_element(z, z + K);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - mx);
        for (std::size_t k = 0; k < K; ++k) out.push_back(std::exp(z[k] - mx) / s);
      } else {
        for (std::size_t k = 0; k < K; ++k)
          out.push_back(z[k] >= 0 ? 1.0 / (1.0 + std::exp(-z[k])) : std::exp(z[k]) / (1.0 + std::exp(z[k])));
      }
    }
  }
  return out;
}

/// Labels as an n x K 0/1 matrix (multiclass labels become one-hot rows).
inline std::vector<int> label_matrix(std::span<const EhrRecord> records, const TaskSpec& task) {
  std::vector<int> out;
  out.reserve(records.size() * task.outputs);
  for (const auto& r : records) {
    if (task.kind == TaskKind::multiclass) {
      if (r.y.size() != 1) throw DataError("record " + r.patient_id + ": multiclass label must be one class index");
      for (std::size_t k = 0; k < task.outputs; ++k) out.push_back(static_cast<std::size_t>(r.y[0]) == k ? 1 : 0);
    } else {
      if (r.y.size() != task.outputs) {
        throw DataError("record " + r.patient_id + " has " + std::to_string(r.y.size()) + " labels, task expects " +
                        std::to_string(task.outputs));
      }
      for (int v : r.y) out.push_back(v ? 1 : 0);
    }
  }
  return out;
}

inline MetricsReport evaluate(const MartModel& model, std::span<const EhrRecord> records, double f1_threshold = 0.5) {
  const auto& task = model.config.task;
  const auto scores = predict(model, records);
  const auto labels = label_matrix(records, task);
  if (task.kind == TaskKind::binary) return binary_report(labels, scores, f1_threshold);
  return multi_report(to_string(task.kind), labels, scores, task.outputs);
}

/// AUPRC for binary tasks, macro ROC otherwise.
inline std::optional<double> selection_metric(const MetricsReport& r) {
  return r.task == "binary" ? r.auprc : r.ma_roc;
}

inline Tensor task_loss(const Tensor& logits, const Batch& batch, const TaskSpec& task, double normalizer) {
  if (task.kind == TaskKind::multiclass) {
    std::vector<int> classes;
    for (const auto& y : batch.y) classes.push_back(y.at(0));
    return cross_entropy(logits, classes, normalizer);
  }
  std::vector<double> targets;
  for (const auto& y : batch.y) {
    if (y.size() != task.outputs) throw DataError("task_loss: label width does not match the task");
    for (int v : y) targets.push_back(v ? 1.0 : 0.0);
  }
  return bce_with_logits(logits, targets, normalizer);
}

struct FinetuneResult {
  std::vector<EpochLog> log;
  std::optional<std::size_t> best_epoch;
  std::optional<double> best_val_metric;
};

/// Trains the label decoder (and, from unfreeze_epoch on, the backbone) and
/// leaves the model at the epoch with the best validation metric, or at the
/// last epoch when there is no validation set.
inline FinetuneResult finetune(MartModel& model, std::span<const EhrRecord> train, std::span<const EhrRecord> val,
                               const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  FinetuneResult result;
  Adam optimizer(detail::adam_options(config));
  ParameterList backbone = backbone_parameters(model.backbone);
  ParameterList head = label_decoder_parameters(model);
  auto emb = embedding_decoder_parameters(model);
  set_trainable(emb, false);
  set_trainable(head, true);
  ParameterList params = backbone;
  params.insert(params.end(), head.begin(), head.end());

  const TaskSpec& task = model.config.task;
  std::optional<MartModel> best;
  for (std::size_t epoch = 0; epoch < config.finetune_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const bool frozen = epoch < config.unfreeze_epoch;
    set_trainable(backbone, !frozen);
    if (epoch > 0 && epoch == config.unfreeze_epoch) optimizer.reset();

    auto rng = detail::epoch_rng(config.seed, detail::Stage::finetune, epoch);
    const auto order = detail::shuffled_order(train.size(), rng);
    const ForwardMode mode{true, &rng, nullptr};
    double loss_total = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const double normalizer = static_cast<double>((end - begin) * (task.kind == TaskKind::multilabel ? task.outputs : 1));
      zero_grads(params);
      double batch_loss = 0.0;
      for (std::size_t mb = begin; mb < end; mb += config.micro_batch) {
        const std::size_t mb_end = std::min(end, mb + config.micro_batch);
        const Batch batch = make_batch(train, std::span<const std::size_t>(order.data() + mb, mb_end - mb));
        Tensor loss = task_loss(predict_logits(model, batch, mode), batch, task, normalizer);
        batch_loss += loss.item();
        backward(loss);
      }
      if (!std::isfinite(batch_loss))
        throw NumericError("fine-tuning loss is not finite at epoch " + std::to_string(epoch));
      optimizer.step(params);
      loss_total += batch_loss;
      ++steps;
    }
    zero_grads(params);

    const auto metric = val.empty() ? std::nullopt : selection_metric(evaluate(model, val, config.f1_threshold));
    const bool improved = !best || val.empty() || (metric && (!result.best_val_metric || *metric > *result.best_val_metric));
    if (improved) {
      best = clone(model);
      result.best_epoch = epoch;
      result.best_val_metric = metric;
    }
    result.log.push_back({"finetune", epoch, steps ? loss_total / static_cast<double>(steps) : 0.0, metric,
                          detail::seconds_since(start)});
    if (on_epoch) on_epoch(result.log.back());
  }
  if (best) model = std::move(*best);
  auto all = all_parameters(model);
  set_trainable(all, true);
  return result;
}

}  // namespace smart

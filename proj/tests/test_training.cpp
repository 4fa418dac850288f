#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "smart/smart.hpp"

using namespace smart;
using oracle::grad_check;

namespace {

SplitDataset small_data(std::uint64_t seed = 3, TaskSpec task = TaskSpec::binary()) {
  SyntheticSpec spec;
  spec.n_patients = 120;
  spec.n_vars = 3;
  spec.t_max = 8;
  spec.observed_rate = 0.5;
  spec.positive_rate = 0.3;
  spec.seed = seed;
  spec.task = task;
  auto data = generate_synthetic(spec).splits;
  zscore_fit_apply(data);
  return data;
}

ModelConfig small_model(std::size_t N = 3, TaskSpec task = TaskSpec::binary()) {
  ModelConfig c;
  c.n_vars = N;
  c.d = 8;
  c.heads = 2;
  c.layers = 2;
  c.task = task;
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.pretrain_epochs = 2;
  t.finetune_epochs = 3;
  t.unfreeze_epoch = 1;
  t.batch_size = 32;
  t.micro_batch = 16;
  return t;
}

std::vector<double> snapshot(const ParameterList& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void randomize(ParameterList params, std::mt19937_64& rng, double lo = -0.5, double hi = 0.5) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& p : params)
    for (auto& v : p.tensor.data()) v = u(rng);
}

std::vector<Tensor> leaves(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

}  // namespace

TEST(ComposedModel, PretrainLossGradientsMatchFiniteDifference) {
  auto model = init_model(small_model(), 1);
  std::mt19937_64 rng(2);
  randomize(all_parameters(model), rng);
  const auto teacher = clone(model.backbone);
  auto records = oracle::random_records(rng, 3, 4, 3, 0.7, 4);
  std::vector<std::size_t> idx{0, 1, 2};
  std::vector<MaskPlan> plans;
  for (const auto& r : records) {
    auto prng = plan_rng(5, plans.size(), 0);
    plans.push_back(sample_mask_plan_at_rate(extend_mask(r.m, r.T, r.N), r.T + 1, r.N, 0.5, prng));
  }
  ParameterList params = backbone_parameters(model.backbone);
  for (auto& p : embedding_decoder_parameters(model)) params.push_back(p);
  EXPECT_LT(grad_check([&] { return pretrain_batch_loss(model, teacher, records, idx, plans, 7.0, {}); }, leaves(params)),
            1e-4);
}

TEST(ComposedModel, TaskLossGradientsMatchFiniteDifference) {
  auto model = init_model(small_model(), 3);
  std::mt19937_64 rng(4);
  randomize(all_parameters(model), rng);
  auto records = oracle::random_records(rng, 3, 4, 3, 0.6, 2);
  const auto batch = make_batch(records);
  auto params = backbone_parameters(model.backbone);
  for (auto& p : label_decoder_parameters(model)) params.push_back(p);
  EXPECT_LT(grad_check([&] { return task_loss(predict_logits(model, batch), batch, model.config.task, 3.0); },
                       leaves(params)),
            1e-4);
}

TEST(PretrainLoss, HandComputedL1) {
  std::mt19937_64 rng(5);
  const auto pred = oracle::random_tensor(Shape{1, 2, 2, 3}, rng);
  const auto target = oracle::random_tensor(Shape{1, 2, 2, 3}, rng);
  const std::vector<double> w{0, 1, 1, 0};
  double expected = 0.0;
  for (std::size_t cell : {1u, 2u})
    for (std::size_t c = 0; c < 3; ++c) expected += std::abs(pred[cell * 3 + c] - target[cell * 3 + c]);
  EXPECT_NEAR(pretrain_loss(pred, target, w, 6.0).item(), expected / 6.0, 1e-14);
}

TEST(PretrainLoss, EmptyPlanGivesZero) {
  auto model = init_model(small_model(), 6);
  std::mt19937_64 rng(7);
  const auto records = oracle::random_records(rng, 4, 5, 3);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  std::vector<MaskPlan> plans;
  for (const auto& r : records) plans.push_back({r.T + 1, r.N, std::vector<std::uint8_t>((r.T + 1) * r.N, 0), 0.0});
  EXPECT_EQ(pretrain_batch_loss(model, model.backbone, records, idx, plans, 1.0, {}).item(), 0.0);
}

TEST(PretrainLoss, TargetOutsideRemovedCellsIsIrrelevant) {
  std::mt19937_64 rng(8);
  const auto pred = oracle::random_tensor(Shape{2, 3, 2, 4}, rng);
  auto target = oracle::random_tensor(Shape{2, 3, 2, 4}, rng);
  std::vector<double> w(12);
  for (auto& v : w) v = rng() & 1;
  const double base = pretrain_loss(pred, target, w, 1.0).item();
  for (std::size_t cell = 0; cell < 12; ++cell)
    if (w[cell] == 0.0)
      for (std::size_t c = 0; c < 4; ++c) target[cell * 4 + c] += 10.0;
  EXPECT_EQ(pretrain_loss(pred, target, w, 1.0).item(), base);
}

TEST(PretrainLoss, ClsRowNeverWeighted) {
  std::mt19937_64 rng(9);
  const auto records = oracle::random_records(rng, 5, 6, 4, 0.8, 2);
  const auto batch = make_batch(records);
  const auto model = init_model(small_model(4), 10);
  const auto state = encode(batch, model.backbone.encoder);
  std::vector<MaskPlan> plans;
  for (const auto& r : records) {
    auto ext = extend_mask(r.m, r.T, r.N);
    plans.push_back(sample_mask_plan_at_rate(ext, r.T + 1, r.N, 1.0, rng));
  }
  const auto w = removal_weights(state, plans);
  for (std::size_t b = 0; b < state.B; ++b) {
    for (std::size_t n = 0; n < state.N; ++n) EXPECT_EQ(w[state.index(b, 0, n)], 0.0);
    std::size_t count = 0;
    for (std::size_t r = 0; r < state.rows; ++r)
      for (std::size_t n = 0; n < state.N; ++n) count += w[state.index(b, r, n)] != 0.0;
    EXPECT_EQ(count, records[b].observed_count());
  }
}

TEST(Ema, Endpoints) {
  auto student = init_model(small_model(), 11).backbone;
  auto teacher = init_model(small_model(), 12).backbone;
  const auto t0 = snapshot(backbone_parameters(teacher));
  ema_update(teacher, student, 1.0);
  EXPECT_EQ(snapshot(backbone_parameters(teacher)), t0);
  ema_update(teacher, student, 0.0);
  EXPECT_EQ(snapshot(backbone_parameters(teacher)), snapshot(backbone_parameters(student)));
}

TEST(Ema, OneStepAndClosedForm) {
  const auto student = init_model(small_model(), 13).backbone;
  auto teacher = init_model(small_model(), 14).backbone;
  const auto s = snapshot(backbone_parameters(student));
  const auto t0 = snapshot(backbone_parameters(teacher));
  ema_update(teacher, student, 0.996);
  auto t1 = snapshot(backbone_parameters(teacher));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(t1[i], 0.996 * t0[i] + 0.004 * s[i], 1e-15);
  for (int k = 2; k <= 50; ++k) ema_update(teacher, student, 0.996);
  const double lk = std::pow(0.996, 50);
  const auto t50 = snapshot(backbone_parameters(teacher));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(t50[i], lk * t0[i] + (1.0 - lk) * s[i], 1e-12);
}

TEST(Ema, MismatchedBackbonesRejected) {
  auto a = init_model(small_model(), 15).backbone;
  auto cfg = small_model();
  cfg.layers = 1;
  const auto b = init_model(cfg, 15).backbone;
  EXPECT_THROW(ema_update(a, b, 0.5), std::invalid_argument);
}

TEST(Pretrain, TeacherStartsAsCopyAndIsFrozen) {
  const auto model = init_model(small_model(), 16);
  const auto st = start_pretraining(model, small_train());
  EXPECT_EQ(snapshot(backbone_parameters(st.teacher)), snapshot(backbone_parameters(model.backbone)));
  for (const auto& p : backbone_parameters(st.teacher)) EXPECT_FALSE(p.trainable());
}

TEST(Pretrain, LabelDecoderUntouchedAndTeacherFollows) {
  const auto data = small_data();
  auto model = init_model(small_model(), 17);
  auto st = start_pretraining(model, small_train());
  const auto head0 = snapshot(label_decoder_parameters(model));
  const auto bb0 = snapshot(backbone_parameters(model.backbone));
  pretrain_epoch(model, st, data.train, small_train(), 0);
  EXPECT_EQ(snapshot(label_decoder_parameters(model)), head0);
  const auto student = snapshot(backbone_parameters(model.backbone));
  const auto teacher = snapshot(backbone_parameters(st.teacher));
  EXPECT_NE(student, bb0);
  EXPECT_NE(teacher, bb0);
  EXPECT_NE(teacher, student);
}

TEST(Pretrain, LossDecreases) {
  const auto data = small_data(4);
  auto model = init_model(small_model(), 18);
  auto config = small_train();
  config.pretrain_epochs = 6;
  auto st = start_pretraining(model, config);
  const auto log = pretrain(model, st, data.train, config);
  ASSERT_EQ(log.size(), 6u);
  for (const auto& e : log) EXPECT_TRUE(std::isfinite(e.loss));
  EXPECT_LT(log.back().loss, log.front().loss);
}

TEST(Pretrain, BitwiseDeterministic) {
  const auto data = small_data(5);
  auto run = [&] {
    auto model = init_model(small_model(), 19);
    auto st = start_pretraining(model, small_train());
    const auto log = pretrain(model, st, data.train, small_train());
    auto out = snapshot(all_parameters(model));
    out.push_back(log.back().loss);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Pretrain, AblationVariantsRun) {
  const auto data = small_data(6);
  for (int variant = 0; variant < 3; ++variant) {
    auto cfg = small_model();
    if (variant == 0) cfg.ablation.no_cls = true;
    if (variant == 1) cfg.ablation.impute_input_space = true;
    if (variant == 2) cfg.ablation.no_mask = true;
    auto model = init_model(cfg, 20);
    auto st = start_pretraining(model, small_train());
    const auto log = pretrain_epoch(model, st, data.train, small_train(), 0);
    EXPECT_TRUE(std::isfinite(log.loss)) << variant;
    EXPECT_GT(log.loss, 0.0) << variant;
  }
}

TEST(Decoders, OutputWidths) {
  auto cfg = small_model();
  auto model = init_model(cfg, 21);
  EXPECT_EQ(model.embedding_decoder.second.weight.shape(), (Shape{8, 8}));
  EXPECT_EQ(model.label_decoder.out.weight.shape(), (Shape{8, 1}));
  cfg.ablation.impute_input_space = true;
  cfg.task = TaskSpec::multilabel(25);
  model = init_model(cfg, 21);
  EXPECT_EQ(model.embedding_decoder.second.weight.shape(), (Shape{8, 1}));
  EXPECT_EQ(model.label_decoder.out.weight.shape(), (Shape{8, 25}));
}

TEST(Finetune, FrozenEpochsKeepBackboneBitwise) {
  const auto data = small_data(7);
  auto model = init_model(small_model(), 22);
  auto config = small_train();
  config.finetune_epochs = 4;
  config.unfreeze_epoch = 2;
  const auto bb0 = snapshot(backbone_parameters(model.backbone));
  const auto emb0 = snapshot(embedding_decoder_parameters(model));
  std::vector<bool> backbone_same;
  finetune(model, data.train, {}, config, [&](const EpochLog&) {
    backbone_same.push_back(snapshot(backbone_parameters(model.backbone)) == bb0);
    EXPECT_EQ(snapshot(embedding_decoder_parameters(model)), emb0);
  });
  EXPECT_EQ(backbone_same, (std::vector<bool>{true, true, false, false}));
  EXPECT_EQ(snapshot(embedding_decoder_parameters(model)), emb0);
}

TEST(Finetune, ZeroEpochsReturnsInitialModel) {
  const auto data = small_data(8);
  auto model = init_model(small_model(), 23);
  const auto before = snapshot(all_parameters(model));
  auto config = small_train();
  config.finetune_epochs = 0;
  const auto result = finetune(model, data.train, data.val, config);
  EXPECT_TRUE(result.log.empty());
  EXPECT_FALSE(result.best_epoch);
  EXPECT_EQ(snapshot(all_parameters(model)), before);
}

TEST(Finetune, RestoresBestValidationEpoch) {
  const auto data = small_data(9);
  auto model = init_model(small_model(), 24);
  auto config = small_train();
  config.finetune_epochs = 4;
  std::vector<std::vector<double>> states;
  const auto result =
      finetune(model, data.train, data.val, config, [&](const EpochLog&) { states.push_back(snapshot(all_parameters(model))); });
  ASSERT_TRUE(result.best_epoch);
  double best = -1.0;
  std::size_t arg = 0;
  for (const auto& e : result.log)
    if (e.val_metric && *e.val_metric > best) {
      best = *e.val_metric;
      arg = e.epoch;
    }
  EXPECT_EQ(*result.best_epoch, arg);
  EXPECT_EQ(snapshot(all_parameters(model)), states[arg]);
  EXPECT_EQ(selection_metric(evaluate(model, data.val)), result.best_val_metric);
}

TEST(Finetune, WithoutValidationKeepsLastEpoch) {
  const auto data = small_data(10);
  auto model = init_model(small_model(), 25);
  std::vector<double> last;
  finetune(model, data.train, {}, small_train(), [&](const EpochLog&) { last = snapshot(all_parameters(model)); });
  EXPECT_EQ(snapshot(all_parameters(model)), last);
}

TEST(Finetune, MultilabelAndMulticlassRun) {
  for (const auto task : {TaskSpec::multilabel(4), TaskSpec::multiclass(3)}) {
    const auto data = small_data(11, task);
    auto model = init_model(small_model(3, task), 26);
    const auto result = finetune(model, data.train, data.val, small_train());
    for (const auto& e : result.log) EXPECT_TRUE(std::isfinite(e.loss));
    const auto report = evaluate(model, data.test);
    EXPECT_EQ(report.task, to_string(task.kind));
    EXPECT_TRUE(report.ma_roc.has_value());
  }
}

TEST(Predict, UntrainedModelPredictsOneHalf) {
  std::mt19937_64 rng(27);
  const auto records = oracle::random_records(rng, 6, 6, 3);
  for (double p : predict(init_model(small_model(), 28), records)) EXPECT_EQ(p, 0.5);
}

TEST(Predict, RangesAndClassRows) {
  std::mt19937_64 rng(29);
  const auto records = oracle::random_records(rng, 9, 6, 3);
  for (const auto task : {TaskSpec::binary(), TaskSpec::multilabel(4), TaskSpec::multiclass(5)}) {
    auto model = init_model(small_model(3, task), 30);
    randomize(label_decoder_parameters(model), rng);
    const auto p = predict(model, records);
    ASSERT_EQ(p.size(), records.size() * task.outputs);
    for (double v : p) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    if (task.kind == TaskKind::multiclass) {
      for (std::size_t i = 0; i < records.size(); ++i)
        EXPECT_NEAR(std::accumulate(p.begin() + i * 5, p.begin() + (i + 1) * 5, 0.0), 1.0, 1e-12);
    }
  }
}

TEST(Predict, DeterministicAndBatchInvariant) {
  std::mt19937_64 rng(31);
  auto records = oracle::random_records(rng, 13, 9, 3);
  auto model = init_model(small_model(), 32);
  randomize(label_decoder_parameters(model), rng);
  const auto a = predict(model, records, 4);
  EXPECT_EQ(a, predict(model, records, 4));
  const auto whole = predict(model, records, 64);
  std::vector<std::size_t> perm(records.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<EhrRecord> shuffled;
  for (auto i : perm) shuffled.push_back(records[i]);
  const auto b = predict(model, shuffled, 5);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_NEAR(b[i], a[perm[i]], 1e-12);
    EXPECT_NEAR(whole[i], a[i], 1e-12);
  }
}

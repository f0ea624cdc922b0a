#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <utility>

#include "reference_training.hpp"
#include "shike/archive.hpp"
#include "shike/errors.hpp"
#include "shike/eval.hpp"
#include "shike/train.hpp"

using namespace shike;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(std::size_t experts, std::size_t classes, std::size_t dims) {
  ModelConfig c;
  c.backbone.input_shape = {dims};
  c.backbone.stage_widths = {8, 8, 8};
  c.backbone.expert_width = 8;
  c.num_classes = classes;
  c.num_experts = experts;
  c.seed = 4;
  return c;
}

TrainConfig quick(std::size_t e1, std::size_t e2) {
  TrainConfig t;
  t.epochs_stage1 = e1;
  t.epochs_stage2 = e2;
  t.batch_size = 16;
  t.seed = 2;
  return t;
}

std::pair<LabeledDataset, LabeledDataset> toy(std::size_t classes = 4, std::uint64_t seed = 1) {
  return synth_gaussian_lt(classes, 6, make_longtail_counts(classes, 60, 10), 3.0, seed);
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 10, 0.1) == 0.1);
  CHECK(std::abs(cosine_lr(10, 10, 0.1)) < 1e-18);
  CHECK(cosine_lr(5, 10, 0.1) == doctest::Approx(0.05).epsilon(1e-14));
  CHECK_THROWS(cosine_lr(0, 0, 0.1));
  CHECK_THROWS(cosine_lr(11, 10, 0.1));
}

TEST_CASE("epoch order") {
  const auto a = epoch_order(50, 3, TrainingStage::representation, 4);
  CHECK(a == epoch_order(50, 3, TrainingStage::representation, 4));
  CHECK(a != epoch_order(50, 3, TrainingStage::representation, 5));
  CHECK(a != epoch_order(50, 3, TrainingStage::classifier, 4));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("config validation") {
  TrainConfig t;
  t.validate();
  t.momentum = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.weights.tau = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("single expert without distillation equals plain CE training") {
  auto [train, test] = toy();
  auto mc = small_model(1, 4, 6);
  mc.use_dkf = false;
  TrainConfig tc = quick(4, 1);
  tc.weights = {0.0, 0.0, 1.0};
  TrainState state(ShikeModel{mc});
  ShikeModel ref(mc);
  reference::PlainSgd opt;
  for (std::size_t e = 0; e < tc.epochs_stage1; ++e) {
    run_stage1(state, train, tc, e + 1);
    reference::ce_epoch(ref, opt, train, tc, e);
    CHECK(reference::max_param_diff(state.model, ref) < 1e-12);
  }
  (void)test;
}

TEST_CASE("finite-difference gradient step on a 2-class toy") {
  auto [train, test] = synth_gaussian_lt(2, 3, std::vector<std::size_t>{6, 3}, 2.0, 5);
  auto mc = small_model(3, 2, 3);
  mc.backbone.stage_widths = {3, 3, 3};
  mc.backbone.expert_width = 3;
  TrainConfig tc = quick(1, 1);
  // With two classes L_nt vanishes; L_mu is left out because finite
  // differences would also move its stop-gradient teacher.
  tc.weights = {1.0, 0.0, 1.0};
  ShikeModel model(mc);
  const auto objective = [&](ShikeModel& m) {
    std::vector<Tensor> g;
    const auto out = m.forward(train.inputs);
    return representation_objective(out.logits, train.labels, tc, g).total;
  };
  std::vector<Tensor> g;
  model.zero_grad();
  const auto out = model.forward(train.inputs);
  representation_objective(out.logits, train.labels, tc, g);
  model.backward(g);
  auto refs = model.state();
  std::vector<Tensor> fd;
  for (auto& [_, p] : refs.params) {
    Tensor d(p->value.shape());
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double keep = p->value[k];
      p->value[k] = keep + 1e-6;
      const double up = objective(model);
      p->value[k] = keep - 1e-6;
      const double down = objective(model);
      p->value[k] = keep;
      d[k] = (up - down) / 2e-6;
    }
    fd.push_back(d);
  }
  double diff = 0.0, size = 0.0;
  for (std::size_t i = 0; i < refs.params.size(); ++i)
    for (std::size_t k = 0; k < fd[i].size(); ++k) {
      const double step_a = tc.base_lr * refs.params[i].second->grad[k];
      const double step_f = tc.base_lr * fd[i][k];
      diff = std::max(diff, std::abs(step_a - step_f));
      size = std::max(size, std::abs(refs.params[i].second->value[k]));
    }
  CHECK(diff / size < 1e-4);
  (void)test;
}

TEST_CASE("full-batch descent on a separable toy") {
  auto [train, test] = synth_gaussian_lt(2, 4, std::vector<std::size_t>{20, 10}, 6.0, 7);
  auto mc = small_model(3, 2, 4);
  TrainConfig tc = quick(1, 1);
  tc.momentum = 0.0;
  tc.weight_decay = 0.0;
  tc.base_lr = 0.02;
  tc.weights = {0.5, 0.5, 1.0};
  TrainState state(ShikeModel{mc});
  double previous = INFINITY;
  const std::vector<bool> all(state.velocity.size(), true);
  for (int step = 0; step < 10; ++step) {
    std::vector<Tensor> g;
    state.model.zero_grad();
    const auto out = state.model.forward(train.inputs);
    const double loss = representation_objective(out.logits, train.labels, tc, g).total;
    CHECK(loss <= previous + 1e-12);
    previous = loss;
    state.model.backward(g);
    sgd_step(state, tc.base_lr, tc, all);
  }
  (void)test;
}

TEST_CASE("balanced counts make the classifier objective plain CE") {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  std::vector<Tensor> logits(2, Tensor({5, 4}));
  for (auto& z : logits)
    for (auto& v : z.values()) v = n(rng);
  const std::vector<std::size_t> labels{0, 3, 1, 2, 2};
  const std::vector<std::size_t> counts(4, 25);
  std::vector<Tensor> g1, g2;
  TrainConfig tc;
  tc.weights = {0.0, 0.0, 1.0};
  const auto a = classifier_objective(logits, labels, counts, g1);
  const auto b = representation_objective(logits, labels, tc, g2);
  CHECK(std::abs(a.total - b.total) < 1e-12);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t k = 0; k < g1[m].size(); ++k) CHECK(std::abs(g1[m][k] - g2[m][k]) < 1e-12);
}

TEST_CASE("stage 2 freezes everything except the heads") {
  auto [train, test] = toy();
  TrainConfig tc = quick(2, 3);
  TrainState s1 = train_stage1(ShikeModel(small_model(3, 4, 6)), train, tc);
  CHECK(s1.stage == TrainingStage::representation);
  const ShikeModel before = s1.model;
  TrainState s2 = train_stage2(s1, train, tc);
  CHECK(s2.stage == TrainingStage::classifier);
  const auto ra = before.state();
  const auto rb = std::as_const(s2.model).state();
  bool head_changed = false;
  for (std::size_t i = 0; i < ra.params.size(); ++i) {
    const bool head = param_group(ra.params[i].first) == ParamGroup::head;
    if (head)
      head_changed |= !(ra.params[i].second->value == rb.params[i].second->value);
    else
      CHECK(ra.params[i].second->value == rb.params[i].second->value);
  }
  for (std::size_t i = 0; i < ra.buffers.size(); ++i) CHECK(*ra.buffers[i].second == *rb.buffers[i].second);
  CHECK(head_changed);
  std::size_t stage2_epochs = 0;
  for (const auto& m : s2.history)
    if (m.stage == TrainingStage::classifier) {
      ++stage2_epochs;
      CHECK(m.frozen_grad_norm == 0.0);
      CHECK(m.nt == 0.0);
    }
  CHECK(stage2_epochs == 3);
  CHECK(s2.history[2].lr == tc.base_lr);

  CHECK_THROWS(train_stage2(s2, train, tc));
  CHECK_THROWS(train_stage2(TrainState(ShikeModel(small_model(3, 4, 6))), train, tc));
  (void)test;
}

TEST_CASE("determinism, checkpoints and resume") {
  const fs::path dir = fs::temp_directory_path() / "shike_test_train";
  fs::create_directories(dir);
  auto [train, test] = toy();
  const auto division = split_divisions(train.spec);
  TrainConfig tc = quick(4, 2);

  TrainState a = train_stage2(train_stage1(ShikeModel(small_model(3, 4, 6)), train, tc), train, tc);
  TrainState b = train_stage2(train_stage1(ShikeModel(small_model(3, 4, 6)), train, tc), train, tc);
  CHECK(evaluate(a.model, test, division) == evaluate(b.model, test, division));

  save_checkpoint(a, dir / "a.ckpt");
  TrainState loaded = load_checkpoint(dir / "a.ckpt", 4);
  CHECK(evaluate(loaded.model, test, division) == evaluate(a.model, test, division));
  CHECK(loaded.stage == TrainingStage::classifier);
  CHECK(loaded.history.size() == a.history.size());
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", 5), FormatError);

  TrainState part(ShikeModel(small_model(3, 4, 6)));
  run_stage1(part, train, tc, 2);
  save_checkpoint(part, dir / "part.ckpt");
  TrainState resumed = load_checkpoint(dir / "part.ckpt");
  CHECK(resumed.epoch == 2);
  run_stage1(resumed, train, tc);
  TrainState whole = train_stage1(ShikeModel(small_model(3, 4, 6)), train, tc);
  CHECK(reference::max_param_diff(resumed.model, whole.model) == 0.0);
  for (std::size_t i = 0; i < resumed.velocity.size(); ++i) CHECK(resumed.velocity[i] == whole.velocity[i]);

  auto archive = read_archive(dir / "a.ckpt");
  archive.header["format_version"] = kCheckpointVersion + 1;
  write_archive(dir / "bad.ckpt", archive);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("non-finite losses abort with a dump") {
  auto [train, test] = toy();
  train.inputs[3] = NAN;
  TrainState state(ShikeModel(small_model(2, 4, 6)));
  try {
    run_stage1(state, train, quick(1, 1));
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(e.dump().find("logits") != std::string::npos);
  }
  (void)test;
}

TEST_CASE("classifier retraining lifts few-shot accuracy") {
  double few1 = 0.0, few2 = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [train, test] = synth_gaussian_lt(10, 8, make_longtail_counts(10, 200, 100), 3.0, seed);
    const auto division = split_divisions(train.spec);
    TrainConfig tc = quick(15, 10);
    tc.seed = seed;
    auto mc = small_model(3, 10, 8);
    mc.seed = seed;
    TrainState s1 = train_stage1(ShikeModel(mc), train, tc);
    few1 += *evaluate(s1.model, test, division).few;
    TrainState s2 = train_stage2(std::move(s1), train, tc);
    few2 += *evaluate(s2.model, test, division).few;
  }
  CHECK(few2 > few1);
}

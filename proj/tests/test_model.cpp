#include <doctest.h>

#include <cmath>
#include <random>

#include "shike/errors.hpp"
#include "shike/model.hpp"

using namespace shike;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

ModelConfig tiny_mlp(std::size_t experts, bool dkf) {
  ModelConfig c;
  c.backbone.family = BackboneFamily::mlp;
  c.backbone.input_shape = {4};
  c.backbone.stage_widths = {3, 5, 3};
  c.backbone.expert_width = 4;
  c.num_classes = 3;
  c.num_experts = experts;
  c.use_dkf = dkf;
  c.seed = 7;
  return c;
}

ModelConfig tiny_cnn(std::size_t experts) {
  ModelConfig c;
  c.backbone.family = BackboneFamily::cnn;
  c.backbone.input_shape = {1, 4, 4};
  c.backbone.stage_widths = {2, 2};
  c.backbone.expert_width = 2;
  c.num_classes = 3;
  c.num_experts = experts;
  c.seed = 3;
  return c;
}

double objective(ShikeModel& model, const Tensor& x, const std::vector<Tensor>& g) {
  const auto out = model.forward(x);
  double s = 0.0;
  for (std::size_t m = 0; m < g.size(); ++m)
    for (std::size_t i = 0; i < g[m].size(); ++i) s += g[m][i] * out.logits[m][i];
  return s;
}

void check_model_grad(ShikeModel& model, const Tensor& x, Rng& rng) {
  const auto out = model.forward(x);
  std::vector<Tensor> g;
  for (const auto& z : out.logits) g.push_back(random_tensor(z.shape(), rng));
  model.zero_grad();
  model.backward(g);
  auto refs = model.state();
  const double h = 1e-5;
  for (auto& [name, p] : refs.params) {
    double diff = 0.0, na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = objective(model, x, g);
      p->value[i] = keep - h;
      const double down = objective(model, x, g);
      p->value[i] = keep;
      const double fd = (up - down) / (2 * h);
      diff += (fd - p->grad[i]) * (fd - p->grad[i]);
      na += p->grad[i] * p->grad[i];
      nf += fd * fd;
    }
    INFO(name);
    CHECK(std::sqrt(diff) <= 1e-4 * std::max({std::sqrt(na), std::sqrt(nf), 1e-6}));
  }
}

}  // namespace

TEST_CASE("assign_depths") {
  CHECK(assign_depths(3, 3) == std::vector<std::size_t>{1, 2, 3});
  CHECK(assign_depths(1, 3) == std::vector<std::size_t>{3});
  CHECK(assign_depths(3, 2) == std::vector<std::size_t>{1, 1, 2});
  CHECK(assign_depths(2, 3) == std::vector<std::size_t>{1, 3});
  CHECK(assign_depths(4, 3) == std::vector<std::size_t>{1, 1, 2, 3});
  CHECK(assign_depths(5, 3) == std::vector<std::size_t>{1, 2, 3, 1, 2});
  CHECK(assign_depths(2, 1) == std::vector<std::size_t>{1, 1});
}

TEST_CASE("backbone feature stack") {
  Rng rng(1);
  BackboneConfig one;
  one.input_shape = {4};
  one.stage_widths = {6};
  Backbone b1(one, rng);
  const Tensor x = random_tensor({3, 4}, rng);
  const auto f = b1.infer(x);
  CHECK(f.size() == 1);
  CHECK(f[0] == b1.stage(1).infer(x));

  BackboneConfig three;
  three.input_shape = {4};
  three.stage_widths = {5, 6, 7};
  three.blocks_per_stage = 2;
  Backbone b3(three, rng);
  const auto fs = b3.infer(x);
  CHECK(fs[1] == b3.stage(2).infer(b3.stage(1).infer(x)));
  CHECK(fs[2].shape() == Shape{3, 7});

  three.batch_norm = false;
  Backbone zero(three, rng);
  StateRefs refs;
  zero.collect("b", refs);
  for (auto& [_, p] : refs.params) p->value.fill(0.0);
  for (const auto& t : zero.infer(x))
    for (double v : t.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(b3.infer(random_tensor({3, 5}, rng)), ShapeError);
}

TEST_CASE("alignment shapes") {
  Rng rng(2);
  const auto plan = plan_alignment(BackboneFamily::cnn, {16, 32, 32}, {64, 8, 8});
  CHECK(plan.size() == 2);
  CHECK_THROWS_AS(plan_alignment(BackboneFamily::cnn, {16, 8, 8}, {64, 16, 16}), ConfigError);

  ModelConfig cifar;
  cifar.backbone.family = BackboneFamily::cnn;
  cifar.backbone.input_shape = {3, 32, 32};
  cifar.backbone.stage_widths = {16, 32};
  cifar.backbone.expert_width = 64;
  cifar.num_experts = 3;
  ShikeModel model(cifar);
  CHECK(model.taps() == std::vector<std::size_t>{1, 1, 2});
  CHECK(model.backbone().feature_shape(1) == Shape{16, 32, 32});
  CHECK(model.expert(0).exclusive_shape() == Shape{64, 8, 8});
  CHECK(model.expert(0).alignment()->num_blocks() == 2);
  CHECK(model.expert(0).alignment()->output_shape() == Shape{64, 8, 8});
  CHECK(model.expert(2).alignment()->num_blocks() == 1);
  const auto out = model.infer(random_tensor({1, 3, 32, 32}, rng));
  CHECK(out.fused[0].shape() == Shape{1, 64, 8, 8});
  CHECK(out.logits[2].shape() == Shape{1, 10});

  const auto id = AlignmentPath::identity(BackboneFamily::cnn, {3, 4, 4});
  const Tensor x = random_tensor({2, 3, 4, 4}, rng);
  CHECK(id.infer(x) == x);
  const auto idm = AlignmentPath::identity(BackboneFamily::mlp, {5});
  const Tensor v = random_tensor({2, 5}, rng);
  CHECK(idm.infer(v) == v);

  auto mlp = tiny_mlp(3, true);
  ShikeModel m(mlp);
  for (std::size_t e = 0; e < 3; ++e)
    CHECK(m.expert(e).alignment()->num_blocks() == mlp.backbone.num_stages() + 1 - m.taps()[e]);
}

TEST_CASE("expert fusion identities") {
  Rng rng(3);
  ShikeModel model(tiny_mlp(3, true));
  const Tensor x = random_tensor({5, 4}, rng);
  const auto feats = model.backbone().infer(x);
  const auto& e = model.expert(1);
  const Tensor high = e.exclusive(feats.back());

  const auto ones = e.fuse_and_classify(feats.back(), Tensor(high.shape(), 1.0));
  CHECK(ones.fused == high);
  const auto zeros = e.fuse_and_classify(feats.back(), Tensor(high.shape(), 0.0));
  for (double v : zeros.fused.values()) CHECK(v == 0.0);
  for (std::size_t b = 0; b < 5; ++b)
    for (std::size_t c = 0; c < 3; ++c) CHECK(zeros.logits.sample(b)[c] == e.head().bias().value[c]);

  const Tensor aligned = e.align(feats[e.tap() - 1]);
  const auto fused = e.fuse_and_classify(feats.back(), aligned);
  for (std::size_t i = 0; i < high.size(); ++i) CHECK(fused.fused[i] == aligned[i] * high[i]);
  CHECK(fused.logits == e.infer(feats.back(), feats[e.tap() - 1]).logits);
  CHECK_THROWS_AS(e.fuse_and_classify(feats.back(), Tensor({5, 3})), ShapeError);
}

TEST_CASE("ensemble prediction") {
  MoEOutput out;
  out.logits = {Tensor({1, 2}, std::vector<double>{1, 0}), Tensor({1, 2}, std::vector<double>{0, 2})};
  out.ensemble = Tensor({1, 2}, std::vector<double>{1, 2});
  CHECK(ensemble_predict(out) == std::vector<std::size_t>{1});
  CHECK(argmax(std::vector<double>{3, 3, 1}) == 0);

  Rng rng(4);
  const Tensor x = random_tensor({8, 4}, rng);
  ShikeModel model(tiny_mlp(3, true));
  const auto o = model.infer(x);
  Tensor sum = o.logits[0];
  sum += o.logits[1];
  sum += o.logits[2];
  CHECK(o.ensemble == sum);

  ShikeModel single(tiny_mlp(1, false));
  const auto so = single.infer(x);
  CHECK(ensemble_predict(so) == argmax_rows(so.logits[0]));

  MoEOutput same;
  same.logits = {so.logits[0], so.logits[0], so.logits[0]};
  same.ensemble = so.logits[0];
  same.ensemble += so.logits[0];
  same.ensemble += so.logits[0];
  CHECK(ensemble_predict(same) == argmax_rows(so.logits[0]));
}

TEST_CASE("ensemble argmax ignores a shared constant shift") {
  Rng rng(5);
  ShikeModel model(tiny_mlp(2, true));
  auto o = model.infer(random_tensor({16, 4}, rng));
  const auto before = ensemble_predict(o);
  std::normal_distribution<double> n(0.0, 3.0);
  for (auto& z : o.logits)
    for (std::size_t b = 0; b < 16; ++b) {
      const double shift = n(rng);
      for (auto& v : z.sample(b)) v += shift;
    }
  o.ensemble = o.logits[0];
  o.ensemble += o.logits[1];
  CHECK(ensemble_predict(o) == before);
}

TEST_CASE("shape soundness over random configurations") {
  std::mt19937_64 pick(9);
  for (int i = 0; i < 25; ++i) {
    ModelConfig c;
    c.seed = i;
    c.num_classes = 2 + pick() % 5;
    c.num_experts = 1 + pick() % 5;
    c.use_dkf = pick() % 4 != 0;
    const std::size_t stages = 1 + pick() % 3;
    c.backbone.stage_widths.clear();
    if (i % 2 == 0) {
      c.backbone.family = BackboneFamily::mlp;
      c.backbone.input_shape = {1 + pick() % 6};
    } else {
      c.backbone.family = BackboneFamily::cnn;
      c.backbone.input_shape = {1 + pick() % 3, 8, 8};
    }
    for (std::size_t s = 0; s < stages; ++s) c.backbone.stage_widths.push_back(1 + pick() % 5);
    c.backbone.expert_width = 1 + pick() % 5;
    c.backbone.blocks_per_stage = 1 + pick() % 2;
    ShikeModel model(c);
    Rng rng(i);
    Shape in{3};
    for (auto d : c.backbone.input_shape) in.push_back(d);
    const auto out = model.infer(random_tensor(in, rng));
    REQUIRE(out.logits.size() == c.num_experts);
    for (std::size_t m = 0; m < c.num_experts; ++m) {
      CHECK(out.logits[m].shape() == Shape{3, c.num_classes});
      if (c.use_dkf) CHECK(model.expert(m).alignment()->output_shape() == model.expert(m).exclusive_shape());
    }
  }
}

TEST_CASE("model gradients match central differences") {
  Rng rng(6);
  SUBCASE("mlp with fusion") {
    ShikeModel model(tiny_mlp(3, true));
    check_model_grad(model, random_tensor({4, 4}, rng), rng);
  }
  SUBCASE("mlp without fusion") {
    ShikeModel model(tiny_mlp(2, false));
    check_model_grad(model, random_tensor({4, 4}, rng), rng);
  }
  SUBCASE("cnn with fusion") {
    ShikeModel model(tiny_cnn(3));
    check_model_grad(model, random_tensor({3, 1, 4, 4}, rng), rng);
  }
}

TEST_CASE("parameter groups and invalid configs") {
  ShikeModel model(tiny_mlp(2, true));
  std::size_t groups[4] = {0, 0, 0, 0};
  for (const auto& [name, _] : model.state().params) ++groups[static_cast<int>(param_group(name))];
  for (auto g : groups) CHECK(g > 0);
  auto bad = tiny_mlp(2, true);
  bad.taps = {1};
  CHECK_THROWS(ShikeModel(bad));
  bad.taps = {1, 4};
  CHECK_THROWS(ShikeModel(bad));
  bad = tiny_mlp(0, true);
  CHECK_THROWS(ShikeModel(bad));
}

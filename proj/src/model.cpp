#include "shike/model.hpp"

#include <algorithm>
#include <cmath>

#include "shike/errors.hpp"

namespace shike {
namespace {

std::size_t stage_stride(BackboneFamily family, std::size_t stage) {
  return family == BackboneFamily::cnn && stage > 1 ? 2 : 1;
}

Shape batched(std::size_t batch, const Shape& sample) {
  Shape s{batch};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

}  // namespace

const char* family_name(BackboneFamily family) { return family == BackboneFamily::mlp ? "mlp" : "cnn"; }

BackboneFamily parse_family(const std::string& name) {
  if (name == "mlp") return BackboneFamily::mlp;
  if (name == "cnn") return BackboneFamily::cnn;
  throw ConfigError("unknown backbone family '" + name + "' (expected mlp or cnn)");
}

void BackboneConfig::validate() const {
  if (stage_widths.empty()) throw ConfigError("backbone needs at least one shared stage");
  if (std::find(stage_widths.begin(), stage_widths.end(), 0u) != stage_widths.end() || expert_width == 0)
    throw ConfigError("stage widths must be positive");
  if (blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be >= 1");
  const std::size_t rank = family == BackboneFamily::mlp ? 1 : 3;
  if (input_shape.size() != rank || shape_numel(input_shape) == 0)
    throw ConfigError(std::string(family_name(family)) + " backbone expects an input shape of rank " +
                      std::to_string(rank) + ", got " + shape_str(input_shape));
}

void ModelConfig::validate() const {
  backbone.validate();
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (num_experts == 0) throw ConfigError("num_experts must be >= 1");
  if (!taps.empty()) {
    if (taps.size() != num_experts) throw ConfigError("tap list length must equal num_experts");
    for (auto t : taps)
      if (t < 1 || t > backbone.num_stages())
        throw ConfigError("tap depth " + std::to_string(t) + " outside 1.." + std::to_string(backbone.num_stages()));
  }
}

std::vector<std::size_t> ModelConfig::resolved_taps() const {
  return taps.empty() ? assign_depths(num_experts, backbone.num_stages()) : taps;
}

std::vector<std::size_t> assign_depths(std::size_t experts, std::size_t stages) {
  if (experts == 0 || stages == 0) throw InvalidArgument("assign_depths needs M >= 1 and S >= 1");
  std::vector<std::size_t> taps(experts);
  if (experts == 1) {
    taps[0] = stages;
  } else if (experts <= stages) {
    const double step = static_cast<double>(stages - 1) / static_cast<double>(experts - 1);
    for (std::size_t i = 0; i < experts; ++i)
      taps[i] = 1 + static_cast<std::size_t>(std::floor(static_cast<double>(i) * step + 0.5));
  } else if (experts == stages + 1) {
    taps[0] = 1;
    for (std::size_t i = 1; i < experts; ++i) taps[i] = i;
  } else {
    for (std::size_t i = 0; i < experts; ++i) taps[i] = i % stages + 1;
  }
  return taps;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) out[b] = argmax(logits.sample(b));
  return out;
}

std::vector<std::size_t> ensemble_predict(const MoEOutput& out) {
  if (out.logits.empty()) throw InvalidArgument("ensemble prediction needs at least one expert");
  Tensor sum = out.logits.front();
  for (std::size_t m = 1; m < out.logits.size(); ++m) sum += out.logits[m];
  return argmax_rows(sum);
}

// ---------------------------------------------------------------- stages

Sequential make_stage(BackboneFamily family, const Shape& in_shape, std::size_t width, std::size_t stride,
                      std::size_t blocks, bool batch_norm, Rng& rng) {
  Sequential seq;
  auto transform = [&](Sequential& s, std::size_t in, std::size_t out, std::size_t st) {
    if (family == BackboneFamily::mlp)
      s.emplace<Linear>(in, out, rng, Linear::Init::kaiming);
    else
      s.emplace<Conv2d>(in, out, 3, st, rng);
    if (batch_norm) s.emplace<BatchNorm>(out);
  };
  transform(seq, in_shape.at(0), width, stride);
  seq.emplace<ReLU>();
  for (std::size_t b = 1; b < blocks; ++b) {
    Sequential body;
    transform(body, width, width, 1);
    body.emplace<ReLU>();
    transform(body, width, width, 1);
    seq.emplace<ResidualBlock>(std::move(body));
  }
  return seq;
}

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  Shape shape = config_.input_shape;
  for (std::size_t s = 1; s <= config_.num_stages(); ++s) {
    stages_.push_back(make_stage(config_.family, shape, config_.stage_widths[s - 1], stage_stride(config_.family, s),
                                 config_.blocks_per_stage, config_.batch_norm, rng));
    shape = stages_.back().output_shape(shape);
    shapes_.push_back(shape);
  }
}

void Backbone::check_input(const Tensor& x) const {
  if (x.rank() != config_.input_shape.size() + 1 || x.sample_shape() != config_.input_shape)
    throw ShapeError("backbone expects per-sample shape " + shape_str(config_.input_shape) + ", got " +
                     shape_str(x.shape()));
}

FeatureStack Backbone::forward(const Tensor& x) {
  check_input(x);
  FeatureStack feats;
  feats.reserve(stages_.size());
  const Tensor* h = &x;
  for (auto& st : stages_) {
    feats.push_back(st.forward(*h));
    h = &feats.back();
  }
  return feats;
}

FeatureStack Backbone::infer(const Tensor& x) const {
  check_input(x);
  FeatureStack feats;
  feats.reserve(stages_.size());
  const Tensor* h = &x;
  for (const auto& st : stages_) {
    feats.push_back(st.infer(*h));
    h = &feats.back();
  }
  return feats;
}

void Backbone::backward(std::vector<Tensor> grads) {
  if (grads.size() != stages_.size()) throw ShapeError("backbone backward needs one gradient slot per stage");
  std::size_t batch = 0;
  for (const auto& g : grads)
    if (!g.empty()) batch = g.dim(0);
  if (batch == 0) return;
  Tensor carry;
  for (std::size_t s = stages_.size(); s-- > 0;) {
    Tensor g = grads[s].empty() ? Tensor(batched(batch, shapes_[s])) : std::move(grads[s]);
    if (!carry.empty()) g += carry;
    carry = stages_[s].backward(g);
  }
}

void Backbone::collect(const std::string& prefix, StateRefs& refs) {
  for (std::size_t s = 0; s < stages_.size(); ++s) stages_[s].collect(prefix + ".stage" + std::to_string(s + 1), refs);
}

// ---------------------------------------------------------------- alignment

std::vector<AlignBlockSpec> plan_alignment(BackboneFamily family, const Shape& from, const Shape& target) {
  if (family == BackboneFamily::mlp) {
    if (from.size() != 1 || target.size() != 1) throw ConfigError("mlp alignment needs rank-1 feature shapes");
    return {{target[0], 1}};
  }
  if (from.size() != 3 || target.size() != 3) throw ConfigError("cnn alignment needs (C,H,W) feature shapes");
  std::size_t h = from[1], w = from[2], halvings = 0;
  while (h != target[1] || w != target[2]) {
    if (h <= target[1] || w <= target[2])
      throw ConfigError("cannot downsample " + shape_str(from) + " to " + shape_str(target));
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    ++halvings;
  }
  if (halvings == 0) return {{target[0], 1}};
  std::vector<AlignBlockSpec> blocks;
  std::size_t width = from[0];
  for (std::size_t i = 1; i <= halvings; ++i) {
    width = i == halvings ? target[0] : width * 2;
    blocks.push_back({width, 2});
  }
  return blocks;
}

AlignmentPath::AlignmentPath(BackboneFamily family, Shape in_shape, const std::vector<AlignBlockSpec>& blocks,
                             Rng& rng, bool normalize, bool activate)
    : in_shape_(std::move(in_shape)), blocks_(blocks.size()) {
  if (blocks.empty()) throw ConfigError("alignment path needs at least one block");
  std::size_t width = in_shape_.at(0);
  for (const auto& b : blocks) {
    if (family == BackboneFamily::mlp) {
      if (b.stride != 1) throw ConfigError("mlp alignment blocks cannot stride");
      path_.emplace<Linear>(width, b.out_width, rng, Linear::Init::kaiming);
    } else {
      path_.emplace<Conv2d>(width, b.out_width, 3, b.stride, rng);
    }
    if (normalize) path_.emplace<BatchNorm>(b.out_width);
    if (activate) path_.emplace<ReLU>();
    width = b.out_width;
  }
  out_shape_ = path_.output_shape(in_shape_);
}

AlignmentPath AlignmentPath::identity(BackboneFamily family, const Shape& in_shape) {
  AlignmentPath p;
  p.in_shape_ = in_shape;
  p.out_shape_ = in_shape;
  p.blocks_ = 1;
  Rng rng(0);
  if (family == BackboneFamily::mlp)
    p.path_.emplace<Linear>(in_shape.at(0), in_shape.at(0), rng).set_identity();
  else
    p.path_.emplace<Conv2d>(in_shape.at(0), in_shape.at(0), 3, 1, rng).set_identity();
  p.out_shape_ = p.path_.output_shape(in_shape);
  return p;
}

// ---------------------------------------------------------------- experts

Expert::Expert(const ModelConfig& config, std::size_t tap, const std::vector<Shape>& stage_shapes, Rng& rng)
    : tap_(tap),
      exclusive_(make_stage(config.backbone.family, stage_shapes.back(), config.backbone.expert_width,
                            stage_stride(config.backbone.family, stage_shapes.size() + 1),
                            config.backbone.blocks_per_stage, config.backbone.batch_norm, rng)),
      head_(config.backbone.expert_width, config.num_classes, rng) {
  const auto& bb = config.backbone;
  const std::size_t stages = stage_shapes.size();
  exclusive_shape_ = exclusive_.output_shape(stage_shapes.back());
  if (config.use_dkf) {
    std::vector<AlignBlockSpec> chain;
    for (std::size_t k = tap + 1; k <= stages; ++k) chain.push_back({bb.stage_widths[k - 1], stage_stride(bb.family, k)});
    chain.push_back({bb.expert_width, stage_stride(bb.family, stages + 1)});
    align_.emplace(bb.family, stage_shapes.at(tap - 1), chain, rng, bb.batch_norm, true);
    if (align_->output_shape() != exclusive_shape_)
      throw ConfigError("alignment of tap " + std::to_string(tap) + " yields " + shape_str(align_->output_shape()) +
                        " but the exclusive feature is " + shape_str(exclusive_shape_));
  }
}

Tensor Expert::exclusive(const Tensor& f_last) const { return exclusive_.infer(f_last); }

Tensor Expert::align(const Tensor& f_tap) const {
  if (!align_) throw ConfigError("expert has no alignment path (fusion disabled)");
  return align_->infer(f_tap);
}

ExpertOutput Expert::fuse_and_classify(const Tensor& f_last, const Tensor& aligned) const {
  ExpertOutput out;
  const Tensor high = exclusive_.infer(f_last);
  if (aligned.shape() != high.shape())
    throw ShapeError("aligned feature " + shape_str(aligned.shape()) + " does not match exclusive feature " +
                     shape_str(high.shape()));
  out.fused = hadamard(aligned, high);
  out.pooled = pool_.infer(out.fused);
  out.logits = head_.infer(out.pooled);
  return out;
}

ExpertOutput Expert::infer(const Tensor& f_last, const Tensor& f_tap) const {
  if (align_) return fuse_and_classify(f_last, align_->infer(f_tap));
  ExpertOutput out;
  out.fused = exclusive_.infer(f_last);
  out.pooled = pool_.infer(out.fused);
  out.logits = head_.infer(out.pooled);
  return out;
}

ExpertOutput Expert::forward(const Tensor& f_last, const Tensor& f_tap) {
  ExpertOutput out;
  cached_exclusive_ = exclusive_.forward(f_last);
  if (align_) {
    cached_aligned_ = align_->forward(f_tap);
    out.fused = hadamard(cached_aligned_, cached_exclusive_);
  } else {
    out.fused = cached_exclusive_;
  }
  out.pooled = pool_.forward(out.fused);
  out.logits = head_.forward(out.pooled);
  return out;
}

std::pair<Tensor, Tensor> Expert::backward(const Tensor& grad_logits) {
  const Tensor g_fused = pool_.backward(head_.backward(grad_logits));
  if (!align_) return {exclusive_.backward(g_fused), Tensor()};
  Tensor g_tap = align_->backward(hadamard(g_fused, cached_exclusive_));
  Tensor g_last = exclusive_.backward(hadamard(g_fused, cached_aligned_));
  return {std::move(g_last), std::move(g_tap)};
}

void Expert::collect(const std::string& prefix, StateRefs& refs) {
  exclusive_.collect(prefix + ".exclusive", refs);
  if (align_) align_->collect(prefix + ".align", refs);
  head_.collect(prefix + ".head", refs);
}

// ---------------------------------------------------------------- model

ParamGroup param_group(const std::string& name) {
  if (name.rfind("backbone.", 0) == 0) return ParamGroup::backbone;
  if (name.find(".align.") != std::string::npos) return ParamGroup::align;
  if (name.find(".exclusive.") != std::string::npos) return ParamGroup::exclusive;
  if (name.find(".head.") != std::string::npos) return ParamGroup::head;
  throw InvalidArgument("unrecognised parameter name '" + name + "'");
}

const char* group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::align: return "align";
    case ParamGroup::exclusive: return "exclusive";
    case ParamGroup::head: return "head";
  }
  return "?";
}

namespace {

ModelConfig validated(ModelConfig c) {
  c.validate();
  return c;
}

}  // namespace

ShikeModel::ShikeModel(ModelConfig config)
    : config_(validated(std::move(config))),
      taps_(config_.resolved_taps()),
      init_rng_(config_.seed),
      backbone_(config_.backbone, init_rng_) {
  std::vector<Shape> shapes;
  for (std::size_t s = 1; s <= backbone_.num_stages(); ++s) shapes.push_back(backbone_.feature_shape(s));
  experts_.reserve(taps_.size());
  for (auto t : taps_) experts_.emplace_back(config_, t, shapes, init_rng_);
}

MoEOutput ShikeModel::forward(const Tensor& x) {
  const FeatureStack feats = backbone_.forward(x);
  MoEOutput out;
  for (auto& e : experts_) {
    ExpertOutput eo = e.forward(feats.back(), feats[e.tap() - 1]);
    out.fused.push_back(std::move(eo.fused));
    out.logits.push_back(std::move(eo.logits));
  }
  out.ensemble = out.logits.front();
  for (std::size_t m = 1; m < out.logits.size(); ++m) out.ensemble += out.logits[m];
  return out;
}

MoEOutput ShikeModel::infer(const Tensor& x) const {
  const FeatureStack feats = backbone_.infer(x);
  MoEOutput out;
  for (const auto& e : experts_) {
    ExpertOutput eo = e.infer(feats.back(), feats[e.tap() - 1]);
    out.fused.push_back(std::move(eo.fused));
    out.logits.push_back(std::move(eo.logits));
  }
  out.ensemble = out.logits.front();
  for (std::size_t m = 1; m < out.logits.size(); ++m) out.ensemble += out.logits[m];
  return out;
}

void ShikeModel::backward(std::span<const Tensor> logit_grads) {
  if (logit_grads.size() != experts_.size()) throw ShapeError("need one logit gradient per expert");
  std::vector<Tensor> stage_grads(backbone_.num_stages());
  auto accumulate = [](Tensor& slot, Tensor g) {
    if (slot.empty())
      slot = std::move(g);
    else
      slot += g;
  };
  for (std::size_t m = 0; m < experts_.size(); ++m) {
    auto [g_last, g_tap] = experts_[m].backward(logit_grads[m]);
    accumulate(stage_grads.back(), std::move(g_last));
    if (!g_tap.empty()) accumulate(stage_grads[experts_[m].tap() - 1], std::move(g_tap));
  }
  backbone_.backward(std::move(stage_grads));
}

std::vector<Tensor> ShikeModel::pooled_features(const Tensor& x) const {
  const FeatureStack feats = backbone_.infer(x);
  std::vector<Tensor> out;
  for (const auto& e : experts_) out.push_back(e.infer(feats.back(), feats[e.tap() - 1]).pooled);
  return out;
}

std::vector<Tensor> ShikeModel::head_logits(std::span<const Tensor> pooled) const {
  if (pooled.size() != experts_.size()) throw ShapeError("need pooled features for every expert");
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < experts_.size(); ++m) out.push_back(experts_[m].head().infer(pooled[m]));
  return out;
}

void ShikeModel::reinit_heads(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& e : experts_) e.head().reset(rng);
}

StateRefs ShikeModel::state() {
  StateRefs refs;
  backbone_.collect("backbone", refs);
  for (std::size_t m = 0; m < experts_.size(); ++m) experts_[m].collect("expert" + std::to_string(m), refs);
  return refs;
}

ConstStateRefs ShikeModel::state() const {
  const StateRefs refs = const_cast<ShikeModel*>(this)->state();
  ConstStateRefs out;
  for (const auto& [n, p] : refs.params) out.params.emplace_back(n, p);
  for (const auto& [n, t] : refs.buffers) out.buffers.emplace_back(n, t);
  return out;
}

void ShikeModel::zero_grad() {
  for (auto& [name, p] : state().params) p->grad.fill(0.0);
}

}  // namespace shike

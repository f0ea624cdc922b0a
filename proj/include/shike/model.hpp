#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shike/nn.hpp"
#include "shike/tensor.hpp"

namespace shike {

enum class BackboneFamily { mlp, cnn };

const char* family_name(BackboneFamily family);
BackboneFamily parse_family(const std::string& name);

/// Shared part of the network: S stages, each a transition layer followed by
/// `blocks_per_stage - 1` residual blocks. CNN stages after the first and the
/// exclusive expert stage halve the spatial size with a stride-2 transition.
struct BackboneConfig {
  BackboneFamily family = BackboneFamily::mlp;
  Shape input_shape{32};                        // (D) or (C,H,W)
  std::vector<std::size_t> stage_widths{32, 32, 32};
  std::size_t expert_width = 32;                // width of the exclusive stage
  std::size_t blocks_per_stage = 1;
  bool batch_norm = true;

  std::size_t num_stages() const { return stage_widths.size(); }
  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t num_classes = 10;
  std::size_t num_experts = 3;
  bool use_dkf = true;
  /// 1-based tap depth per expert; empty means assign_depths(M, S).
  std::vector<std::size_t> taps;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::size_t> resolved_taps() const;
};

/// Tap depth (1..S) for each of M experts.
///  M <= S     distinct depths spread from shallow to deep (M = 1 takes S)
///  M == S + 1 two experts share depth 1, the rest take 1..S
///  M >  S + 1 depths cycle 1..S
std::vector<std::size_t> assign_depths(std::size_t experts, std::size_t stages);

/// Outputs f_1..f_S of the shared stages; element s-1 holds f_s.
using FeatureStack = std::vector<Tensor>;

struct MoEOutput {
  std::vector<Tensor> fused;   // per expert, pre-pooling
  std::vector<Tensor> logits;  // per expert, [B, C]
  Tensor ensemble;             // sum of expert logits
};

/// Argmax per row, lowest index on ties.
std::vector<std::size_t> argmax_rows(const Tensor& logits);
std::size_t argmax(std::span<const double> v);

/// Argmax of the summed expert logits for every sample.
std::vector<std::size_t> ensemble_predict(const MoEOutput& out);

class Backbone {
 public:
  Backbone(const BackboneConfig& config, Rng& rng);

  FeatureStack forward(const Tensor& x);
  FeatureStack infer(const Tensor& x) const;
  /// `grads[s]` is dL/df_{s+1}; empty tensors count as zero.
  void backward(std::vector<Tensor> grads);

  std::size_t num_stages() const { return stages_.size(); }
  /// Per-sample shape of f_s, s in 1..S.
  const Shape& feature_shape(std::size_t s) const { return shapes_.at(s - 1); }
  const Sequential& stage(std::size_t s) const { return stages_.at(s - 1); }
  Sequential& stage(std::size_t s) { return stages_.at(s - 1); }
  void collect(const std::string& prefix, StateRefs& refs);

 private:
  void check_input(const Tensor& x) const;

  BackboneConfig config_;
  std::vector<Sequential> stages_;
  std::vector<Shape> shapes_;
};

/// One stage of the given family: transition layer then residual blocks.
Sequential make_stage(BackboneFamily family, const Shape& in_shape, std::size_t width, std::size_t stride,
                      std::size_t blocks, bool batch_norm, Rng& rng);

struct AlignBlockSpec {
  std::size_t out_width = 0;
  std::size_t stride = 1;
};

/// Blocks needed to bring an intermediate feature to `target`: stride-2
/// blocks doubling width until the spatial size meets, the last block
/// landing on the target width. Throws ConfigError if the shapes cannot meet.
std::vector<AlignBlockSpec> plan_alignment(BackboneFamily family, const Shape& from, const Shape& target);

/// Downsampling path for one tapped feature. Each block is a convolution (or
/// linear map) optionally followed by batch norm and ReLU.
class AlignmentPath {
 public:
  AlignmentPath(BackboneFamily family, Shape in_shape, const std::vector<AlignBlockSpec>& blocks, Rng& rng,
                bool normalize = true, bool activate = true);
  /// Single stride-1 block with identity weights and no norm/activation.
  static AlignmentPath identity(BackboneFamily family, const Shape& in_shape);

  Tensor forward(const Tensor& x) { return path_.forward(x); }
  Tensor infer(const Tensor& x) const { return path_.infer(x); }
  Tensor backward(const Tensor& g) { return path_.backward(g); }
  const Shape& input_shape() const { return in_shape_; }
  const Shape& output_shape() const { return out_shape_; }
  std::size_t num_blocks() const { return blocks_; }
  void collect(const std::string& prefix, StateRefs& refs) { path_.collect(prefix, refs); }

 private:
  AlignmentPath() = default;
  Sequential path_;
  Shape in_shape_;
  Shape out_shape_;
  std::size_t blocks_ = 0;
};

struct ExpertOutput {
  Tensor fused;
  Tensor pooled;
  Tensor logits;
};

/// Exclusive stage, optional DKF alignment path, pooling and linear head.
class Expert {
 public:
  Expert(const ModelConfig& config, std::size_t tap, const std::vector<Shape>& stage_shapes, Rng& rng);

  std::size_t tap() const { return tap_; }
  bool fuses() const { return align_.has_value(); }
  const Shape& exclusive_shape() const { return exclusive_shape_; }

  /// f^m_{S+1} = exclusive stage applied to f_S (inference mode).
  Tensor exclusive(const Tensor& f_last) const;
  /// Aligned intermediate feature; requires a fusing expert.
  Tensor align(const Tensor& f_tap) const;
  /// fused = aligned (*) exclusive(f_S), logits = head(pool(fused)).
  /// Throws ShapeError if the aligned feature does not match f^m_{S+1}.
  ExpertOutput fuse_and_classify(const Tensor& f_last, const Tensor& aligned) const;
  ExpertOutput infer(const Tensor& f_last, const Tensor& f_tap) const;

  ExpertOutput forward(const Tensor& f_last, const Tensor& f_tap);
  /// Returns (dL/df_S, dL/df_tap); the second is empty without fusion.
  std::pair<Tensor, Tensor> backward(const Tensor& grad_logits);

  Linear& head() { return head_; }
  const Linear& head() const { return head_; }
  const std::optional<AlignmentPath>& alignment() const { return align_; }
  void collect(const std::string& prefix, StateRefs& refs);

 private:
  std::size_t tap_;
  Shape exclusive_shape_;
  Sequential exclusive_;
  std::optional<AlignmentPath> align_;
  GlobalAvgPool pool_;
  Linear head_;
  Tensor cached_exclusive_;
  Tensor cached_aligned_;
};

struct ConstStateRefs {
  std::vector<std::pair<std::string, const Parameter*>> params;
  std::vector<std::pair<std::string, const Tensor*>> buffers;
};

enum class ParamGroup { backbone, align, exclusive, head };

ParamGroup param_group(const std::string& name);
const char* group_name(ParamGroup group);

class ShikeModel {
 public:
  explicit ShikeModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::size_t num_experts() const { return experts_.size(); }
  std::size_t num_classes() const { return config_.num_classes; }
  const std::vector<std::size_t>& taps() const { return taps_; }

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  Expert& expert(std::size_t m) { return experts_.at(m); }
  const Expert& expert(std::size_t m) const { return experts_.at(m); }

  /// Training-mode forward; caches activations for `backward`.
  MoEOutput forward(const Tensor& x);
  MoEOutput infer(const Tensor& x) const;
  /// Accumulates parameter gradients from per-expert logit gradients [B, C].
  void backward(std::span<const Tensor> logit_grads);

  /// Pooled fused features per expert (inference mode), the heads' inputs.
  std::vector<Tensor> pooled_features(const Tensor& x) const;
  /// Per-expert logits from pooled features through the heads only.
  std::vector<Tensor> head_logits(std::span<const Tensor> pooled) const;

  /// Fresh default initialisation of every expert head.
  void reinit_heads(std::uint64_t seed);

  /// Named parameters and buffers in a stable order.
  StateRefs state();
  ConstStateRefs state() const;
  void zero_grad();

 private:
  ModelConfig config_;
  std::vector<std::size_t> taps_;
  Rng init_rng_;
  Backbone backbone_;
  std::vector<Expert> experts_;
};

}  // namespace shike

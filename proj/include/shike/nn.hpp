#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "shike/tensor.hpp"

namespace shike {

using Rng = std::mt19937_64;

struct Parameter {
  Tensor value;
  Tensor grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}
};

/// Named views into a module tree. Names are dotted paths such as
/// "backbone.stage1.0.weight"; references stay valid while the owner lives.
struct StateRefs {
  std::vector<std::pair<std::string, Parameter*>> params;
  std::vector<std::pair<std::string, Tensor*>> buffers;
};

/// A differentiable layer operating on batched tensors.
///
/// `forward` runs in training mode and caches whatever `backward` needs;
/// `backward` accumulates into parameter gradients and returns the gradient
/// with respect to the layer input. `infer` runs in inference mode, keeps no
/// state and is safe to call concurrently.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor infer(const Tensor& x) const = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  /// Per-sample output shape for a per-sample input shape.
  virtual Shape output_shape(const Shape& in) const { return in; }
  virtual void collect(const std::string& /*prefix*/, StateRefs& /*refs*/) {}
  virtual std::unique_ptr<Layer> clone() const = 0;
};

class Linear final : public Layer {
 public:
  enum class Init { kaiming, uniform };
  Linear(std::size_t in, std::size_t out, Rng& rng, Init init = Init::uniform);

  Tensor forward(const Tensor& x) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect(const std::string& prefix, StateRefs& refs) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }

  void reset(Rng& rng, Init init = Init::uniform);
  /// Identity weights and zero bias; requires in == out.
  void set_identity();
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  std::size_t in_;
  std::size_t out_;
  Parameter weight_;  // [out, in]
  Parameter bias_;    // [out]
  Tensor input_;
};

/// Square-kernel 2-D convolution with zero padding of kernel/2, NCHW layout.
class Conv2d final : public Layer {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, Rng& rng);

  Tensor forward(const Tensor& x) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect(const std::string& prefix, StateRefs& refs) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

  /// Centre tap 1 on the channel diagonal, everything else 0. Requires
  /// equal in/out channels; with stride 1 the layer is then the identity.
  void set_identity();
  std::size_t stride() const { return stride_; }

 private:
  Tensor run(const Tensor& x, std::vector<double>* cols) const;

  std::size_t cin_;
  std::size_t cout_;
  std::size_t kernel_;
  std::size_t stride_;
  Parameter weight_;  // [cout, cin, k, k]
  Parameter bias_;    // [cout]
  Shape in_shape_;
  std::vector<double> cols_;
};

/// Batch normalisation over every axis except the channel axis (axis 1).
class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(std::size_t channels);

  Tensor forward(const Tensor& x) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, StateRefs& refs) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  std::size_t channels_;
  Parameter gamma_;
  Parameter beta_;
  Tensor running_mean_;
  Tensor running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }

 private:
  Tensor input_;
};

/// [B,C,H,W] -> [B,C]; rank-2 inputs pass through unchanged.
class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  Shape in_shape_;
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }
  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }

  Tensor forward(const Tensor& x) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect(const std::string& prefix, StateRefs& refs) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sequential>(*this); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// relu(x + body(x)); the body must preserve the per-sample shape.
class ResidualBlock final : public Layer {
 public:
  explicit ResidualBlock(Sequential body) : body_(std::move(body)) {}

  Tensor forward(const Tensor& x) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, StateRefs& refs) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ResidualBlock>(*this); }

 private:
  Sequential body_;
  ReLU out_;
};

}  // namespace shike

#include "shike/nn.hpp"

#include <Eigen/Core>
#include <cmath>

#include "shike/errors.hpp"

namespace shike {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

void require_rank(const Tensor& x, std::size_t rank, const char* who) {
  if (x.rank() != rank)
    throw ShapeError(std::string(who) + " expects rank-" + std::to_string(rank) + " input, got " +
                     shape_str(x.shape()));
}

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, Init init)
    : in_(in), out_(out), weight_(Tensor({out, in})), bias_(Tensor({out})) {
  reset(rng, init);
}

void Linear::reset(Rng& rng, Init init) {
  if (init == Init::kaiming) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in_)));
    for (auto& w : weight_.value.values()) w = dist(rng);
    bias_.value.fill(0.0);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : weight_.value.values()) w = dist(rng);
    for (auto& b : bias_.value.values()) b = dist(rng);
  }
  weight_.grad.fill(0.0);
  bias_.grad.fill(0.0);
}

void Linear::set_identity() {
  if (in_ != out_) throw ConfigError("identity linear map needs equal in/out features");
  weight_.value.fill(0.0);
  bias_.value.fill(0.0);
  for (std::size_t i = 0; i < in_; ++i) weight_.value[i * in_ + i] = 1.0;
}

Shape Linear::output_shape(const Shape& in) const {
  if (in.size() != 1 || in[0] != in_)
    throw ShapeError("linear layer expects " + std::to_string(in_) + " features, got " + shape_str(in));
  return {out_};
}

Tensor Linear::infer(const Tensor& x) const {
  require_rank(x, 2, "linear layer");
  if (x.dim(1) != in_)
    throw ShapeError("linear layer expects " + std::to_string(in_) + " features, got " + shape_str(x.shape()));
  const auto batch = static_cast<Eigen::Index>(x.dim(0));
  Tensor y({x.dim(0), out_});
  CMapMat xm(x.data(), batch, static_cast<Eigen::Index>(in_));
  CMapMat wm(weight_.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
  CMapVec bv(bias_.value.data(), static_cast<Eigen::Index>(out_));
  MapMat ym(y.data(), batch, static_cast<Eigen::Index>(out_));
  ym.noalias() = xm * wm.transpose();
  ym.rowwise() += bv.transpose();
  return y;
}

Tensor Linear::forward(const Tensor& x) {
  input_ = x;
  return infer(x);
}

Tensor Linear::backward(const Tensor& grad_out) {
  const auto batch = static_cast<Eigen::Index>(input_.dim(0));
  const auto in = static_cast<Eigen::Index>(in_);
  const auto out = static_cast<Eigen::Index>(out_);
  CMapMat gy(grad_out.data(), batch, out);
  CMapMat xm(input_.data(), batch, in);
  CMapMat wm(weight_.value.data(), out, in);
  MapMat gw(weight_.grad.data(), out, in);
  MapVec gb(bias_.grad.data(), out);
  gw.noalias() += gy.transpose() * xm;
  gb += gy.colwise().sum().transpose();
  Tensor gx({input_.dim(0), in_});
  MapMat gxm(gx.data(), batch, in);
  gxm.noalias() = gy * wm;
  return gx;
}

void Linear::collect(const std::string& prefix, StateRefs& refs) {
  refs.params.emplace_back(join(prefix, "weight"), &weight_);
  refs.params.emplace_back(join(prefix, "bias"), &bias_);
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, Rng& rng)
    : cin_(in_channels),
      cout_(out_channels),
      kernel_(kernel),
      stride_(stride),
      weight_(Tensor({out_channels, in_channels, kernel, kernel})),
      bias_(Tensor({out_channels})) {
  if (kernel % 2 == 0 || stride == 0) throw ConfigError("conv kernel must be odd and stride positive");
  const double fan_in = static_cast<double>(in_channels * kernel * kernel);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& w : weight_.value.values()) w = dist(rng);
}

void Conv2d::set_identity() {
  if (cin_ != cout_) throw ConfigError("identity convolution needs equal channel counts");
  weight_.value.fill(0.0);
  bias_.value.fill(0.0);
  const std::size_t c = kernel_ / 2;
  for (std::size_t o = 0; o < cout_; ++o)
    weight_.value[((o * cin_ + o) * kernel_ + c) * kernel_ + c] = 1.0;
}

Shape Conv2d::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[0] != cin_)
    throw ShapeError("conv expects (" + std::to_string(cin_) + ",H,W), got " + shape_str(in));
  const std::size_t pad = kernel_ / 2;
  return {cout_, (in[1] + 2 * pad - kernel_) / stride_ + 1, (in[2] + 2 * pad - kernel_) / stride_ + 1};
}

Tensor Conv2d::run(const Tensor& x, std::vector<double>* cols_out) const {
  require_rank(x, 4, "conv layer");
  const Shape out_s = output_shape(x.sample_shape());
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = out_s[1], wo = out_s[2];
  const std::size_t patch = cin_ * kernel_ * kernel_;
  const std::size_t npix = ho * wo;
  const auto pad = static_cast<std::ptrdiff_t>(kernel_ / 2);
  std::vector<double> local;
  std::vector<double>& cols = cols_out ? *cols_out : local;
  cols.assign(batch * patch * npix, 0.0);
  Tensor y({batch, cout_, ho, wo});
  CMapMat wm(weight_.value.data(), static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(patch));
  for (std::size_t b = 0; b < batch; ++b) {
    double* col = cols.data() + b * patch * npix;
    const double* img = x.data() + b * cin_ * h * w;
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t ki = 0; ki < kernel_; ++ki)
        for (std::size_t kj = 0; kj < kernel_; ++kj) {
          double* row = col + ((c * kernel_ + ki) * kernel_ + kj) * npix;
          for (std::size_t oi = 0; oi < ho; ++oi) {
            const auto ii = static_cast<std::ptrdiff_t>(oi * stride_ + ki) - pad;
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t oj = 0; oj < wo; ++oj) {
              const auto jj = static_cast<std::ptrdiff_t>(oj * stride_ + kj) - pad;
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
              row[oi * wo + oj] = img[(c * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)];
            }
          }
        }
    CMapMat cm(col, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npix));
    MapMat ym(y.data() + b * cout_ * npix, static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(npix));
    ym.noalias() = wm * cm;
    for (std::size_t o = 0; o < cout_; ++o) ym.row(static_cast<Eigen::Index>(o)).array() += bias_.value[o];
  }
  return y;
}

Tensor Conv2d::infer(const Tensor& x) const { return run(x, nullptr); }

Tensor Conv2d::forward(const Tensor& x) {
  in_shape_ = x.shape();
  return run(x, &cols_);
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const std::size_t batch = in_shape_[0], h = in_shape_[2], w = in_shape_[3];
  const std::size_t ho = grad_out.dim(2), wo = grad_out.dim(3);
  const std::size_t patch = cin_ * kernel_ * kernel_;
  const std::size_t npix = ho * wo;
  const auto pad = static_cast<std::ptrdiff_t>(kernel_ / 2);
  CMapMat wm(weight_.value.data(), static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(patch));
  MapMat gw(weight_.grad.data(), static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(patch));
  Tensor gx(in_shape_);
  RowMat gcol(static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npix));
  for (std::size_t b = 0; b < batch; ++b) {
    CMapMat gy(grad_out.data() + b * cout_ * npix, static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(npix));
    CMapMat cm(cols_.data() + b * patch * npix, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npix));
    gw.noalias() += gy * cm.transpose();
    for (std::size_t o = 0; o < cout_; ++o) bias_.grad[o] += gy.row(static_cast<Eigen::Index>(o)).sum();
    gcol.noalias() = wm.transpose() * gy;
    double* img = gx.data() + b * cin_ * h * w;
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t ki = 0; ki < kernel_; ++ki)
        for (std::size_t kj = 0; kj < kernel_; ++kj) {
          const double* row = gcol.data() + ((c * kernel_ + ki) * kernel_ + kj) * npix;
          for (std::size_t oi = 0; oi < ho; ++oi) {
            const auto ii = static_cast<std::ptrdiff_t>(oi * stride_ + ki) - pad;
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t oj = 0; oj < wo; ++oj) {
              const auto jj = static_cast<std::ptrdiff_t>(oj * stride_ + kj) - pad;
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
              img[(c * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)] += row[oi * wo + oj];
            }
          }
        }
  }
  return gx;
}

void Conv2d::collect(const std::string& prefix, StateRefs& refs) {
  refs.params.emplace_back(join(prefix, "weight"), &weight_);
  refs.params.emplace_back(join(prefix, "bias"), &bias_);
}

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(std::size_t channels)
    : channels_(channels),
      gamma_(Tensor({channels}, 1.0)),
      beta_(Tensor({channels}, 0.0)),
      running_mean_({channels}, 0.0),
      running_var_({channels}, 1.0) {}

namespace {

// Number of elements per channel inside one sample.
std::size_t spatial_size(const Tensor& x) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) n *= x.dim(i);
  return n;
}

}  // namespace

Tensor BatchNorm::infer(const Tensor& x) const {
  if (x.rank() < 2 || x.dim(1) != channels_)
    throw ShapeError("batch norm over " + std::to_string(channels_) + " channels given " + shape_str(x.shape()));
  Tensor y(x.shape());
  const std::size_t batch = x.dim(0), sp = spatial_size(x);
  for (std::size_t c = 0; c < channels_; ++c) {
    const double inv = 1.0 / std::sqrt(running_var_[c] + kEps);
    const double g = gamma_.value[c], bt = beta_.value[c], m = running_mean_[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels_ + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) y[base + i] = g * (x[base + i] - m) * inv + bt;
    }
  }
  return y;
}

Tensor BatchNorm::forward(const Tensor& x) {
  if (x.rank() < 2 || x.dim(1) != channels_)
    throw ShapeError("batch norm over " + std::to_string(channels_) + " channels given " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), sp = spatial_size(x);
  const double count = static_cast<double>(batch * sp);
  xhat_ = Tensor(x.shape());
  inv_std_.assign(channels_, 0.0);
  Tensor y(x.shape());
  for (std::size_t c = 0; c < channels_; ++c) {
    double mean = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels_ + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) mean += x[base + i];
    }
    mean /= count;
    double var = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels_ + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
    }
    var /= count;
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[c] = inv;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels_ + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        const double xh = (x[base + i] - mean) * inv;
        xhat_[base + i] = xh;
        y[base + i] = gamma_.value[c] * xh + beta_.value[c];
      }
    }
    const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
    running_mean_[c] = (1.0 - kMomentum) * running_mean_[c] + kMomentum * mean;
    running_var_[c] = (1.0 - kMomentum) * running_var_[c] + kMomentum * unbiased;
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& grad_out) {
  const std::size_t batch = grad_out.dim(0), sp = spatial_size(grad_out);
  const double count = static_cast<double>(batch * sp);
  Tensor gx(grad_out.shape());
  for (std::size_t c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels_ + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        sum_dy += grad_out[base + i];
        sum_dy_xhat += grad_out[base + i] * xhat_[base + i];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const double scale = gamma_.value[c] * inv_std_[c] / count;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels_ + c) * sp;
      for (std::size_t i = 0; i < sp; ++i)
        gx[base + i] = scale * (count * grad_out[base + i] - sum_dy - xhat_[base + i] * sum_dy_xhat);
    }
  }
  return gx;
}

void BatchNorm::collect(const std::string& prefix, StateRefs& refs) {
  refs.params.emplace_back(join(prefix, "gamma"), &gamma_);
  refs.params.emplace_back(join(prefix, "beta"), &beta_);
  refs.buffers.emplace_back(join(prefix, "running_mean"), &running_mean_);
  refs.buffers.emplace_back(join(prefix, "running_var"), &running_var_);
}

// ---------------------------------------------------------------- ReLU

Tensor ReLU::infer(const Tensor& x) const {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] < 0.0 ? 0.0 : x[i];
  return y;
}

Tensor ReLU::forward(const Tensor& x) {
  input_ = x;
  return infer(x);
}

Tensor ReLU::backward(const Tensor& grad_out) {
  Tensor gx(grad_out.shape());
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = input_[i] > 0.0 ? grad_out[i] : 0.0;
  return gx;
}

// ---------------------------------------------------------------- GlobalAvgPool

Shape GlobalAvgPool::output_shape(const Shape& in) const {
  if (in.size() == 3) return {in[0]};
  return in;
}

Tensor GlobalAvgPool::infer(const Tensor& x) const {
  if (x.rank() == 2) return x;
  require_rank(x, 4, "global average pool");
  const std::size_t batch = x.dim(0), ch = x.dim(1), sp = x.dim(2) * x.dim(3);
  Tensor y({batch, ch});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      double s = 0.0;
      const double* p = x.data() + (b * ch + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) s += p[i];
      y[b * ch + c] = s / static_cast<double>(sp);
    }
  return y;
}

Tensor GlobalAvgPool::forward(const Tensor& x) {
  in_shape_ = x.shape();
  return infer(x);
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  if (in_shape_.size() == 2) return grad_out;
  Tensor gx(in_shape_);
  const std::size_t batch = in_shape_[0], ch = in_shape_[1], sp = in_shape_[2] * in_shape_[3];
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      const double g = grad_out[b * ch + c] / static_cast<double>(sp);
      double* p = gx.data() + (b * ch + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) p[i] = g;
    }
  return gx;
}

// ---------------------------------------------------------------- Sequential

Sequential::Sequential(const Sequential& other) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential tmp(other);
    layers_ = std::move(tmp.layers_);
  }
  return *this;
}

Tensor Sequential::forward(const Tensor& x) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h);
  return h;
}

Tensor Sequential::infer(const Tensor& x) const {
  Tensor h = x;
  for (const auto& l : layers_) h = l->infer(h);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& l : layers_) s = l->output_shape(s);
  return s;
}

void Sequential::collect(const std::string& prefix, StateRefs& refs) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(join(prefix, std::to_string(i)), refs);
}

// ---------------------------------------------------------------- ResidualBlock

Tensor ResidualBlock::forward(const Tensor& x) {
  Tensor h = body_.forward(x);
  h += x;
  return out_.forward(h);
}

Tensor ResidualBlock::infer(const Tensor& x) const {
  Tensor h = body_.infer(x);
  h += x;
  return out_.infer(h);
}

Tensor ResidualBlock::backward(const Tensor& grad_out) {
  Tensor g = out_.backward(grad_out);
  Tensor gx = body_.backward(g);
  gx += g;
  return gx;
}

void ResidualBlock::collect(const std::string& prefix, StateRefs& refs) { body_.collect(join(prefix, "body"), refs); }

}  // namespace shike

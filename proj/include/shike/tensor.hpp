#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace shike {

/// Dimensions of a tensor. Batched tensors keep the batch size in front.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major double tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Shape without the leading batch dimension.
  Shape sample_shape() const;
  std::size_t sample_size() const;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> sample(std::size_t b);
  std::span<const double> sample(std::size_t b) const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  void fill(double v);
  Tensor& operator+=(const Tensor& other);

  /// Rows [begin, end) of the leading dimension.
  Tensor slice(std::size_t begin, std::size_t end) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Elementwise product; throws ShapeError on mismatch.
Tensor hadamard(const Tensor& a, const Tensor& b);

/// Gathers the given leading-dimension rows into a new tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);

}  // namespace shike

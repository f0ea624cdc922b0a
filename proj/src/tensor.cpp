#include "shike/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

#include "shike/errors.hpp"

namespace shike {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_))
    throw ShapeError("tensor of shape " + shape_str(shape_) + " given " + std::to_string(data_.size()) + " values");
}

Shape Tensor::sample_shape() const {
  if (shape_.empty()) return {};
  return Shape(shape_.begin() + 1, shape_.end());
}

std::size_t Tensor::sample_size() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / shape_[0];
}

std::span<double> Tensor::sample(std::size_t b) {
  const std::size_t n = sample_size();
  return std::span<double>(data_).subspan(b * n, n);
}

std::span<const double> Tensor::sample(std::size_t b) const {
  const std::size_t n = sample_size();
  return std::span<const double>(data_).subspan(b * n, n);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (shape_ != other.shape_)
    throw ShapeError("cannot add " + shape_str(other.shape_) + " to " + shape_str(shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor Tensor::slice(std::size_t begin, std::size_t end) const {
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t n = sample_size();
  return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                                                  data_.begin() + static_cast<std::ptrdiff_t>(end * n)));
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("hadamard product of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Shape s = t.shape();
  s[0] = rows.size();
  Tensor out(std::move(s));
  const std::size_t n = t.sample_size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = t.sample(rows[i]);
    std::copy(src.begin(), src.end(), out.data() + i * n);
  }
  return out;
}

}  // namespace shike

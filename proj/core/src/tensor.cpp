#include "charnmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace charnmt::inline CHARNMT_ABI {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  CHARNMT_REQUIRE(shape_size(shape_) == data_.size(),
                  "tensor: shape " + shape_string(shape_) + " does not match " +
                      std::to_string(data_.size()) + " values");
}

Tensor Tensor::vector(std::initializer_list<Real> values) {
  return Tensor(Shape{values.size()}, std::vector<Real>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<Real> values) {
  return Tensor(Shape{rows, cols}, std::vector<Real>(values));
}

std::size_t Tensor::dim(std::size_t i) const {
  CHARNMT_REQUIRE(i < shape_.size(), "tensor: dim index out of range");
  return shape_[i];
}

std::size_t Tensor::cols() const {
  return shape_.empty() ? 1 : shape_.back();
}

std::size_t Tensor::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : data_.size() / c;
}

Real Tensor::item() const {
  CHARNMT_REQUIRE(data_.size() == 1, "tensor: item() on non-scalar " +
                                         shape_string(shape_));
  return data_[0];
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::add_scaled(const Tensor& other, Real scale) {
  CHARNMT_REQUIRE(other.size() == size(),
                  "tensor: add_scaled size mismatch " + shape_string(shape_) +
                      " vs " + shape_string(other.shape_));
  Real* dst = data_.data();
  const Real* src = other.data_.data();
  const std::size_t n = data_.size();
  if (scale == Real(1)) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
  }
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

Real max_abs_diff(const Tensor& a, const Tensor& b) {
  CHARNMT_REQUIRE(a.size() == b.size(), "max_abs_diff: size mismatch");
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace charnmt

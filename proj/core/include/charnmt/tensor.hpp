#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "charnmt/error.hpp"

namespace charnmt::inline CHARNMT_ABI {

#ifdef CHARNMT_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array. Invariant: shape_size(shape()) == size().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }
  static Tensor vector(std::initializer_list<Real> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<Real> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Leading dims flattened; last dim kept.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  Real* ptr() noexcept { return data_.data(); }
  const Real* ptr() const noexcept { return data_.data(); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  Real item() const;

  void fill(Real v);
  Tensor reshaped(Shape shape) const;

  // a += scale * b, shapes must agree
  void add_scaled(const Tensor& other, Real scale = Real(1));

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

bool operator==(const Tensor& a, const Tensor& b);

Real max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace charnmt

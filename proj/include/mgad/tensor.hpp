#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mgad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// A Tensor is a plain value: copies are deep and there is no aliasing between
/// instances. Shapes are explicit; the only broadcasting anywhere in the
/// library is done by named operations (channel bias, scalar scale).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor from(Shape shape, std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  const double& operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Plain (non-differentiable) arithmetic. All binary ops require equal shapes.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor hadamard(const Tensor& a, const Tensor& b);

/// a + s * b
Tensor axpy(const Tensor& a, double s, const Tensor& b);

double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double l2_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& a, double lo, double hi);

void require_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace mgad

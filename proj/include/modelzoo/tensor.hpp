#pragma once

#include <cstddef>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace modelzoo {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Every extent is positive and the value count equals the product of the
/// extents. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor filled(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const std::vector<double>& storage() const { return values_; }
  std::vector<double>& storage() { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double item() const;

  // Row-major multi-index access.
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  Tensor reshaped(Shape shape) const;
  Tensor row(std::size_t i) const;
  void set_row(std::size_t i, const Tensor& r);

  bool all_finite() const;
  // Throws NumericError naming `context` when a NaN or Inf is present.
  void require_finite(const std::string& context) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double c);

  double dot(const Tensor& other) const;
  double squared_norm() const;
  double sum() const;
  double max_abs() const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> values_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(double c, Tensor a);

// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);
std::vector<Tensor> unstack(const Tensor& batch);

// Binary layout: u64 LE rank, rank x u64 LE extents, then f64 LE values.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace modelzoo

#include "modelzoo/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "modelzoo/error.hpp"

namespace modelzoo {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
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

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor", "zero extent in shape " + shape_string(shape));
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  values_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_extents(shape_);
  if (values_.size() != shape_size(shape_))
    throw ShapeError("tensor", "shape " + shape_string(shape_) + " needs " +
                                   std::to_string(shape_size(shape_)) + " values, got " +
                                   std::to_string(values_.size()));
}

Tensor Tensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::filled(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.values_.begin(), t.values_.end(), v);
  return t;
}

double Tensor::item() const {
  if (values_.size() != 1)
    throw ShapeError("tensor", "item() on non-scalar " + shape_string(shape_));
  return values_[0];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size())
    throw ShapeError("tensor", "index rank mismatch for " + shape_string(shape_));
  std::size_t off = 0, axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw ShapeError("tensor", "index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return values_[offset(index)]; }
double& Tensor::at(std::initializer_list<std::size_t> index) { return values_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size())
    throw ShapeError("tensor", "cannot reshape " + shape_string(shape_) + " to " +
                                   shape_string(shape));
  return Tensor(std::move(shape), values_);
}

Tensor Tensor::row(std::size_t i) const {
  if (shape_.empty()) throw ShapeError("tensor", "row() on scalar");
  Shape rest(shape_.begin() + 1, shape_.end());
  std::size_t n = shape_size(rest);
  std::vector<double> v(values_.begin() + static_cast<std::ptrdiff_t>(i * n),
                        values_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return Tensor(std::move(rest), std::move(v));
}

void Tensor::set_row(std::size_t i, const Tensor& r) {
  std::size_t n = r.size();
  if (shape_.empty() || n * shape_[0] != values_.size())
    throw ShapeError("tensor", "set_row shape mismatch");
  std::copy(r.values_.begin(), r.values_.end(), values_.begin() + static_cast<std::ptrdiff_t>(i * n));
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::require_finite(const std::string& context) const {
  if (!all_finite()) throw NumericError(context, "non-finite value in tensor " + shape_string(shape_));
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.values_.size() != values_.size())
    throw ShapeError("tensor", "+= shape mismatch " + shape_string(shape_) + " vs " +
                                   shape_string(other.shape_));
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (other.values_.size() != values_.size())
    throw ShapeError("tensor", "-= shape mismatch " + shape_string(shape_) + " vs " +
                                   shape_string(other.shape_));
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

Tensor& Tensor::operator*=(double c) {
  for (auto& v : values_) v *= c;
  return *this;
}

double Tensor::dot(const Tensor& other) const {
  if (other.values_.size() != values_.size()) throw ShapeError("tensor", "dot size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) s += values_[i] * other.values_[i];
  return s;
}

double Tensor::squared_norm() const { return dot(*this); }

double Tensor::sum() const {
  double s = 0.0;
  for (auto v : values_) s += v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (auto v : values_) m = std::max(m, std::abs(v));
  return m;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(double c, Tensor a) { return a *= c; }

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("tensor", "stack of zero tensors");
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  std::vector<double> v;
  v.reserve(shape_size(s));
  for (const auto& t : items) {
    if (t.shape() != items[0].shape()) throw ShapeError("tensor", "stack of mismatched shapes");
    v.insert(v.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(s), std::move(v));
}

std::vector<Tensor> unstack(const Tensor& batch) {
  std::vector<Tensor> out;
  out.reserve(batch.extent(0));
  for (std::size_t i = 0; i < batch.extent(0); ++i) out.push_back(batch.row(i));
  return out;
}

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw Error("tensor", "truncated tensor stream");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u64(out, t.rank());
  for (auto e : t.shape()) put_u64(out, e);
  for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw Error("tensor", "write failed");
}

Tensor read_tensor(std::istream& in) {
  auto rank = get_u64(in);
  if (rank > 16) throw Error("tensor", "implausible rank " + std::to_string(rank));
  Shape s(rank);
  for (auto& e : s) e = get_u64(in);
  std::vector<double> v(shape_size(s));
  for (auto& x : v) x = std::bit_cast<double>(get_u64(in));
  return Tensor(std::move(s), std::move(v));
}

}  // namespace modelzoo

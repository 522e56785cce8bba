#include "geonorm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "geonorm/errors.hpp"

namespace geonorm {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

std::string_view to_string(Precision precision) {
  return precision == Precision::kWide ? "wide" : "narrow";
}

Precision parse_precision(std::string_view name) {
  if (name == "wide") return Precision::kWide;
  if (name == "narrow") return Precision::kNarrow;
  throw ContractError("unknown precision mode '" + std::string(name) + "' (expected wide|narrow)");
}

DenseTensor::DenseTensor(Shape shape, Precision precision)
    : shape_(std::move(shape)), values_(shape_size(shape_), 0.0), precision_(precision) {}

DenseTensor::DenseTensor(Shape shape, std::vector<double> values, Precision precision)
    : shape_(std::move(shape)), values_(values.begin(), values.end()), precision_(precision) {
  if (shape_size(shape_) != values_.size()) {
    throw DimensionError("tensor of shape " + to_string(shape_) + " cannot hold " +
                         std::to_string(values_.size()) + " values");
  }
  if (precision_ == Precision::kNarrow) {
    for (double& v : values_) v = round_to(precision_, v);
  }
}

DenseTensor DenseTensor::scalar(double value, Precision precision) {
  return DenseTensor({}, {value}, precision);
}

DenseTensor DenseTensor::vector(std::initializer_list<double> values) {
  return DenseTensor({values.size()}, std::vector<double>(values));
}

DenseTensor DenseTensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(n * m);
  for (const auto& r : rows) {
    if (r.size() != m) throw DimensionError("ragged rows in DenseTensor::matrix");
    values.insert(values.end(), r.begin(), r.end());
  }
  return DenseTensor({n, m}, std::move(values));
}

DenseTensor DenseTensor::uninitialized(Shape shape, Precision precision) {
  DenseTensor t;
  t.shape_ = std::move(shape);
  t.values_.resize(shape_size(t.shape_));
  t.precision_ = precision;
  return t;
}

bool DenseTensor::operator==(const DenseTensor& other) const {
  return shape_ == other.shape_ && precision_ == other.precision_ &&
         std::equal(values_.begin(), values_.end(), other.values_.begin(), other.values_.end());
}

DenseTensor DenseTensor::full(Shape shape, double value, Precision precision) {
  DenseTensor t(std::move(shape), precision);
  t.fill(value);
  return t;
}

std::size_t DenseTensor::dim(int axis) const {
  const int r = static_cast<int>(shape_.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(a)];
}

void DenseTensor::set_precision(Precision precision) {
  precision_ = precision;
  if (precision_ == Precision::kNarrow) {
    for (double& v : values_) v = round_to(precision_, v);
  }
}

std::span<double> DenseTensor::row(std::size_t r) {
  const std::size_t d = last_dim();
  return std::span<double>(values_).subspan(r * d, d);
}

std::span<const double> DenseTensor::row(std::size_t r) const {
  const std::size_t d = last_dim();
  return std::span<const double>(values_).subspan(r * d, d);
}

double DenseTensor::item() const {
  if (values_.size() != 1) {
    throw DimensionError("item() needs a single-element tensor, got shape " + to_string(shape_));
  }
  return values_[0];
}

void DenseTensor::fill(double value) {
  std::fill(values_.begin(), values_.end(), round_to(precision_, value));
}

bool DenseTensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

DenseTensor DenseTensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  DenseTensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double relative_error(const DenseTensor& a, const DenseTensor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("relative_error: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

}  // namespace geonorm

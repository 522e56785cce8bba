#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <new>
#include <utility>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace geonorm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string to_string(const Shape& shape);

// Wide is IEEE double. Narrow keeps double storage but rounds every stored
// value through float, and matrix products run in float.
enum class Precision { kWide, kNarrow };

std::string_view to_string(Precision precision);
Precision parse_precision(std::string_view name);

inline double round_to(Precision precision, double value) {
  return precision == Precision::kNarrow ? static_cast<double>(static_cast<float>(value))
                                         : value;
}

// 64-byte aligned storage that leaves doubles uninitialised on resize, so
// buffers that are about to be overwritten skip the zero fill. The fixed
// alignment keeps vectorised reductions (whose summation order depends on
// the start address) bitwise reproducible from run to run.
template <typename T>
struct TensorAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  TensorAllocator() = default;
  template <typename U>
  TensorAllocator(const TensorAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <typename U>
  bool operator==(const TensorAllocator<U>&) const noexcept {
    return true;
  }
};

using AlignedValues = std::vector<double, TensorAllocator<double>>;

/// Row-major dense array of reals. The last dimension is the feature
/// dimension for every per-row operation in the library.
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(Shape shape, Precision precision = Precision::kWide);
  DenseTensor(Shape shape, std::vector<double> values, Precision precision = Precision::kWide);

  static DenseTensor scalar(double value, Precision precision = Precision::kWide);
  static DenseTensor vector(std::initializer_list<double> values);
  static DenseTensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static DenseTensor full(Shape shape, double value, Precision precision = Precision::kWide);
  // Contents unspecified; the caller writes every element.
  static DenseTensor uninitialized(Shape shape, Precision precision = Precision::kWide);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return last_dim() == 0 ? 0 : size() / last_dim(); }

  Precision precision() const { return precision_; }
  void set_precision(Precision precision);

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double item() const;

  void fill(double value);
  bool all_finite() const;
  DenseTensor reshaped(Shape shape) const;

  bool operator==(const DenseTensor& other) const;

 private:
  Shape shape_;
  AlignedValues values_;
  Precision precision_ = Precision::kWide;
};

double max_abs_diff(const DenseTensor& a, const DenseTensor& b);
// Frobenius norm of (a - b) over Frobenius norm of b.
double relative_error(const DenseTensor& a, const DenseTensor& b);

}  // namespace geonorm

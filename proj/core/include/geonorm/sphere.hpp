#pragma once

#include <span>
#include <vector>

#include "geonorm/tensor.hpp"

namespace geonorm {

/// Rows of x, each a point on the sphere of its own radius ||x_row||.
/// Leading dimensions (batch, sequence, ...) are treated as independent rows.
class SpherePoint {
 public:
  // Throws ContractError if any row has zero norm.
  explicit SpherePoint(DenseTensor x);

  const DenseTensor& x() const { return x_; }
  std::span<const double> radius() const { return radius_; }

 private:
  DenseTensor x_;
  std::vector<double> radius_;
};

/// An update direction attached to a base point. Tangency is not enforced on
/// construction; tangent_project() produces vectors that satisfy it.
class TangentVector {
 public:
  TangentVector(const SpherePoint& base, DenseTensor v);

  const DenseTensor& v() const { return v_; }
  const SpherePoint& base() const { return *base_; }

  // max over rows of |<x, v>| / (||x|| ||v||); zero rows of v are skipped.
  double max_cosine_to_base() const;

 private:
  const SpherePoint* base_;
  DenseTensor v_;
};

/// v = s - (x.s / ||x||^2) x, per row.
TangentVector tangent_project(const SpherePoint& x, const DenseTensor& s);

/// cos(|v|/|x|) x + |x| sin(|v|/|x|) v/|v| per row. A zero row of v returns the
/// base row unchanged.
DenseTensor exp_map(const SpherePoint& x, const TangentVector& v);

/// exp_map(x, step_size * tangent_project(x, s)).
DenseTensor geodesic_step(const SpherePoint& x, const DenseTensor& s, double step_size);

/// Angle between corresponding rows of a and b, computed with atan2 so it
/// stays accurate near 0 and pi.
std::vector<double> row_angles(const DenseTensor& a, const DenseTensor& b);

}  // namespace geonorm

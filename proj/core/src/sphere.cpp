#include "geonorm/sphere.hpp"

#include <cmath>

#include "geonorm/errors.hpp"

namespace geonorm {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_same_shape(const DenseTensor& a, const DenseTensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

}  // namespace

SpherePoint::SpherePoint(DenseTensor x) : x_(std::move(x)) {
  if (x_.rank() == 0 || x_.last_dim() == 0) {
    throw DimensionError("SpherePoint needs a non-empty feature dimension, got " +
                         to_string(x_.shape()));
  }
  radius_.resize(x_.rows());
  for (std::size_t r = 0; r < x_.rows(); ++r) {
    radius_[r] = std::sqrt(dot(x_.row(r), x_.row(r)));
    if (!(radius_[r] > 0.0)) {
      throw ContractError("SpherePoint row " + std::to_string(r) + " has zero norm");
    }
  }
}

TangentVector::TangentVector(const SpherePoint& base, DenseTensor v)
    : base_(&base), v_(std::move(v)) {
  require_same_shape(base.x(), v_, "TangentVector");
}

double TangentVector::max_cosine_to_base() const {
  double worst = 0.0;
  for (std::size_t r = 0; r < v_.rows(); ++r) {
    const double vn = std::sqrt(dot(v_.row(r), v_.row(r)));
    if (vn == 0.0) continue;
    worst = std::max(worst, std::abs(dot(base_->x().row(r), v_.row(r))) / (base_->radius()[r] * vn));
  }
  return worst;
}

TangentVector tangent_project(const SpherePoint& x, const DenseTensor& s) {
  require_same_shape(x.x(), s, "tangent_project");
  DenseTensor v(s.shape(), s.precision());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto xr = x.x().row(r);
    auto sr = s.row(r);
    auto vr = v.row(r);
    const double coef = dot(xr, sr) / dot(xr, xr);
    for (std::size_t j = 0; j < sr.size(); ++j) vr[j] = sr[j] - coef * xr[j];
  }
  return TangentVector(x, std::move(v));
}

DenseTensor exp_map(const SpherePoint& x, const TangentVector& v) {
  if (&v.base() != &x) require_same_shape(x.x(), v.v(), "exp_map");
  DenseTensor out = x.x();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto vr = v.v().row(r);
    const double vn = std::sqrt(dot(vr, vr));
    if (vn == 0.0) continue;
    const double radius = x.radius()[r];
    const double angle = vn / radius;
    const double c = std::cos(angle);
    const double s = radius * std::sin(angle) / vn;
    auto xr = x.x().row(r);
    auto o = out.row(r);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = c * xr[j] + s * vr[j];
  }
  return out;
}

DenseTensor geodesic_step(const SpherePoint& x, const DenseTensor& s, double step_size) {
  TangentVector v = tangent_project(x, s);
  DenseTensor scaled = v.v();
  for (double& e : scaled.values()) e *= step_size;
  return exp_map(x, TangentVector(x, std::move(scaled)));
}

std::vector<double> row_angles(const DenseTensor& a, const DenseTensor& b) {
  require_same_shape(a, b, "row_angles");
  std::vector<double> out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto ar = a.row(r);
    auto br = b.row(r);
    const double aa = dot(ar, ar);
    const double ab = dot(ar, br);
    // Component of b orthogonal to a.
    double perp = 0.0;
    for (std::size_t j = 0; j < ar.size(); ++j) {
      const double e = br[j] - (ab / aa) * ar[j];
      perp += e * e;
    }
    out[r] = std::atan2(std::sqrt(perp) * std::sqrt(aa), ab);
  }
  return out;
}

}  // namespace geonorm

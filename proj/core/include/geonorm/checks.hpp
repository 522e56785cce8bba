#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "geonorm/autodiff.hpp"

namespace geonorm {

// How a gradient check turns per-element differences into one number.
enum class GradErrorKind {
  // max_i |ad_i - fd_i| / max(1, |fd_i|)
  kElementwise,
  // max_i |ad_i - fd_i| / max(max_i |fd_i|, 1e-8)
  kNormwise,
};

/// Differentiable function of some parameters. forward() must register every
/// parameter on the tape it is given and return a tensor of any shape; the
/// check contracts it with a fixed random weighting to get a scalar.
struct GradCheckCase {
  std::string name;
  std::vector<Parameter*> params;
  std::function<Var(Tape&)> forward;
  double tolerance = 1e-4;
  GradErrorKind error_kind = GradErrorKind::kNormwise;
};

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  // Location of the worst element, for replay.
  std::string worst_param;
  std::size_t worst_index = 0;
  double autodiff = 0.0;
  double finite_difference = 0.0;
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

/// Central differences with step h in wide precision against one backward pass.
GradCheckResult run_gradcheck(const GradCheckCase& c, std::uint64_t seed,
                              double h = kFiniteDifferenceStep);

/// Every primitive (1e-6 elementwise) and every layer type, including the full
/// block under each normalization strategy (1e-4 normwise). `select` picks a
/// subset by case name; skipped cases still draw their seeds, so a selected
/// case sees exactly the inputs it gets in a full run.
std::vector<GradCheckResult> run_gradcheck_suite(
    std::uint64_t seed, const std::function<bool(const std::string&)>& select = {});

struct GeometryReport {
  std::size_t trials = 0;
  double max_norm_deviation = 0.0;     // | ||exp(x,v)|| - ||x|| | / ||x||
  double max_orthogonality = 0.0;      // |<x, P(s)>| / (||x|| ||s|| + eps)
  double max_idempotence_error = 0.0;  // max |P(P(s)) - P(s)|
  double max_geodesic_angle_error = 0.0;
  bool passed = false;
};

inline constexpr double kGeometryNormTolerance = 1e-9;
inline constexpr double kGeometryOrthogonalityTolerance = 1e-9;
inline constexpr double kGeometryIdempotenceTolerance = 1e-12;
inline constexpr double kGeometryAngleTolerance = 1e-9;

/// Random base points with dims 2..64 and radii log-uniform in [1e-3, 1e3].
GeometryReport run_geometry_suite(std::size_t trials, std::uint64_t seed);

struct GeoNormContractReport {
  std::size_t trials = 0;
  double max_angle_excess = 0.0;     // max(angle - clamp), may be negative
  double max_norm_deviation = 0.0;   // relative, on rows with inactive floors
  std::size_t rows_checked_for_norm = 0;
  bool passed = false;
};

/// Random x, g, clamp, scale, bias, decay and layer index.
GeoNormContractReport run_geonorm_contract(std::size_t trials, std::uint64_t seed);

}  // namespace geonorm

#pragma once

#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "geonorm/autodiff.hpp"
#include "geonorm/schedules.hpp"

namespace geonorm {

// Denominator floor for RMSNorm; a zero row maps to (approximately) zero.
inline constexpr double kRmsNormFloor = 1e-12;
// Floors used by the GeoNorm layer for the tangent norm and the radius.
inline constexpr double kTangentNormFloor = 1e-8;
inline constexpr double kRadiusFloor = 1e-6;

/// (v / max(||v||, floor)) * sqrt(D) per row, optionally followed by a learned
/// per-dimension gain. Positive rescaling of a row does not change its output.
class RmsNormLayer {
 public:
  explicit RmsNormLayer(std::size_t dim, bool with_gain = false, std::string name = "rmsnorm");

  std::size_t dim() const { return dim_; }
  bool has_gain() const { return gain_.has_value(); }
  Parameter* gain() { return gain_ ? &*gain_ : nullptr; }

  Var forward(Var v);
  DenseTensor apply(const DenseTensor& v) const;
  std::vector<Parameter*> parameters();

 private:
  std::size_t dim_;
  std::optional<Parameter> gain_;
};

/// Gain-free RMSNorm over the last dimension.
Var rmsnorm(Var v);
DenseTensor rmsnorm(const DenseTensor& v, Precision precision = Precision::kWide);

struct GeoNormParams {
  double scale = 1.0;  // initial value of the learnable angle multiplier
  double bias = 0.0;   // initial value of the learnable angle offset
  double clamp = std::numbers::pi / 4.0;
  DecayKind decay = DecayKind::kHarmonic;

  // Throws ContractError unless clamp is in (0, pi/2].
  void validate() const;
};

/// Rotates x along the great circle pointed to by the tangent part of g:
///   grad  = g - (x.g / ||x||^2) x
///   u     = grad / max(||grad||, 1e-8)
///   R     = max(||x||, 1e-6)
///   theta = min((min(|grad|_floored / R, clamp) * scale + bias) * factor(k), clamp)
///   out   = x cos(theta) + u R sin(theta)
/// scale and bias are rank-1 single-element tensors.
Var geonorm(Var x, Var g, Var scale, Var bias, LayerContext ctx, double clamp, DecayKind decay);

/// Standalone evaluation with scale and bias taken from params.
DenseTensor geonorm(const DenseTensor& x, const DenseTensor& g, LayerContext ctx,
                    const GeoNormParams& params, Precision precision = Precision::kWide);

/// One GeoNorm site (after attention or after the FFN) with its own learnable
/// scale and bias scalars.
class GeoNormLayer {
 public:
  GeoNormLayer(const GeoNormParams& params, const std::string& name);

  Var forward(Var x, Var g, LayerContext ctx);

  Parameter& scale() { return scale_; }
  Parameter& bias() { return bias_; }
  double clamp() const { return clamp_; }
  DecayKind decay() const { return decay_; }
  std::vector<Parameter*> parameters() { return {&scale_, &bias_}; }

 private:
  // Both are floating-point so they receive gradients, and the clamp given
  // here is the one applied (no fixed pi/4 override).
  Parameter scale_;
  Parameter bias_;
  double clamp_;
  DecayKind decay_;
};

}  // namespace geonorm

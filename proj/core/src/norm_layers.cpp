#include "geonorm/norm_layers.hpp"

#include <cmath>

#include "geonorm/errors.hpp"
#include "geonorm/ops.hpp"

namespace geonorm {

RmsNormLayer::RmsNormLayer(std::size_t dim, bool with_gain, std::string name) : dim_(dim) {
  if (dim == 0) throw ContractError("RmsNormLayer: dim must be positive");
  if (with_gain) gain_.emplace(std::move(name) + ".gain", DenseTensor::full({dim}, 1.0));
}

Var RmsNormLayer::forward(Var v) {
  if (v.value().rank() == 0 || v.value().last_dim() != dim_) {
    throw DimensionError("rmsnorm: expected last dimension " + std::to_string(dim_) + ", got " +
                         to_string(v.shape()));
  }
  Var out = rmsnorm(v);
  if (gain_) out = out * v.tape().parameter(*gain_);
  return out;
}

DenseTensor RmsNormLayer::apply(const DenseTensor& v) const {
  if (v.rank() == 0 || v.last_dim() != dim_) {
    throw DimensionError("rmsnorm: expected last dimension " + std::to_string(dim_) + ", got " +
                         to_string(v.shape()));
  }
  DenseTensor out = rmsnorm(v, v.precision());
  if (gain_) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = round_to(v.precision(), out[i] * gain_->value[i % dim_]);
    }
  }
  return out;
}

std::vector<Parameter*> RmsNormLayer::parameters() {
  if (gain_) return {&*gain_};
  return {};
}

Var rmsnorm(Var v) {
  const double root_d = std::sqrt(static_cast<double>(v.value().last_dim()));
  Var norm = clamp_min(reduce_norm_lastdim(v), kRmsNormFloor);
  return scale(v / norm, root_d);
}

DenseTensor rmsnorm(const DenseTensor& v, Precision precision) {
  if (v.rank() == 0) throw DimensionError("rmsnorm: rank-0 input");
  Tape tape(precision);
  return rmsnorm(tape.constant(v)).value();
}

void GeoNormParams::validate() const {
  // Allow rounding slack so a printed pi/2 still counts as pi/2.
  if (!(clamp > 0.0) || clamp > std::numbers::pi / 2.0 + 1e-9) {
    throw ContractError("GeoNorm clamp must lie in (0, pi/2], got " + std::to_string(clamp));
  }
  if (!std::isfinite(scale) || !std::isfinite(bias)) {
    throw ContractError("GeoNorm scale and bias must be finite");
  }
}

Var geonorm(Var x, Var g, Var scale_v, Var bias_v, LayerContext ctx, double clamp,
            DecayKind decay) {
  if (x.shape() != g.shape()) {
    throw DimensionError("geonorm: x " + to_string(x.shape()) + " and g " + to_string(g.shape()) +
                         " differ");
  }
  const double factor = schedule_factor(decay, ctx);

  Var radius = reduce_norm_lastdim(x);
  Var radial = sum_lastdim(x * g) / (radius * radius);
  Var tangent = g - radial * x;

  Var safe_tangent_norm = clamp_min(reduce_norm_lastdim(tangent), kTangentNormFloor);
  Var unit_tangent = tangent / safe_tangent_norm;
  Var safe_radius = clamp_min(radius, kRadiusFloor);

  Var theta = clamp_max(safe_tangent_norm / safe_radius, clamp);
  // The scheduled angle is what rotates x for every decay kind.
  theta = clamp_max(scale(theta * scale_v + bias_v, factor), clamp);

  return x * cos(theta) + unit_tangent * safe_radius * sin(theta);
}

DenseTensor geonorm(const DenseTensor& x, const DenseTensor& g, LayerContext ctx,
                    const GeoNormParams& params, Precision precision) {
  params.validate();
  Tape tape(precision);
  Var out = geonorm(tape.constant(x), tape.constant(g),
                    tape.constant(DenseTensor({1}, {params.scale})),
                    tape.constant(DenseTensor({1}, {params.bias})), ctx, params.clamp,
                    params.decay);
  return out.value();
}

GeoNormLayer::GeoNormLayer(const GeoNormParams& params, const std::string& name)
    : scale_(name + ".scale", DenseTensor({1}, {params.scale})),
      bias_(name + ".bias", DenseTensor({1}, {params.bias})),
      clamp_(params.clamp),
      decay_(params.decay) {
  params.validate();
}

Var GeoNormLayer::forward(Var x, Var g, LayerContext ctx) {
  Tape& tape = x.tape();
  return geonorm(x, g, tape.parameter(scale_), tape.parameter(bias_), ctx, clamp_, decay_);
}

}  // namespace geonorm

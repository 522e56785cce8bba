#include "geonorm/schedules.hpp"

#include <cmath>
#include <string>

#include "geonorm/errors.hpp"

namespace geonorm {

std::string_view to_string(DecayKind kind) {
  switch (kind) {
    case DecayKind::kHarmonic: return "harmonic";
    case DecayKind::kSqrt: return "sqrt";
    case DecayKind::kLinear: return "linear";
  }
  return "harmonic";
}

DecayKind parse_decay(std::string_view name) {
  if (name == "harmonic") return DecayKind::kHarmonic;
  if (name == "sqrt") return DecayKind::kSqrt;
  if (name == "linear") return DecayKind::kLinear;
  throw ContractError("unknown decay '" + std::string(name) + "' (expected harmonic|sqrt|linear)");
}

double schedule_factor(DecayKind kind, LayerContext ctx) {
  if (ctx.layer_total < 1) throw ContractError("layer_total must be at least 1");
  if (ctx.layer_index < 0 || ctx.layer_index >= ctx.layer_total) {
    throw ContractError("layer_index " + std::to_string(ctx.layer_index) + " outside [0, " +
                        std::to_string(ctx.layer_total) + ")");
  }
  const double k = ctx.layer_index;
  const double t = ctx.layer_total;
  switch (kind) {
    case DecayKind::kHarmonic: return 1.0 / (k + 1.0);
    case DecayKind::kSqrt: return 1.0 / std::sqrt(k + 1.0);
    case DecayKind::kLinear: return (t - k) / t;
  }
  return 1.0;
}

}  // namespace geonorm

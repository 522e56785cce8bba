#pragma once

#include <string_view>

namespace geonorm {

// Layer-wise decay of the geodesic rotation angle.
enum class DecayKind { kHarmonic, kSqrt, kLinear };

std::string_view to_string(DecayKind kind);
// Accepts exactly "harmonic", "sqrt", "linear".
DecayKind parse_decay(std::string_view name);

/// Zero-based layer index k out of layer_total layers.
struct LayerContext {
  int layer_index = 0;
  int layer_total = 1;
};

/// harmonic: 1/(k+1), sqrt: 1/sqrt(k+1), linear: (T-k)/T, with zero-based k.
/// Throws ContractError unless 0 <= k < T.
double schedule_factor(DecayKind kind, LayerContext ctx);

}  // namespace geonorm

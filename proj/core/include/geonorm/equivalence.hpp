#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "geonorm/norm_layers.hpp"
#include "geonorm/tensor.hpp"

namespace geonorm {

/// A residual sub-module phi_k with frozen weights.
using SubModule = std::function<DenseTensor(const DenseTensor&)>;

struct ChainModules {
  std::vector<SubModule> modules;
  RmsNormLayer norm;
};

/// Chain of `layers` sub-modules alternating causal attention and FFN, each
/// with its own random weights. Inputs are (batch, seq, dim).
ChainModules random_transformer_chain(std::size_t layers, std::size_t dim, std::size_t heads,
                                      std::uint64_t seed, Precision precision = Precision::kWide);

// N(0, 1) input of shape (batch, seq, dim) for a chain; seeded independently of the weights.
DenseTensor random_chain_input(std::size_t batch, std::size_t seq, std::size_t dim,
                               std::uint64_t seed, Precision precision = Precision::kWide);

/// Pre-Norm recursion x_k = x_{k-1} + phi_k(Norm(x_{k-1})). Returns x_1..x_K.
std::vector<DenseTensor> run_prenorm_chain(const DenseTensor& x0, const ChainModules& mods);

/// Rescaled recursion, one-based k:
///   a_k = sqrt(k)/sqrt(k+1) a_{k-1} + 1/sqrt(k+1) phi_k(Norm(a_{k-1})),  a_0 = x_0.
/// Returns a_1..a_K.
std::vector<DenseTensor> run_alt_scaled_chain(const DenseTensor& x0, const ChainModules& mods);

struct EquivalenceReport {
  // max over rows of ||Norm(x_k) - Norm(a_k)|| / sqrt(D), per layer.
  std::vector<double> layer_deviation;
  double max_deviation = 0.0;
  // max over rows of ||sqrt(k+1) a_k - x_k|| / ||x_k||, per layer.
  std::vector<double> scaled_identity_error;
  double max_scaled_identity_error = 0.0;
  double tolerance = 0.0;
  Precision precision = Precision::kWide;
  bool passed = false;  // max_deviation < tolerance
};

// 1e-6 wide, 1e-3 narrow.
double default_equivalence_tolerance(Precision precision);

EquivalenceReport check_equivalence(const DenseTensor& x0, const ChainModules& mods,
                                    double tolerance);

/// arccos(sqrt(k)/sqrt(k+1)): the fixed rotation angle the rescaled chain
/// applies at layer k.
double prenorm_implied_angle(int k);

}  // namespace geonorm

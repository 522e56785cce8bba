#include "geonorm/equivalence.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "geonorm/errors.hpp"
#include "geonorm/model.hpp"
#include "geonorm/ops.hpp"

namespace geonorm {
namespace {

DenseTensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  DenseTensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Linear random_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
  return Linear{Parameter("w", normal_tensor({in, out}, stddev, rng)),
                Parameter("b", normal_tensor({out}, 0.1, rng))};
}

// out = a * x + b * y, rounded to precision.
DenseTensor combine(double a, const DenseTensor& x, double b, const DenseTensor& y,
                    Precision precision) {
  if (x.shape() != y.shape()) {
    throw DimensionError("sub-module changed shape " + to_string(x.shape()) + " -> " +
                         to_string(y.shape()));
  }
  DenseTensor out(x.shape(), precision);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = round_to(precision, a * x[i] + b * y[i]);
  return out;
}

void require_positive_rows(const DenseTensor& x0) {
  for (std::size_t r = 0; r < x0.rows(); ++r) {
    double s = 0.0;
    for (double v : x0.row(r)) s += v * v;
    if (!(s > 0.0)) throw ContractError("chain input row " + std::to_string(r) + " has zero norm");
  }
}

}  // namespace

DenseTensor random_chain_input(std::size_t batch, std::size_t seq, std::size_t dim,
                               std::uint64_t seed, Precision precision) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  DenseTensor x = normal_tensor({batch, seq, dim}, 1.0, rng);
  x.set_precision(precision);
  return x;
}

ChainModules random_transformer_chain(std::size_t layers, std::size_t dim, std::size_t heads,
                                      std::uint64_t seed, Precision precision) {
  if (heads == 0 || dim % heads != 0) throw ContractError("dim must be divisible by heads");
  std::mt19937_64 rng(seed);
  ChainModules chain{{}, RmsNormLayer(dim)};
  for (std::size_t k = 0; k < layers; ++k) {
    if (k % 2 == 0) {
      auto w = std::make_shared<AttentionWeights>();
      w->query = random_linear(dim, dim, rng);
      w->key = random_linear(dim, dim, rng);
      w->value = random_linear(dim, dim, rng);
      w->output = random_linear(dim, dim, rng);
      w->heads = static_cast<int>(heads);
      chain.modules.emplace_back([w, precision](const DenseTensor& x) {
        Tape tape(precision);
        return causal_self_attention(tape.constant(x), *w).value();
      });
    } else {
      auto w = std::make_shared<FfnWeights>();
      w->up = random_linear(dim, 4 * dim, rng);
      w->down = random_linear(4 * dim, dim, rng);
      chain.modules.emplace_back([w, precision](const DenseTensor& x) {
        Tape tape(precision);
        return ffn(tape.constant(x), *w).value();
      });
    }
  }
  return chain;
}

std::vector<DenseTensor> run_prenorm_chain(const DenseTensor& x0, const ChainModules& mods) {
  require_positive_rows(x0);
  const Precision precision = x0.precision();
  std::vector<DenseTensor> out;
  out.reserve(mods.modules.size());
  DenseTensor x = x0;
  for (const auto& phi : mods.modules) {
    x = combine(1.0, x, 1.0, phi(mods.norm.apply(x)), precision);
    out.push_back(x);
  }
  return out;
}

std::vector<DenseTensor> run_alt_scaled_chain(const DenseTensor& x0, const ChainModules& mods) {
  require_positive_rows(x0);
  const Precision precision = x0.precision();
  std::vector<DenseTensor> out;
  out.reserve(mods.modules.size());
  DenseTensor x = x0;
  for (std::size_t i = 0; i < mods.modules.size(); ++i) {
    const double k = static_cast<double>(i + 1);
    const double keep = std::sqrt(k) / std::sqrt(k + 1.0);
    const double step = 1.0 / std::sqrt(k + 1.0);
    x = combine(keep, x, step, mods.modules[i](mods.norm.apply(x)), precision);
    out.push_back(x);
  }
  return out;
}

double default_equivalence_tolerance(Precision precision) {
  return precision == Precision::kWide ? 1e-6 : 1e-3;
}

EquivalenceReport check_equivalence(const DenseTensor& x0, const ChainModules& mods,
                                    double tolerance) {
  EquivalenceReport report;
  report.tolerance = tolerance;
  report.precision = x0.precision();
  const auto plain = run_prenorm_chain(x0, mods);
  const auto scaled = run_alt_scaled_chain(x0, mods);
  const double root_d = std::sqrt(static_cast<double>(mods.norm.dim()));

  for (std::size_t i = 0; i < plain.size(); ++i) {
    const DenseTensor a = mods.norm.apply(plain[i]);
    const DenseTensor b = mods.norm.apply(scaled[i]);
    const double lift = std::sqrt(static_cast<double>(i + 2));
    double dev = 0.0;
    double ident = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double diff = 0.0;
      double gap = 0.0;
      double ref = 0.0;
      auto ar = a.row(r);
      auto br = b.row(r);
      auto xr = plain[i].row(r);
      auto sr = scaled[i].row(r);
      for (std::size_t j = 0; j < ar.size(); ++j) {
        diff += (ar[j] - br[j]) * (ar[j] - br[j]);
        gap += (lift * sr[j] - xr[j]) * (lift * sr[j] - xr[j]);
        ref += xr[j] * xr[j];
      }
      dev = std::max(dev, std::sqrt(diff) / root_d);
      ident = std::max(ident, ref > 0.0 ? std::sqrt(gap / ref) : std::sqrt(gap));
    }
    report.layer_deviation.push_back(dev);
    report.scaled_identity_error.push_back(ident);
    report.max_deviation = std::max(report.max_deviation, dev);
    report.max_scaled_identity_error = std::max(report.max_scaled_identity_error, ident);
  }
  report.passed = report.max_deviation < tolerance;
  return report;
}

double prenorm_implied_angle(int k) {
  if (k < 1) throw ContractError("implied angle is defined for one-based k >= 1");
  return std::acos(std::sqrt(static_cast<double>(k)) / std::sqrt(static_cast<double>(k) + 1.0));
}

}  // namespace geonorm

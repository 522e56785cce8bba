#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "geonorm/equivalence.hpp"
#include "oracles.hpp"

using namespace geonorm;

namespace {

ChainModules constant_chain(std::size_t layers, std::size_t dim, SubModule phi) {
  ChainModules m{std::vector<SubModule>(layers, std::move(phi)), RmsNormLayer(dim)};
  return m;
}

DenseTensor times(DenseTensor t, double c) {
  for (double& v : t.values()) v *= c;
  return t;
}

}  // namespace

TEST(PrenormChain, EmptyAndZeroResiduals) {
  std::mt19937_64 rng(1);
  auto x0 = oracle::randn({2, 3, 4}, rng);
  EXPECT_TRUE(run_prenorm_chain(x0, constant_chain(0, 4, {})).empty());
  auto zero = constant_chain(5, 4, [](const DenseTensor& x) { return DenseTensor(x.shape()); });
  for (const auto& xk : run_prenorm_chain(x0, zero)) EXPECT_EQ(xk, x0);
  auto alt = run_alt_scaled_chain(x0, zero);
  for (std::size_t k = 1; k <= alt.size(); ++k) {
    EXPECT_LT(max_abs_diff(alt[k - 1], times(x0, 1.0 / std::sqrt(k + 1.0))), 1e-15);
  }
  // Norm(x0) against Norm(x0 / sqrt(k+1)): equal up to the rounding of the rescale.
  EXPECT_LT(check_equivalence(x0, zero, 1e-6).max_deviation, 1e-15);
}

TEST(PrenormChain, IdentityModuleOneLayer) {
  std::mt19937_64 rng(2);
  auto x0 = oracle::randn({3, 6}, rng);
  auto id = constant_chain(1, 6, [](const DenseTensor& x) { return x; });
  auto x1 = run_prenorm_chain(x0, id).at(0);
  auto n = rmsnorm(x0);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(x1[i], x0[i] + n[i], 1e-15);
  auto a1 = run_alt_scaled_chain(x0, id).at(0);
  EXPECT_LT(max_abs_diff(a1, times(x1, 1.0 / std::sqrt(2.0))), 1e-15);
}

TEST(PrenormChain, RandomTransformerChainEquivalence) {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    const auto mods = random_transformer_chain(12, 32, 4, seed);
    const auto x0 = random_chain_input(2, 8, 32, seed);
    const auto r = check_equivalence(x0, mods, 1e-6);
    EXPECT_TRUE(r.passed);
    ASSERT_EQ(r.layer_deviation.size(), 12u);
    EXPECT_LT(r.max_deviation, 1e-6);
    EXPECT_LT(r.max_scaled_identity_error, 1e-9);
  }
}

TEST(PrenormChain, IndependentScaledIdentity) {
  // Recompute both chains here with plain loops over the library's modules.
  const auto mods = random_transformer_chain(6, 16, 2, 3);
  const auto x0 = random_chain_input(1, 5, 16, 3);
  DenseTensor x = x0, a = x0;
  for (std::size_t k = 1; k <= 6; ++k) {
    const DenseTensor px = mods.modules[k - 1](rmsnorm(x));
    const DenseTensor pa = mods.modules[k - 1](rmsnorm(a));
    const double c0 = std::sqrt(double(k)) / std::sqrt(k + 1.0), c1 = 1.0 / std::sqrt(k + 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += px[i];
      a[i] = c0 * a[i] + c1 * pa[i];
    }
    EXPECT_LT(relative_error(times(a, std::sqrt(k + 1.0)), x), 1e-12) << "layer " << k;
  }
}

TEST(PrenormChain, ImpliedAngleDecreasesToZero) {
  double prev = 10.0;
  for (int k = 1; k <= 200; ++k) {
    const double a = prenorm_implied_angle(k);
    EXPECT_NEAR(std::cos(a), std::sqrt(double(k) / (k + 1.0)), 1e-14);
    EXPECT_LT(a, prev);
    prev = a;
  }
  EXPECT_LT(prev, 0.08);
}

TEST(PrenormChain, NarrowUsesLooserTolerance) {
  EXPECT_EQ(default_equivalence_tolerance(Precision::kWide), 1e-6);
  EXPECT_EQ(default_equivalence_tolerance(Precision::kNarrow), 1e-3);
  const auto mods = random_transformer_chain(4, 16, 2, 5, Precision::kNarrow);
  const auto r = check_equivalence(random_chain_input(1, 4, 16, 5, Precision::kNarrow), mods, 1e-3);
  EXPECT_TRUE(r.passed);
}

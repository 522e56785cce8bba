#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "geonorm/errors.hpp"
#include "geonorm/ops.hpp"
#include "oracles.hpp"

using namespace geonorm;

namespace {

DenseTensor eval(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value();
}

}  // namespace

TEST(DenseTensor, SizeMatchesShape) {
  DenseTensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.dim(-1), 4u);
  EXPECT_THROW(DenseTensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(DenseTensor, NarrowRoundsThroughFloat) {
  DenseTensor t({1}, {0.1}, Precision::kNarrow);
  EXPECT_EQ(t[0], static_cast<double>(0.1f));
  EXPECT_NE(t[0], 0.1);
}

TEST(Matmul, IdentityFactorsAndHandValue) {
  auto a = DenseTensor::matrix({{1, 2}, {3, 4}});
  auto id = DenseTensor::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(eval([&](Tape& t) { return matmul(t.constant(a), t.constant(id)); }).values()[3], 4.0);
  auto r = eval([&](Tape& t) { return matmul(t.constant(id), t.constant(DenseTensor::matrix({{5}, {7}}))); });
  EXPECT_EQ(r[0], 5.0);
  EXPECT_EQ(r[1], 7.0);
  r = eval([&](Tape& t) {
    return matmul(t.constant(DenseTensor::matrix({{1, 2}})), t.constant(DenseTensor::matrix({{3}, {4}})));
  });
  EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(DenseTensor({2, 3})), t.constant(DenseTensor({2, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos) << e.what();
  }
}

TEST(Matmul, MatchesNaiveLoops) {
  std::mt19937_64 rng(3);
  auto a = oracle::randn({5, 7}, rng), b = oracle::randn({7, 4}, rng);
  auto c = eval([&](Tape& t) { return matmul(t.constant(a), t.constant(b)); });
  auto ref = oracle::tensor_of(oracle::matmul(oracle::rows_of(a), oracle::rows_of(b)));
  EXPECT_LT(max_abs_diff(c, ref), 1e-13);
}

TEST(Linear, MatchesMatmulPlusBias) {
  std::mt19937_64 rng(4);
  auto x = oracle::randn({2, 3, 5}, rng), w = oracle::randn({5, 6}, rng), b = oracle::randn({6}, rng);
  auto fused = eval([&](Tape& t) { return linear(t.constant(x), t.constant(w), t.constant(b)); });
  auto composed = eval([&](Tape& t) { return matmul(t.constant(x), t.constant(w)) + t.constant(b); });
  EXPECT_LT(max_abs_diff(fused, composed), 1e-13);
}

TEST(ReduceNorm, HandValues) {
  auto n = [](DenseTensor v) { return eval([&](Tape& t) { return reduce_norm_lastdim(t.constant(v)); }).item(); };
  EXPECT_DOUBLE_EQ(n(DenseTensor::vector({3, 4})), 5.0);
  EXPECT_EQ(n(DenseTensor::vector({0, 0, 0})), 0.0);
  EXPECT_DOUBLE_EQ(n(DenseTensor::vector({1, 1, 1, 1})), 2.0);
}

TEST(Elementwise, AnalyticValues) {
  auto one = [](UnaryFn fn, double x) {
    return eval([&](Tape& t) { return elementwise(t.constant(DenseTensor::vector({x})), fn); }).item();
  };
  constexpr double pi = std::numbers::pi;
  EXPECT_EQ(one({UnaryKind::kCos}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(one({UnaryKind::kClampMax, pi / 4}, pi / 2), pi / 4);
  EXPECT_DOUBLE_EQ(one({UnaryKind::kSin}, pi / 2), 1.0);
  EXPECT_NEAR(one({UnaryKind::kGelu}, 0.7), oracle::gelu(0.7), 1e-15);
  EXPECT_THROW(one({UnaryKind::kSqrt}, -1.0), std::domain_error);
}

TEST(Softmax, HandValues) {
  auto sm = [](DenseTensor v) { return eval([&](Tape& t) { return softmax_lastdim(t.constant(v)); }); };
  auto a = sm(DenseTensor::vector({0, 0, 0, 0}));
  for (double p : a.values()) EXPECT_DOUBLE_EQ(p, 0.25);
  auto b = sm(DenseTensor::vector({1000, 1000}));
  EXPECT_DOUBLE_EQ(b[0], 0.5);
  EXPECT_DOUBLE_EQ(b[1], 0.5);
  auto c = sm(DenseTensor::vector({0, std::log(3.0)}));
  EXPECT_NEAR(c[0], 0.25, 1e-15);
  EXPECT_NEAR(c[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(5);
  auto x = oracle::randn({50, 17}, rng, 4.0);
  auto p = eval([&](Tape& t) { return softmax_lastdim(t.constant(x)); });
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, UniformAndCertain) {
  auto ce = [](DenseTensor logits, std::vector<int> targets) {
    return eval([&](Tape& t) { return cross_entropy(t.constant(logits), targets); }).item();
  };
  EXPECT_NEAR(ce(DenseTensor({1, 4}), {2}), std::log(4.0), 1e-15);
  EXPECT_NEAR(ce(DenseTensor({1, 256}), {17}), std::log(256.0), 1e-13);
  EXPECT_NEAR(ce(DenseTensor::matrix({{0, 1000, 0}}), {1}), 0.0, 1e-12);
  EXPECT_THROW(ce(DenseTensor({1, 4}), {4}), IndexError);
  EXPECT_THROW(ce(DenseTensor({1, 4}), {-1}), IndexError);
}

TEST(CrossEntropy, MatchesOracle) {
  std::mt19937_64 rng(6);
  auto logits = oracle::randn({6, 9}, rng, 3.0);
  std::vector<int> targets = {0, 8, 3, 3, 5, 1};
  double ref = 0.0;
  for (std::size_t r = 0; r < 6; ++r) ref += oracle::cross_entropy(oracle::rows_of(logits)[r], targets[r]);
  EXPECT_NEAR(eval([&](Tape& t) { return cross_entropy(t.constant(logits), targets); }).item(), ref / 6, 1e-13);
}

TEST(CausalAttention, FusedMatchesPerHeadOracle) {
  std::mt19937_64 rng(7);
  const std::size_t b = 2, s = 5, d = 8, heads = 2, hd = d / heads;
  auto q = oracle::randn({b, s, d}, rng), k = oracle::randn({b, s, d}, rng), v = oracle::randn({b, s, d}, rng);
  auto out = eval([&](Tape& t) { return causal_attention(t.constant(q), t.constant(k), t.constant(v), heads); });
  double worst = 0.0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      auto slice = [&](const DenseTensor& x) {
        oracle::Mat m(s, oracle::Vec(hd));
        for (std::size_t t = 0; t < s; ++t)
          for (std::size_t c = 0; c < hd; ++c) m[t][c] = x[(bi * s + t) * d + h * hd + c];
        return m;
      };
      auto ref = oracle::causal_head(slice(q), slice(k), slice(v));
      for (std::size_t t = 0; t < s; ++t)
        for (std::size_t c = 0; c < hd; ++c)
          worst = std::max(worst, std::abs(ref[t][c] - out[(bi * s + t) * d + h * hd + c]));
    }
  }
  EXPECT_LT(worst, 1e-13);
}

TEST(CausalAttention, FusedGradientMatchesComposedPrimitives) {
  std::mt19937_64 rng(8);
  const std::size_t b = 2, s = 4, d = 6, heads = 3, hd = 2;
  auto q0 = oracle::randn({b, s, d}, rng), k0 = oracle::randn({b, s, d}, rng), v0 = oracle::randn({b, s, d}, rng);
  auto w = oracle::randn({b, s, d}, rng);

  auto run = [&](bool fused) {
    Tape t;
    Var q = t.variable(q0), k = t.variable(k0), v = t.variable(v0);
    Var out;
    if (fused) {
      out = causal_attention(q, k, v, heads);
    } else {
      auto split = [&](Var x) { return permute(reshape(x, {b, s, heads, hd}), {0, 2, 1, 3}); };
      Var scores = scale(matmul(split(q), transpose_last2(split(k))), 1.0 / std::sqrt(double(hd)));
      Var o = matmul(causal_softmax(scores), split(v));
      out = reshape(permute(o, {0, 2, 1, 3}), {b, s, d});
    }
    Var loss = mean(out * t.constant(w));
    t.backward(loss);
    return std::vector<DenseTensor>{out.value(), t.grad(q), t.grad(k), t.grad(v)};
  };
  auto fused = run(true), composed = run(false);
  for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_LT(max_abs_diff(fused[i], composed[i]), 1e-13) << i;
}

TEST(Autodiff, HandGradients) {
  Tape t;
  Var x = t.variable(DenseTensor::vector({3.0}));
  t.backward(sum_lastdim(x * x));
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 6.0);

  Tape t2;
  Var y = t2.variable(DenseTensor::vector({1.0}));
  Var c = t2.constant(DenseTensor::vector({5.0}));
  t2.backward(sum_lastdim(c));
  EXPECT_EQ(t2.grad(y)[0], 0.0);

  Tape t3;
  Var z = t3.variable(DenseTensor::vector({3.0, 4.0}));
  t3.backward(reduce_norm_lastdim(z));
  EXPECT_DOUBLE_EQ(t3.grad(z)[0], 0.6);
  EXPECT_DOUBLE_EQ(t3.grad(z)[1], 0.8);
}

TEST(Autodiff, NormGradientAtZeroIsZero) {
  Tape t;
  Var z = t.variable(DenseTensor::vector({0.0, 0.0, 0.0}));
  t.backward(reduce_norm_lastdim(z));
  const DenseTensor g = t.grad(z);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, ClampBoundaryPassesGradient) {
  Tape t;
  Var x = t.variable(DenseTensor::vector({0.5, 0.7}));
  t.backward(sum_lastdim(clamp_max(x, 0.5)));
  EXPECT_EQ(t.grad(x)[0], 1.0);
  EXPECT_EQ(t.grad(x)[1], 0.0);
}

TEST(Autodiff, NonScalarLossRejected) {
  Tape t;
  Var x = t.variable(DenseTensor::vector({1.0, 2.0}));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Autodiff, BroadcastGradientSumsBack) {
  Tape t;
  Var a = t.variable(DenseTensor({3, 2}, {1, 2, 3, 4, 5, 6}));
  Var b = t.variable(DenseTensor::vector({10, 20}));
  t.backward(mean(a * b));
  EXPECT_DOUBLE_EQ(t.grad(b)[0], (1 + 3 + 5) / 6.0);
  EXPECT_DOUBLE_EQ(t.grad(b)[1], (2 + 4 + 6) / 6.0);
  EXPECT_DOUBLE_EQ(t.grad(a)[0], 10 / 6.0);
}

TEST(Autodiff, SameNodeUsedTwice) {
  Tape t;
  Var x = t.variable(DenseTensor::vector({2.0, -1.0}));
  t.backward(sum_lastdim(x * x + x));
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 5.0);
  EXPECT_DOUBLE_EQ(t.grad(x)[1], -1.0);
}

TEST(Autodiff, ParameterGradientsAccumulateAndReset) {
  Parameter p("p", DenseTensor::vector({1.0, 2.0}));
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(sum_lastdim(t.parameter(p)));
  }
  EXPECT_EQ(p.grad[0], 2.0);
  p.zero_grad();
  EXPECT_EQ(p.grad, DenseTensor(p.value.shape()));
}

TEST(Autodiff, BackwardIsBitwiseRepeatable) {
  std::mt19937_64 rng(9);
  Parameter w("w", oracle::randn({6, 6}, rng));
  auto x = oracle::randn({4, 6}, rng);
  auto grad = [&] {
    w.zero_grad();
    Tape t;
    t.backward(mean(gelu(matmul(t.constant(x), t.parameter(w)))));
    return w.grad;
  };
  EXPECT_EQ(grad(), grad());
}

TEST(Autodiff, VarFromOtherTapeRejected) {
  Tape a, b;
  Var x = a.variable(DenseTensor::vector({1.0}));
  Var y = b.variable(DenseTensor::vector({1.0}));
  EXPECT_THROW(add(x, y), ContractError);
}

TEST(Embedding, GathersRowsAndChecksRange) {
  auto table = DenseTensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  std::vector<int> idx = {2, 0};
  auto out = eval([&](Tape& t) { return embedding(t.constant(table), idx, {1, 2}); });
  EXPECT_EQ(out.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(out[0], 5.0);
  EXPECT_EQ(out[3], 2.0);
  std::vector<int> bad = {3};
  EXPECT_THROW(eval([&](Tape& t) { return embedding(t.constant(table), bad, {1}); }), IndexError);
}

TEST(Narrow, MatchesWideWithinFloatResolution) {
  std::mt19937_64 rng(10);
  auto a = oracle::randn({8, 32}, rng), b = oracle::randn({32, 8}, rng);
  auto run = [&](Precision p) {
    Tape t(p);
    return softmax_lastdim(gelu(matmul(t.constant(a), t.constant(b)))).value();
  };
  auto wide = run(Precision::kWide), narrow = run(Precision::kNarrow);
  EXPECT_LT(max_abs_diff(wide, narrow), 1e-5);
  for (double v : narrow.values()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

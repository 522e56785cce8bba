#include "geonorm/checks.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <random>

#include "geonorm/model.hpp"
#include "geonorm/norm_layers.hpp"
#include "geonorm/ops.hpp"
#include "geonorm/sphere.hpp"

namespace geonorm {
namespace {

DenseTensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, double mean = 0.0) {
  DenseTensor t(std::move(shape));
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

DenseTensor uniform_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  DenseTensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// Scalar loss used by every check: mean(out * w) for a fixed random w.
Var contract(Var out, const DenseTensor& weighting) {
  return mean(out * out.tape().constant(weighting));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

GradCheckResult run_gradcheck(const GradCheckCase& c, std::uint64_t seed, double h) {
  std::mt19937_64 rng(seed);
  DenseTensor weighting;
  {
    Tape probe;
    const Shape out_shape = c.forward(probe).shape();
    weighting = normal_tensor(out_shape, 1.0, rng);
  }
  auto evaluate = [&]() {
    Tape tape;
    return contract(c.forward(tape), weighting).value().item();
  };

  for (Parameter* p : c.params) p->zero_grad();
  {
    Tape tape;
    tape.backward(contract(c.forward(tape), weighting));
  }

  struct Entry {
    std::size_t param;
    std::size_t index;
    double ad;
    double fd;
  };
  std::vector<Entry> entries;
  double fd_scale = 0.0;
  for (std::size_t pi = 0; pi < c.params.size(); ++pi) {
    Parameter& p = *c.params[pi];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double saved = p.value[j];
      p.value[j] = saved + h;
      const double up = evaluate();
      p.value[j] = saved - h;
      const double down = evaluate();
      p.value[j] = saved;
      const double fd = (up - down) / (2.0 * h);
      entries.push_back({pi, j, p.grad[j], fd});
      fd_scale = std::max(fd_scale, std::abs(fd));
    }
  }

  GradCheckResult r;
  r.name = c.name;
  r.tolerance = c.tolerance;
  for (const Entry& e : entries) {
    const double denom = c.error_kind == GradErrorKind::kElementwise ? std::max(1.0, std::abs(e.fd))
                                                                     : std::max(fd_scale, 1e-8);
    const double err = std::abs(e.ad - e.fd) / denom;
    if (err >= r.max_error) {
      r.max_error = err;
      r.worst_param = c.params[e.param]->name;
      r.worst_index = e.index;
      r.autodiff = e.ad;
      r.finite_difference = e.fd;
    }
  }
  r.passed = r.max_error < c.tolerance && std::isfinite(r.max_error);
  return r;
}

std::vector<GradCheckResult> run_gradcheck_suite(
    std::uint64_t seed, const std::function<bool(const std::string&)>& select) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> results;
  std::deque<Parameter> store;
  auto param = [&](const std::string& name, DenseTensor value) -> Parameter& {
    return store.emplace_back(name, std::move(value));
  };
  auto run = [&](GradCheckCase c) {
    const std::uint64_t case_seed = rng();
    if (!select || select(c.name)) results.push_back(run_gradcheck(c, case_seed));
  };
  auto primitive = [&](std::string name, std::vector<Parameter*> ps, std::function<Var(Tape&)> f) {
    run({std::move(name), std::move(ps), std::move(f), 1e-6, GradErrorKind::kElementwise});
  };
  auto layer = [&](std::string name, std::vector<Parameter*> ps, std::function<Var(Tape&)> f) {
    run({std::move(name), std::move(ps), std::move(f), 1e-4, GradErrorKind::kNormwise});
  };

  // Primitives.
  {
    Parameter& a = param("a", normal_tensor({3, 4}, 1.0, rng));
    Parameter& b = param("b", normal_tensor({4, 5}, 1.0, rng));
    primitive("matmul", {&a, &b}, [&](Tape& t) { return matmul(t.parameter(a), t.parameter(b)); });
    Parameter& ba = param("ba", normal_tensor({2, 3, 4}, 1.0, rng));
    Parameter& bb = param("bb", normal_tensor({2, 4, 2}, 1.0, rng));
    primitive("matmul_batched", {&ba, &bb},
              [&](Tape& t) { return matmul(t.parameter(ba), t.parameter(bb)); });
  }
  {
    Parameter& x = param("x", normal_tensor({2, 3, 4}, 1.0, rng));
    Parameter& row = param("row", uniform_tensor({2, 3, 1}, 0.5, 2.0, rng));
    Parameter& tile = param("tile", uniform_tensor({4}, 0.5, 2.0, rng));
    Parameter& mid = param("mid", uniform_tensor({3, 1}, 0.5, 2.0, rng));
    primitive("add_broadcast", {&x, &tile},
              [&](Tape& t) { return t.parameter(x) + t.parameter(tile); });
    primitive("sub_broadcast", {&x, &row},
              [&](Tape& t) { return t.parameter(x) - t.parameter(row); });
    primitive("mul_broadcast", {&x, &mid},
              [&](Tape& t) { return t.parameter(x) * t.parameter(mid); });
    primitive("div_broadcast", {&x, &row},
              [&](Tape& t) { return t.parameter(x) / t.parameter(row); });
  }
  {
    Parameter& x = param("x", normal_tensor({3, 5}, 1.0, rng));
    Parameter& pos = param("pos", uniform_tensor({3, 5}, 0.2, 3.0, rng));
    primitive("sin", {&x}, [&](Tape& t) { return sin(t.parameter(x)); });
    primitive("cos", {&x}, [&](Tape& t) { return cos(t.parameter(x)); });
    primitive("sqrt", {&pos}, [&](Tape& t) { return sqrt(t.parameter(pos)); });
    primitive("log", {&pos}, [&](Tape& t) { return log(t.parameter(pos)); });
    primitive("exp", {&x}, [&](Tape& t) { return exp(t.parameter(x)); });
    primitive("gelu", {&x}, [&](Tape& t) { return gelu(t.parameter(x)); });
    primitive("scale", {&x}, [&](Tape& t) { return scale(t.parameter(x), -1.7); });
    primitive("add_scalar", {&x}, [&](Tape& t) { return add_scalar(t.parameter(x), 0.3); });
    // Thresholds sit between sampled values, never within h of one.
    Parameter& spread = param("spread", DenseTensor({6}, {-2.0, -1.1, -0.4, 0.35, 0.9, 1.6}));
    primitive("clamp_max", {&spread}, [&](Tape& t) { return clamp_max(t.parameter(spread), 0.1); });
    primitive("clamp_min", {&spread}, [&](Tape& t) { return clamp_min(t.parameter(spread), 0.1); });
    primitive("reduce_norm_lastdim", {&x}, [&](Tape& t) { return reduce_norm_lastdim(t.parameter(x)); });
    primitive("sum_lastdim", {&x}, [&](Tape& t) { return sum_lastdim(t.parameter(x)); });
    primitive("mean", {&x}, [&](Tape& t) { return mean(t.parameter(x)); });
    primitive("softmax_lastdim", {&x}, [&](Tape& t) { return softmax_lastdim(t.parameter(x)); });
    primitive("permute", {&x}, [&](Tape& t) { return transpose_last2(t.parameter(x)); });
    primitive("reshape", {&x}, [&](Tape& t) { return reshape(t.parameter(x), {5, 3}); });
  }
  {
    Parameter& s = param("scores", normal_tensor({2, 4, 4}, 1.0, rng));
    primitive("causal_softmax", {&s}, [&](Tape& t) { return causal_softmax(t.parameter(s)); });
    Parameter& logits = param("logits", normal_tensor({2, 3, 7}, 1.0, rng));
    static const std::vector<int> targets = {0, 6, 3, 2, 2, 5};
    primitive("cross_entropy", {&logits},
              [&](Tape& t) { return cross_entropy(t.parameter(logits), targets); });
    Parameter& table = param("table", normal_tensor({5, 3}, 1.0, rng));
    static const std::vector<int> ids = {4, 0, 4, 2};
    primitive("embedding", {&table},
              [&](Tape& t) { return embedding(t.parameter(table), ids, {2, 2}); });
  }

  // Normalization layers.
  {
    Parameter& v = param("v", normal_tensor({2, 3, 6}, 1.0, rng));
    layer("rmsnorm", {&v}, [&](Tape& t) { return rmsnorm(t.parameter(v)); });
    RmsNormLayer with_gain(6, true, "rmsnorm_gain");
    with_gain.gain()->value = uniform_tensor({6}, 0.5, 1.5, rng);
    layer("rmsnorm_with_gain", {&v, with_gain.gain()},
          [&](Tape& t) { return with_gain.forward(t.parameter(v)); });
  }
  {
    // Angles well inside (0, clamp): |tangent| / |x| is about 0.3.
    const std::size_t d = 6;
    Parameter& x = param("x", normal_tensor({2, 3, d}, 1.0, rng));
    Parameter& g = param("g", normal_tensor({2, 3, d}, 0.12, rng));
    Parameter& scale_p = param("scale", DenseTensor({1}, {1.1}));
    Parameter& bias_p = param("bias", DenseTensor({1}, {0.05}));
    for (DecayKind decay : {DecayKind::kHarmonic, DecayKind::kSqrt, DecayKind::kLinear}) {
      layer("geonorm_" + std::string(to_string(decay)), {&x, &g, &scale_p, &bias_p},
            [&, decay](Tape& t) {
              return geonorm(t.parameter(x), t.parameter(g), t.parameter(scale_p),
                             t.parameter(bias_p), LayerContext{1, 4}, std::numbers::pi / 4.0,
                             decay);
            });
    }
    // First-stage clamp active on every row: the angle no longer depends on g's size.
    Parameter& big = param("g_big", normal_tensor({2, 3, d}, 4.0, rng));
    layer("geonorm_clamped", {&x, &big, &scale_p, &bias_p}, [&](Tape& t) {
      return geonorm(t.parameter(x), t.parameter(big), t.parameter(scale_p), t.parameter(bias_p),
                     LayerContext{2, 4}, std::numbers::pi / 4.0, DecayKind::kHarmonic);
    });
  }

  // Transformer sub-modules and blocks.
  {
    ModelConfig mc;
    mc.vocab = 11;
    mc.dim = 8;
    mc.heads = 2;
    mc.layers = 2;
    mc.seq_len = 4;
    Parameter& x = param("x", normal_tensor({2, 4, 8}, 1.0, rng));

    std::deque<ModelWeights> weights;
    auto make = [&](NormStrategy s) -> ModelWeights& {
      mc.strategy = s;
      ModelWeights& w = weights.emplace_back(init_weights(mc, rng()));
      // Larger weights than the training init so every path carries signal.
      for (auto& b : w.blocks) {
        for (Linear* l : {&b.attention.query, &b.attention.key, &b.attention.value,
                          &b.attention.output, &b.ffn.up, &b.ffn.down}) {
          l->weight.value = normal_tensor(l->weight.value.shape(), 0.25, rng);
          l->bias.value = normal_tensor(l->bias.value.shape(), 0.05, rng);
        }
      }
      return w;
    };
    auto block_params = [](BlockWeights& b, Parameter* input) {
      std::vector<Parameter*> ps = {input};
      for (Linear* l : {&b.attention.query, &b.attention.key, &b.attention.value,
                        &b.attention.output, &b.ffn.up, &b.ffn.down}) {
        ps.push_back(&l->weight);
        ps.push_back(&l->bias);
      }
      if (b.attention_geo) {
        for (Parameter* p : b.attention_geo->parameters()) ps.push_back(p);
        for (Parameter* p : b.ffn_geo->parameters()) ps.push_back(p);
      }
      return ps;
    };

    ModelWeights& base = make(PreNorm{});
    BlockWeights& b0 = base.blocks[0];
    layer("attention",
          {&x, &b0.attention.query.weight, &b0.attention.key.weight, &b0.attention.value.weight,
           &b0.attention.output.weight, &b0.attention.query.bias, &b0.attention.output.bias},
          [&](Tape& t) { return causal_self_attention(t.parameter(x), b0.attention); });
    layer("ffn", {&x, &b0.ffn.up.weight, &b0.ffn.up.bias, &b0.ffn.down.weight, &b0.ffn.down.bias},
          [&](Tape& t) { return ffn(t.parameter(x), b0.ffn); });

    for (const std::string& name : all_strategy_names()) {
      const NormStrategy strategy = parse_strategy(name);
      ModelWeights& w = make(strategy);
      BlockWeights& b = w.blocks[1];
      Parameter* input = &x;
      if (std::holds_alternative<GeoNorm>(strategy)) {
        // GeoNorm blocks run on the radius-sqrt(D) sphere.
        Tape t;
        input = &param("x_sphere", rmsnorm(t.constant(x.value)).value());
      }
      layer("block_" + name, block_params(b, input), [&, strategy, input](Tape& t) {
        return block_forward(t.parameter(*input), LayerContext{1, 2}, strategy, b);
      });
    }
  }
  return results;
}

GeometryReport run_geometry_suite(std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim_dist(2, 64);
  std::uniform_real_distribution<double> log_radius(-3.0, 3.0);
  std::uniform_real_distribution<double> angle_dist(1e-3, std::numbers::pi - 1e-3);
  std::normal_distribution<double> normal(0.0, 1.0);
  GeometryReport rep;
  rep.trials = trials;

  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t d = dim_dist(rng);
    DenseTensor x({1, d});
    for (double& e : x.values()) e = normal(rng);
    const double target = std::pow(10.0, log_radius(rng));
    const double n0 = std::sqrt(dot(x.row(0), x.row(0)));
    for (double& e : x.values()) e *= target / n0;
    DenseTensor s({1, d});
    for (double& e : s.values()) e = normal(rng);

    const SpherePoint base(x);
    const double radius = base.radius()[0];
    const double s_norm = std::sqrt(dot(s.row(0), s.row(0)));

    const TangentVector v = tangent_project(base, s);
    rep.max_orthogonality = std::max(
        rep.max_orthogonality,
        std::abs(dot(x.row(0), v.v().row(0))) / (radius * s_norm + 1e-300));

    const TangentVector vv = tangent_project(base, v.v());
    rep.max_idempotence_error = std::max(rep.max_idempotence_error, max_abs_diff(vv.v(), v.v()));

    // Unit tangent direction walked for a random arc length t = angle * radius.
    const double v_norm = std::sqrt(dot(v.v().row(0), v.v().row(0)));
    const double angle = angle_dist(rng);
    DenseTensor step = v.v();
    for (double& e : step.values()) e *= angle * radius / v_norm;
    const DenseTensor y = exp_map(base, TangentVector(base, step));
    const double y_norm = std::sqrt(dot(y.row(0), y.row(0)));
    rep.max_norm_deviation = std::max(rep.max_norm_deviation, std::abs(y_norm - radius) / radius);
    rep.max_geodesic_angle_error =
        std::max(rep.max_geodesic_angle_error, std::abs(row_angles(x, y)[0] - angle));
  }
  rep.passed = rep.max_norm_deviation < kGeometryNormTolerance &&
               rep.max_orthogonality < kGeometryOrthogonalityTolerance &&
               rep.max_idempotence_error < kGeometryIdempotenceTolerance &&
               rep.max_geodesic_angle_error < kGeometryAngleTolerance;
  return rep;
}

GeoNormContractReport run_geonorm_contract(std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim_dist(2, 64);
  std::uniform_int_distribution<int> layers_dist(1, 24);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  GeoNormContractReport rep;
  rep.trials = trials;
  rep.max_angle_excess = -std::numeric_limits<double>::infinity();

  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t d = dim_dist(rng);
    const int total = layers_dist(rng);
    const LayerContext ctx{std::uniform_int_distribution<int>(0, total - 1)(rng), total};
    GeoNormParams params;
    params.clamp = std::numbers::pi / 2.0 * (0.05 + 0.95 * unit(rng));
    params.scale = 0.25 + 3.0 * unit(rng);
    params.bias = 0.5 * unit(rng);
    params.decay = static_cast<DecayKind>(rng() % 3);

    DenseTensor x({1, d});
    DenseTensor g({1, d});
    const double x_scale = std::pow(10.0, 4.0 * unit(rng) - 2.0);
    const double g_scale = std::pow(10.0, 6.0 * unit(rng) - 3.0);
    for (double& e : x.values()) e = normal(rng) * x_scale;
    for (double& e : g.values()) e = normal(rng) * g_scale;

    const DenseTensor out = geonorm(x, g, ctx, params);
    const double angle = row_angles(x, out)[0];
    rep.max_angle_excess = std::max(rep.max_angle_excess, angle - params.clamp);

    const double radius = std::sqrt(dot(x.row(0), x.row(0)));
    const double gx = dot(x.row(0), g.row(0)) / (radius * radius);
    double tangent = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double e = g[j] - gx * x[j];
      tangent += e * e;
    }
    if (std::sqrt(tangent) > kTangentNormFloor && radius > kRadiusFloor) {
      const double out_norm = std::sqrt(dot(out.row(0), out.row(0)));
      rep.max_norm_deviation = std::max(rep.max_norm_deviation, std::abs(out_norm - radius) / radius);
      ++rep.rows_checked_for_norm;
    }
  }
  rep.passed = rep.max_angle_excess <= 1e-6 && rep.max_norm_deviation < 1e-6;
  return rep;
}

}  // namespace geonorm

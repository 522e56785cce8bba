#include "geonorm/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

#include "geonorm/errors.hpp"

namespace geonorm {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const DenseTensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
  return ConstMap(t.values().data() + offset, static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}

MutMap as_matrix(DenseTensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MutMap(t.values().data() + offset, static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

// dst = a * b (or dst += a * b). Narrow precision multiplies in float, which
// is where narrow runs get their speed; values are rounded to float anyway.
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Dst, typename A, typename B>
void product(Dst&& dst, const A& a, const B& b, bool accumulate, Precision prec) {
  if (prec == Precision::kWide) {
    if (accumulate) {
      dst.noalias() += a * b;
    } else {
      dst.noalias() = a * b;
    }
    return;
  }
  const RowMatrixF af = a.template cast<float>();
  const RowMatrixF bf = b.template cast<float>();
  RowMatrixF r(af.rows(), bf.cols());
  r.noalias() = af * bf;
  if (accumulate) {
    dst += r.template cast<double>();
  } else {
    dst = r.template cast<double>();
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                           to_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Maps a flat index of the broadcast result to a flat index of one operand.
class OperandMap {
 public:
  OperandMap(const Shape& operand, const Shape& out) {
    const std::size_t n = shape_size(operand);
    const std::size_t total = shape_size(out);
    const std::size_t r = out.size();
    Shape padded(r, 1);
    std::copy(operand.begin(), operand.end(), padded.begin() + static_cast<long>(r - operand.size()));
    if (n == total) {
      kind_ = Kind::kSame;
      return;
    }
    if (n == 1) {
      kind_ = Kind::kScalar;
      return;
    }
    // Leading ones followed by an exact suffix of out: tile.
    std::size_t lead = 0;
    while (lead < r && padded[lead] == 1) ++lead;
    if (std::equal(padded.begin() + static_cast<long>(lead), padded.end(),
                   out.begin() + static_cast<long>(lead))) {
      kind_ = Kind::kTile;
      param_ = n;
      return;
    }
    // Exact prefix of out followed by trailing ones: each value repeats inner times.
    std::size_t tail = r;
    while (tail > 0 && padded[tail - 1] == 1) --tail;
    if (std::equal(padded.begin(), padded.begin() + static_cast<long>(tail), out.begin())) {
      kind_ = Kind::kPrefix;
      param_ = total / n;
      return;
    }
    kind_ = Kind::kGeneral;
    table_.resize(total);
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
      stride[i] = padded[i] == 1 ? 0 : s;
      s *= padded[i];
    }
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
      table_[flat] = src;
      for (std::size_t i = r; i-- > 0;) {
        ++idx[i];
        src += stride[i];
        if (idx[i] < out[i]) break;
        src -= stride[i] * idx[i];
        idx[i] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::kSame:
        return i;
      case Kind::kScalar:
        return 0;
      case Kind::kTile:
        return i % param_;
      case Kind::kPrefix:
        return i / param_;
      case Kind::kGeneral:
        return table_[i];
    }
    return i;
  }

  // Calls body(i, j) for every output index i and matching operand index j,
  // with loops shaped by the broadcast pattern so no division is needed.
  template <typename F>
  void for_each(std::size_t n, F&& body) const {
    switch (kind_) {
      case Kind::kSame:
        for (std::size_t i = 0; i < n; ++i) body(i, i);
        return;
      case Kind::kScalar:
        for (std::size_t i = 0; i < n; ++i) body(i, std::size_t{0});
        return;
      case Kind::kTile:
        for (std::size_t base = 0; base < n; base += param_) {
          for (std::size_t j = 0; j < param_; ++j) body(base + j, j);
        }
        return;
      case Kind::kPrefix:
        for (std::size_t j = 0, i = 0; i < n; ++j) {
          for (std::size_t e = 0; e < param_; ++e, ++i) body(i, j);
        }
        return;
      case Kind::kGeneral:
        for (std::size_t i = 0; i < n; ++i) body(i, table_[i]);
        return;
    }
  }

  bool same() const { return kind_ == Kind::kSame; }

 private:
  enum class Kind { kSame, kScalar, kTile, kPrefix, kGeneral };
  Kind kind_ = Kind::kSame;
  std::size_t param_ = 1;
  std::vector<std::size_t> table_;
};

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

// Visits (i, ia, ib) triples. At least one side is usually unbroadcast, so the
// other side's pattern drives the loop.
template <typename F>
void for_each_pair(const OperandMap& ma, const OperandMap& mb, std::size_t n, F&& body) {
  if (ma.same()) {
    mb.for_each(n, [&](std::size_t i, std::size_t j) { body(i, i, j); });
  } else if (mb.same()) {
    ma.for_each(n, [&](std::size_t i, std::size_t j) { body(i, j, i); });
  } else {
    for (std::size_t i = 0; i < n; ++i) body(i, ma(i), mb(i));
  }
}

template <BinaryKind K>
Var binary_impl(Var a, Var b, Shape out_shape) {
  const DenseTensor& av = a.value();
  const DenseTensor& bv = b.value();
  OperandMap ma(av.shape(), out_shape);
  OperandMap mb(bv.shape(), out_shape);
  auto out = DenseTensor::uninitialized(std::move(out_shape));
  const double* x = av.values().data();
  const double* y = bv.values().data();
  double* o = out.values().data();
  for_each_pair(ma, mb, out.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
    if constexpr (K == BinaryKind::kAdd) o[i] = x[ia] + y[ib];
    if constexpr (K == BinaryKind::kSub) o[i] = x[ia] - y[ib];
    if constexpr (K == BinaryKind::kMul) o[i] = x[ia] * y[ib];
    if constexpr (K == BinaryKind::kDiv) o[i] = x[ia] / y[ib];
  });
  return a.tape().record(std::move(out), {a, b}, [ma = std::move(ma), mb = std::move(mb)](BackwardContext& ctx) {
    const double* g = ctx.out_grad().values().data();
    const double* x = ctx.input(0).values().data();
    const double* y = ctx.input(1).values().data();
    const std::size_t n = ctx.out_grad().size();
    bool fresh = false;
    DenseTensor* ga_t = ma.same() ? ctx.input_grad_for_overwrite(0, fresh) : ctx.input_grad(0);
    if (ga_t != nullptr && fresh) {
      double* ga = ga_t->values().data();
      for_each_pair(ma, mb, n, [&](std::size_t i, std::size_t, std::size_t ib) {
        if constexpr (K == BinaryKind::kAdd || K == BinaryKind::kSub) ga[i] = g[i];
        if constexpr (K == BinaryKind::kMul) ga[i] = g[i] * y[ib];
        if constexpr (K == BinaryKind::kDiv) ga[i] = g[i] / y[ib];
      });
    } else if (ga_t != nullptr) {
      double* ga = ga_t->values().data();
      for_each_pair(ma, mb, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if constexpr (K == BinaryKind::kAdd || K == BinaryKind::kSub) ga[ia] += g[i];
        if constexpr (K == BinaryKind::kMul) ga[ia] += g[i] * y[ib];
        if constexpr (K == BinaryKind::kDiv) ga[ia] += g[i] / y[ib];
      });
    }
    if (DenseTensor* gb_t = ctx.input_grad(1)) {
      double* gb = gb_t->values().data();
      for_each_pair(ma, mb, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if constexpr (K == BinaryKind::kAdd) gb[ib] += g[i];
        if constexpr (K == BinaryKind::kSub) gb[ib] -= g[i];
        if constexpr (K == BinaryKind::kMul) gb[ib] += g[i] * x[ia];
        if constexpr (K == BinaryKind::kDiv) gb[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
      });
    }
  });
}

Var binary(Var a, Var b, BinaryKind kind, const char* name) {
  Shape out_shape = broadcast_shape(a.value().shape(), b.value().shape(), name);
  switch (kind) {
    case BinaryKind::kAdd: return binary_impl<BinaryKind::kAdd>(a, b, std::move(out_shape));
    case BinaryKind::kSub: return binary_impl<BinaryKind::kSub>(a, b, std::move(out_shape));
    case BinaryKind::kMul: return binary_impl<BinaryKind::kMul>(a, b, std::move(out_shape));
    case BinaryKind::kDiv: return binary_impl<BinaryKind::kDiv>(a, b, std::move(out_shape));
  }
  throw ContractError("binary: unknown kind");
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_pdf(double x) {
  return std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
}

}  // namespace

Var matmul(Var a, Var b) {
  const DenseTensor& av = a.value();
  const DenseTensor& bv = b.value();
  auto mismatch = [&]() {
    return DimensionError("matmul: incompatible shapes " + to_string(av.shape()) + " and " +
                          to_string(bv.shape()));
  };
  if (av.rank() < 1 || bv.rank() < 2) throw mismatch();
  const std::size_t k = av.shape().back();
  const std::size_t m = bv.shape().back();
  if (bv.dim(-2) != k) throw mismatch();
  const Precision prec = a.tape().precision();

  if (bv.rank() == 2) {
    const std::size_t rows = av.rows();
    Shape out_shape = av.shape();
    out_shape.back() = m;
    auto out = DenseTensor::uninitialized(out_shape);
    product(as_matrix(out, 0, rows, m), as_matrix(av, 0, rows, k), as_matrix(bv, 0, k, m), false,
            prec);
    return a.tape().record(std::move(out), {a, b}, [rows, k, m, prec](BackwardContext& ctx) {
      const DenseTensor& g = ctx.out_grad();
      if (DenseTensor* ga = ctx.input_grad(0)) {
        product(as_matrix(*ga, 0, rows, k), as_matrix(g, 0, rows, m),
                as_matrix(ctx.input(1), 0, k, m).transpose(), true, prec);
      }
      if (DenseTensor* gb = ctx.input_grad(1)) {
        product(as_matrix(*gb, 0, k, m), as_matrix(ctx.input(0), 0, rows, k).transpose(),
                as_matrix(g, 0, rows, m), true, prec);
      }
    });
  }

  if (av.rank() != bv.rank() || av.rank() < 3 ||
      !std::equal(av.shape().begin(), av.shape().end() - 2, bv.shape().begin())) {
    throw mismatch();
  }
  const std::size_t n = av.dim(-2);
  const std::size_t batches = av.size() / (n * k);
  Shape out_shape = av.shape();
  out_shape.back() = m;
  auto out = DenseTensor::uninitialized(out_shape);
  for (std::size_t i = 0; i < batches; ++i) {
    product(as_matrix(out, i * n * m, n, m), as_matrix(av, i * n * k, n, k),
            as_matrix(bv, i * k * m, k, m), false, prec);
  }
  return a.tape().record(std::move(out), {a, b}, [batches, n, k, m, prec](BackwardContext& ctx) {
    const DenseTensor& g = ctx.out_grad();
    DenseTensor* ga = ctx.input_grad(0);
    DenseTensor* gb = ctx.input_grad(1);
    for (std::size_t i = 0; i < batches; ++i) {
      if (ga != nullptr) {
        product(as_matrix(*ga, i * n * k, n, k), as_matrix(g, i * n * m, n, m),
                as_matrix(ctx.input(1), i * k * m, k, m).transpose(), true, prec);
      }
      if (gb != nullptr) {
        product(as_matrix(*gb, i * k * m, k, m), as_matrix(ctx.input(0), i * n * k, n, k).transpose(),
                as_matrix(g, i * n * m, n, m), true, prec);
      }
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  const DenseTensor& xv = x.value();
  const DenseTensor& wv = weight.value();
  const DenseTensor& bv = bias.value();
  if (xv.rank() < 1 || wv.rank() != 2 || bv.rank() != 1 || xv.shape().back() != wv.dim(0) ||
      bv.dim(0) != wv.dim(1)) {
    throw DimensionError("linear: incompatible shapes " + to_string(xv.shape()) + ", " +
                         to_string(wv.shape()) + ", " + to_string(bv.shape()));
  }
  const std::size_t rows = xv.rows();
  const std::size_t k = wv.dim(0);
  const std::size_t m = wv.dim(1);
  const Precision prec = x.tape().precision();
  Shape out_shape = xv.shape();
  out_shape.back() = m;
  auto out = DenseTensor::uninitialized(out_shape);
  {
    auto o = as_matrix(out, 0, rows, m);
    product(o, as_matrix(xv, 0, rows, k), as_matrix(wv, 0, k, m), false, prec);
    o.rowwise() += as_matrix(bv, 0, 1, m).row(0);
  }
  return x.tape().record(std::move(out), {x, weight, bias}, [rows, k, m, prec](BackwardContext& ctx) {
    const auto g = as_matrix(ctx.out_grad(), 0, rows, m);
    bool fresh = false;
    if (DenseTensor* gx = ctx.input_grad_for_overwrite(0, fresh)) {
      product(as_matrix(*gx, 0, rows, k), g, as_matrix(ctx.input(1), 0, k, m).transpose(), !fresh,
              prec);
    }
    if (DenseTensor* gw = ctx.input_grad(1)) {
      product(as_matrix(*gw, 0, k, m), as_matrix(ctx.input(0), 0, rows, k).transpose(), g, true, prec);
    }
    if (DenseTensor* gb = ctx.input_grad(2)) {
      as_matrix(*gb, 0, 1, m).row(0) += g.colwise().sum();
    }
  });
}

Var add(Var a, Var b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinaryKind::kMul, "mul"); }
Var div(Var a, Var b) { return binary(a, b, BinaryKind::kDiv, "div"); }

namespace {

// Narrow GELU in float arrays so erf and exp vectorize.
Var gelu_narrow(Var x) {
  const DenseTensor& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.size());
  const Eigen::ArrayXf v = Eigen::Map<const Eigen::ArrayXd>(xv.values().data(), n).cast<float>();
  const Eigen::ArrayXf cdf = 0.5f * (1.0f + (v * static_cast<float>(std::numbers::sqrt2 / 2.0)).erf());
  auto out = DenseTensor::uninitialized(xv.shape());
  Eigen::Map<Eigen::ArrayXd>(out.values().data(), n) = (v * cdf).cast<double>();
  std::vector<double> slope;
  if (x.tape().requires_grad(x)) {
    slope.resize(xv.size());
    const float inv_sqrt_2pi = static_cast<float>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    Eigen::Map<Eigen::ArrayXd>(slope.data(), n) =
        (cdf + v * (-0.5f * v.square()).exp() * inv_sqrt_2pi).cast<double>();
  }
  return x.tape().record(std::move(out), {x}, [slope = std::move(slope)](BackwardContext& ctx) {
    bool fresh = false;
    DenseTensor* gx = ctx.input_grad_for_overwrite(0, fresh);
    if (gx == nullptr) return;
    const DenseTensor& g = ctx.out_grad();
    if (fresh) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] = g[i] * slope[i];
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * slope[i];
    }
  });
}

}  // namespace

Var elementwise(Var x, UnaryFn fn) {
  if (!std::isfinite(fn.c)) throw ContractError("elementwise: non-finite parameter");
  if (fn.kind == UnaryKind::kGelu && x.tape().precision() == Precision::kNarrow) {
    return gelu_narrow(x);
  }
  const DenseTensor& xv = x.value();
  auto out = DenseTensor::uninitialized(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    double r = 0.0;
    switch (fn.kind) {
      case UnaryKind::kSin: r = std::sin(v); break;
      case UnaryKind::kCos: r = std::cos(v); break;
      case UnaryKind::kSqrt:
        if (v < 0.0) throw std::domain_error("sqrt of negative value " + std::to_string(v));
        r = std::sqrt(v);
        break;
      case UnaryKind::kClampMax: r = std::min(v, fn.c); break;
      case UnaryKind::kClampMin: r = std::max(v, fn.c); break;
      case UnaryKind::kScale: r = v * fn.c; break;
      case UnaryKind::kAddScalar: r = v + fn.c; break;
      case UnaryKind::kExp: r = std::exp(v); break;
      case UnaryKind::kLog:
        if (v < 0.0) throw std::domain_error("log of negative value " + std::to_string(v));
        r = std::log(v);
        break;
      case UnaryKind::kGelu: r = gelu_value(v); break;
    }
    out[i] = r;
  }
  // GELU's slope reuses the forward's erf through cdf = out / x; only x = 0
  // needs the direct value 1/2.
  std::vector<double> slope;
  if (fn.kind == UnaryKind::kGelu && x.tape().requires_grad(x)) {
    slope.resize(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double cdf = v != 0.0 ? out[i] / v : 0.5;
      slope[i] = cdf + v * gelu_pdf(v);
    }
  }
  return x.tape().record(std::move(out), {x}, [fn, slope = std::move(slope)](BackwardContext& ctx) {
    bool fresh = false;
    DenseTensor* gx = ctx.input_grad_for_overwrite(0, fresh);
    if (gx == nullptr) return;
    const DenseTensor& g = ctx.out_grad();
    const DenseTensor& in = ctx.input(0);
    const DenseTensor& y = ctx.output();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in[i];
      double d = 0.0;
      switch (fn.kind) {
        case UnaryKind::kSin: d = std::cos(v); break;
        case UnaryKind::kCos: d = -std::sin(v); break;
        case UnaryKind::kSqrt: d = 0.5 / y[i]; break;
        case UnaryKind::kClampMax: d = v <= fn.c ? 1.0 : 0.0; break;
        case UnaryKind::kClampMin: d = v >= fn.c ? 1.0 : 0.0; break;
        case UnaryKind::kScale: d = fn.c; break;
        case UnaryKind::kAddScalar: d = 1.0; break;
        case UnaryKind::kExp: d = y[i]; break;
        case UnaryKind::kLog: d = 1.0 / v; break;
        case UnaryKind::kGelu: d = slope[i]; break;
      }
      (*gx)[i] = fresh ? g[i] * d : (*gx)[i] + g[i] * d;
    }
  });
}

Var reduce_norm_lastdim(Var x) {
  const DenseTensor& xv = x.value();
  if (xv.rank() == 0 || xv.last_dim() == 0) {
    throw DimensionError("reduce_norm_lastdim: empty last dimension in " + to_string(xv.shape()));
  }
  Shape out_shape = xv.shape();
  out_shape.back() = 1;
  auto out = DenseTensor::uninitialized(out_shape);
  const std::size_t d = xv.last_dim();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (double v : xv.row(r)) s += v * v;
    out[r] = std::sqrt(s);
  }
  return x.tape().record(std::move(out), {x}, [d](BackwardContext& ctx) {
    DenseTensor* gx = ctx.input_grad(0);
    if (gx == nullptr) return;
    const DenseTensor& in = ctx.input(0);
    const DenseTensor& norm = ctx.output();
    const DenseTensor& g = ctx.out_grad();
    for (std::size_t r = 0; r < norm.size(); ++r) {
      if (norm[r] == 0.0) continue;
      const double f = g[r] / norm[r];
      for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += f * in[r * d + j];
    }
  });
}

Var sum_lastdim(Var x) {
  const DenseTensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("sum_lastdim: rank-0 input");
  Shape out_shape = xv.shape();
  out_shape.back() = 1;
  auto out = DenseTensor::uninitialized(out_shape);
  const std::size_t d = xv.last_dim();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (double v : xv.row(r)) s += v;
    out[r] = s;
  }
  return x.tape().record(std::move(out), {x}, [d](BackwardContext& ctx) {
    DenseTensor* gx = ctx.input_grad(0);
    if (gx == nullptr) return;
    const DenseTensor& g = ctx.out_grad();
    for (std::size_t r = 0; r < g.size(); ++r) {
      for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += g[r];
    }
  });
}

Var mean(Var x) {
  const DenseTensor& xv = x.value();
  if (xv.empty()) throw DimensionError("mean of an empty tensor");
  double s = 0.0;
  for (double v : xv.values()) s += v;
  const double n = static_cast<double>(xv.size());
  return x.tape().record(DenseTensor::scalar(s / n), {x}, [n](BackwardContext& ctx) {
    DenseTensor* gx = ctx.input_grad(0);
    if (gx == nullptr) return;
    const double g = ctx.out_grad()[0] / n;
    for (double& v : gx->values()) v += g;
  });
}

namespace {

void softmax_rows(const DenseTensor& in, DenseTensor& out, bool causal) {
  const std::size_t d = in.last_dim();
  const std::size_t rows = in.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    // For causal scores of shape (..., S, S), row r is query position r % S.
    const std::size_t visible = causal ? (r % in.dim(-2)) + 1 : d;
    auto x = in.row(r);
    auto y = out.row(r);
    const auto n = static_cast<Eigen::Index>(visible);
    Eigen::Map<const Eigen::ArrayXd> xs(x.data(), n);
    Eigen::Map<Eigen::ArrayXd> ys(y.data(), n);
    ys = (xs - xs.maxCoeff()).exp();
    ys /= ys.sum();
    for (std::size_t j = visible; j < d; ++j) y[j] = 0.0;
  }
}

Var softmax_impl(Var x, bool causal) {
  const DenseTensor& xv = x.value();
  if (xv.rank() == 0 || xv.last_dim() == 0) {
    throw DimensionError("softmax: empty last dimension in " + to_string(xv.shape()));
  }
  if (causal && (xv.rank() < 2 || xv.dim(-1) != xv.dim(-2))) {
    throw DimensionError("causal_softmax: expected (..., S, S) scores, got " +
                         to_string(xv.shape()));
  }
  auto out = DenseTensor::uninitialized(xv.shape());
  softmax_rows(xv, out, causal);
  return x.tape().record(std::move(out), {x}, [](BackwardContext& ctx) {
    DenseTensor* gx = ctx.input_grad(0);
    if (gx == nullptr) return;
    const DenseTensor& y = ctx.output();
    const DenseTensor& g = ctx.out_grad();
    const std::size_t d = y.last_dim();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const std::size_t base = r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < d; ++j) (*gx)[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

}  // namespace

Var softmax_lastdim(Var x) { return softmax_impl(x, false); }

Var causal_softmax(Var scores) { return softmax_impl(scores, true); }

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  const DenseTensor& qv = q.value();
  if (qv.rank() != 3 || k.shape() != qv.shape() || v.shape() != qv.shape()) {
    throw DimensionError("causal_attention: q, k, v must share a (batch, seq, dim) shape, got " +
                         to_string(qv.shape()) + ", " + to_string(k.shape()) + ", " +
                         to_string(v.shape()));
  }
  const std::size_t batch = qv.dim(0);
  const std::size_t seq = qv.dim(1);
  const std::size_t dim = qv.dim(2);
  if (heads == 0 || dim % heads != 0) {
    throw DimensionError("causal_attention: " + std::to_string(heads) + " heads do not divide dim " +
                         std::to_string(dim));
  }
  const std::size_t hd = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Precision prec = q.tape().precision();

  // Head h of batch b is the (seq, hd) block at columns [h*hd, (h+1)*hd) of
  // the (seq, dim) slice, viewed in place through an outer stride.
  using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
  using MutStrided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
  const auto S = static_cast<Eigen::Index>(seq);
  const auto H = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(dim));
  auto head = [=](const DenseTensor& t, std::size_t b, std::size_t h) {
    return Strided(t.values().data() + b * seq * dim + h * hd, S, H, stride);
  };
  auto mut_head = [=](DenseTensor& t, std::size_t b, std::size_t h) {
    return MutStrided(t.values().data() + b * seq * dim + h * hd, S, H, stride);
  };

  // Attention probabilities per (batch, head), kept for backward.
  auto probs = std::make_shared<AlignedValues>(batch * heads * seq * seq);
  auto out = DenseTensor::uninitialized(qv.shape());
  RowMatrix scores(S, S);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      product(scores, head(qv, b, h), head(k.value(), b, h).transpose(), false, prec);
      MutMap p(probs->data() + (b * heads + h) * seq * seq, S, S);
      for (Eigen::Index r = 0; r < S; ++r) {
        const auto row = scores.row(r).head(r + 1).array() * inv_sqrt;
        auto pr = p.row(r).head(r + 1).array();
        pr = (row - row.maxCoeff()).exp();
        pr /= pr.sum();
        p.row(r).tail(S - r - 1).setZero();
      }
      product(mut_head(out, b, h), p, head(v.value(), b, h), false, prec);
    }
  }
  return q.tape().record(
      std::move(out), {q, k, v},
      [probs, batch, heads, seq, inv_sqrt, head, mut_head, S, prec](BackwardContext& ctx) {
        const DenseTensor& g = ctx.out_grad();
        DenseTensor* gq = ctx.input_grad(0);
        DenseTensor* gk = ctx.input_grad(1);
        DenseTensor* gv = ctx.input_grad(2);
        RowMatrix dp(S, S);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            ConstMap p(probs->data() + (b * heads + h) * seq * seq, S, S);
            const auto go = head(g, b, h);
            if (gv != nullptr) product(mut_head(*gv, b, h), p.transpose(), go, true, prec);
            if (gq == nullptr && gk == nullptr) continue;
            product(dp, go, head(ctx.input(2), b, h).transpose(), false, prec);
            // Softmax backward, then the 1/sqrt(hd) score scaling.
            for (Eigen::Index r = 0; r < S; ++r) {
              double dot = 0.0;
              for (Eigen::Index j = 0; j <= r; ++j) dot += dp(r, j) * p(r, j);
              for (Eigen::Index j = 0; j <= r; ++j) dp(r, j) = p(r, j) * (dp(r, j) - dot) * inv_sqrt;
              for (Eigen::Index j = r + 1; j < S; ++j) dp(r, j) = 0.0;
            }
            if (gq != nullptr) {
              product(mut_head(*gq, b, h), dp, head(ctx.input(1), b, h), true, prec);
            }
            if (gk != nullptr) {
              product(mut_head(*gk, b, h), dp.transpose(), head(ctx.input(0), b, h), true, prec);
            }
          }
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const DenseTensor& lv = logits.value();
  if (lv.rank() == 0) throw DimensionError("cross_entropy: rank-0 logits");
  const std::size_t vocab = lv.last_dim();
  const std::size_t rows = lv.rows();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits of shape " + to_string(lv.shape()));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  for (int t : tgt) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  // Keep the row-wise log-sum-exp for the backward pass.
  std::vector<double> lse(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto x = lv.row(r);
    Eigen::Map<const Eigen::ArrayXd> xs(x.data(), static_cast<Eigen::Index>(vocab));
    const double mx = xs.maxCoeff();
    lse[r] = mx + std::log((xs - mx).exp().sum());
    total += lse[r] - x[static_cast<std::size_t>(tgt[r])];
  }
  const double n = static_cast<double>(rows);
  return logits.tape().record(
      DenseTensor::scalar(total / n), {logits},
      [tgt = std::move(tgt), lse = std::move(lse), vocab, n](BackwardContext& ctx) {
        DenseTensor* gx = ctx.input_grad(0);
        if (gx == nullptr) return;
        const DenseTensor& x = ctx.input(0);
        const double g = ctx.out_grad()[0] / n;
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          const std::size_t base = r * vocab;
          const auto v = static_cast<Eigen::Index>(vocab);
          Eigen::Map<Eigen::ArrayXd>(gx->values().data() + base, v) +=
              g * (Eigen::Map<const Eigen::ArrayXd>(x.values().data() + base, v) - lse[r]).exp();
          (*gx)[base + static_cast<std::size_t>(tgt[r])] -= g;
        }
      });
}

Var reshape(Var x, Shape shape) {
  DenseTensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [](BackwardContext& ctx) {
    DenseTensor* gx = ctx.input_grad(0);
    if (gx == nullptr) return;
    const DenseTensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

namespace {

// out[perm(i)] = in[i]: for every flat index of the output, the flat index of
// the input element it came from.
std::vector<std::size_t> permutation_table(const Shape& in_shape,
                                           const std::vector<std::size_t>& axes) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  const std::size_t total = shape_size(in_shape);
  std::vector<std::size_t> table(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    table[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      src += stride[i];
      if (idx[i] < out_shape[i]) break;
      src -= stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return table;
}

}  // namespace

Var permute(Var x, const std::vector<std::size_t>& axes) {
  const DenseTensor& xv = x.value();
  const std::size_t r = xv.rank();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw DimensionError("permute: axis count does not match rank");
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = xv.shape()[axes[i]];
  auto table = permutation_table(xv.shape(), axes);
  auto out = DenseTensor::uninitialized(out_shape);
  for (std::size_t i = 0; i < table.size(); ++i) out[i] = xv[table[i]];
  return x.tape().record(std::move(out), {x}, [table = std::move(table)](BackwardContext& ctx) {
    DenseTensor* gx = ctx.input_grad(0);
    if (gx == nullptr) return;
    const DenseTensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < table.size(); ++i) (*gx)[table[i]] += g[i];
  });
}

Var transpose_last2(Var x) {
  const std::size_t r = x.value().rank();
  if (r < 2) throw DimensionError("transpose_last2: rank < 2");
  std::vector<std::size_t> axes(r);
  for (std::size_t i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

Var embedding(Var table, std::span<const int> indices, const Shape& index_shape) {
  const DenseTensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding: table must be (V, D), got " + to_string(tv.shape()));
  if (shape_size(index_shape) != indices.size()) {
    throw DimensionError("embedding: index shape " + to_string(index_shape) + " does not hold " +
                         std::to_string(indices.size()) + " indices");
  }
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  for (int i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= vocab) {
      throw IndexError("embedding: index " + std::to_string(i) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  auto out = DenseTensor::uninitialized(out_shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = tv.row(static_cast<std::size_t>(idx[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return table.tape().record(std::move(out), {table}, [idx = std::move(idx), d](BackwardContext& ctx) {
    DenseTensor* gt = ctx.input_grad(0);
    if (gt == nullptr) return;
    const DenseTensor& g = ctx.out_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t dst = static_cast<std::size_t>(idx[r]) * d;
      for (std::size_t j = 0; j < d; ++j) (*gt)[dst + j] += g[r * d + j];
    }
  });
}

}  // namespace geonorm

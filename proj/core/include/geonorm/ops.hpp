#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "geonorm/autodiff.hpp"

namespace geonorm {

// Differentiable primitives. Binary elementwise ops broadcast with the usual
// right-aligned rules; gradients are summed back onto the broadcast operand.

/// a (..., n, k) times b (k, m), or batched a (..., n, k) times b (..., k, m)
/// with identical leading dimensions.
Var matmul(Var a, Var b);

/// x @ weight + bias for x of shape (..., in), weight (in, out), bias (out).
Var linear(Var x, Var weight, Var bias);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

enum class UnaryKind {
  kSin,
  kCos,
  kSqrt,
  kClampMax,
  kClampMin,
  kScale,
  kAddScalar,
  kExp,
  kLog,
  kGelu,
};

struct UnaryFn {
  UnaryKind kind;
  double c = 0.0;
};

/// Applies fn per element. Clamp gradients pass through on the unclamped side
/// including the boundary itself, and are zero on the clamped side.
Var elementwise(Var x, UnaryFn fn);

inline Var sin(Var x) { return elementwise(x, {UnaryKind::kSin}); }
inline Var cos(Var x) { return elementwise(x, {UnaryKind::kCos}); }
inline Var sqrt(Var x) { return elementwise(x, {UnaryKind::kSqrt}); }
inline Var clamp_max(Var x, double c) { return elementwise(x, {UnaryKind::kClampMax, c}); }
inline Var clamp_min(Var x, double c) { return elementwise(x, {UnaryKind::kClampMin, c}); }
inline Var scale(Var x, double c) { return elementwise(x, {UnaryKind::kScale, c}); }
inline Var add_scalar(Var x, double c) { return elementwise(x, {UnaryKind::kAddScalar, c}); }
inline Var exp(Var x) { return elementwise(x, {UnaryKind::kExp}); }
inline Var log(Var x) { return elementwise(x, {UnaryKind::kLog}); }
// Exact (erf) GELU.
inline Var gelu(Var x) { return elementwise(x, {UnaryKind::kGelu}); }

/// Euclidean norm over the last dimension, kept as a size-1 dimension.
/// The gradient at a zero row is zero.
Var reduce_norm_lastdim(Var x);
Var sum_lastdim(Var x);
// Mean of all elements, as a rank-0 tensor.
Var mean(Var x);

Var softmax_lastdim(Var x);
/// Softmax over the last axis of (..., S, S) scores where row i only sees
/// columns j <= i. Masked entries come out as exact zeros.
Var causal_softmax(Var scores);

/// Multi-head causal attention on (batch, seq, dim) projections: per head,
/// softmax(q k^T / sqrt(dim/heads)) with position t seeing 0..t, times v.
/// Heads split dim into contiguous column blocks. Same result as composing
/// reshape, permute, matmul and causal_softmax, in one op.
Var causal_attention(Var q, Var k, Var v, std::size_t heads);

/// Mean negative log-likelihood of targets under logits (..., V). targets has
/// one entry per logits row.
Var cross_entropy(Var logits, std::span<const int> targets);

Var reshape(Var x, Shape shape);
Var permute(Var x, const std::vector<std::size_t>& axes);
Var transpose_last2(Var x);

/// Gathers rows of table (V, D). The result has shape index_shape + (D).
Var embedding(Var table, std::span<const int> indices, const Shape& index_shape);

}  // namespace geonorm

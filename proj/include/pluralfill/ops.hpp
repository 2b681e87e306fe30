#pragma once

#include <cstdint>
#include <vector>

#include "pluralfill/tape.hpp"

namespace pluralfill {

// Differentiable primitives. All inputs must live on the same tape.
// Elementwise binaries (add, sub, mul) follow numpy broadcasting.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, float factor);
Var add_scalar(Var x, float c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(float s, Var x) { return scale(x, s); }

/// [M,K] x [K,N] -> [M,N]
Var matmul(Var a, Var b);
/// [B,M,K] x [B,K,N] -> [B,M,N]; with transpose_b, b is [B,N,K].
Var bmm(Var a, Var b, bool transpose_b = false);
/// x [..., Cin] * w [Cin, Cout] + bias [Cout]
Var linear(Var x, Var w, Var bias);

/// x [B,C,H,W], w [O,C,k,k], bias [O]; zero padding.
Var conv2d(Var x, Var w, Var bias, int stride, int padding);
/// Nearest-neighbour x2 on [B,C,H,W].
Var upsample2x(Var x);

Var relu(Var x);
Var leaky_relu(Var x, float slope);
/// Exact (erf) GELU.
Var gelu(Var x);
Var tanh(Var x);

/// Along the last axis.
Var softmax(Var x);
Var log_softmax(Var x);
/// Normalizes the last axis to zero mean, unit variance (no affine).
Var layernorm(Var x, float eps = 1e-5f);
/// L2-normalizes each row of the last axis.
Var normalize_rows(Var x, float eps = 1e-6f);

/// mean |a - b| -> [1]
Var l1_distance(Var a, Var b);
/// mean (a - b)^2 -> [1]
Var squared_distance(Var a, Var b);

/// Rows of table [K,D] at `indices` -> [n,D]. Backward scatters into rows.
Var embedding_gather(Var table, std::vector<int32_t> indices);
/// x [M,K] -> [M], element x[m, indices[m]].
Var select_last(Var x, std::vector<int32_t> indices);

Var concat(const std::vector<Var>& parts, int axis);
/// Drops axis 0 by taking entry `index`.
Var slice0(Var x, int64_t index);
Var reshape(Var x, Shape shape);
Var permute(Var x, std::vector<int> perm);

Var sum(Var x);
Var mean(Var x);

/// Identity forward, no gradient.
Var stop_gradient(Var x);
/// Forward value is `quantized` bit-for-bit; the gradient flows to
/// `encoded` unchanged and nothing flows to `quantized`. Equivalent to
/// encoded + stop_gradient(quantized - encoded), without the rounding of
/// the add/subtract pair.
Var straight_through(Var encoded, Var quantized);

/// x [C,H,W] -> [H*W, C*k*k] patch matrix, zero padded, k odd.
/// Feature order within a row is (c, dy, dx).
Var unfold_patches(Var x, int k);

}  // namespace pluralfill

// Differentiable primitives recorded on a Tape.
//
// Broadcasting is deliberately narrow: the second operand of add/sub/mul may
// have a shape equal to a trailing suffix of the first (bias rows, positional
// tables, layer-norm gains). Everything else requires equal shapes and throws
// ShapeError naming the primitive and both shapes.
#pragma once

#include "segsurv/tape.hpp"

#include <array>
#include <vector>

namespace segsurv {

enum class NormMode { Train, Eval };

/// Geometry shared by conv3d and conv_transpose3d (cubic kernels).
struct ConvGeometry {
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
};

/// Output spatial extent of a convolution with the given geometry.
Index conv_out_extent(Index in, const ConvGeometry& g);
/// Output spatial extent of a transposed convolution with the given geometry.
Index conv_transpose_out_extent(Index in, const ConvGeometry& g);

// Linear algebra. a is (..., m, k); b is (k, n) shared across the leading
// axes of a, or (..., k, n) with the same leading axes.
template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
/// x·w + b over the last axis of x.
template <typename S> Var<S> linear(Var<S> x, Var<S> w, Var<S> b);

// Elementwise arithmetic with suffix broadcasting of the right operand.
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> scale(Var<S> a, S factor);

// Structural.
template <typename S> Var<S> reshape(Var<S> a, Shape shape);
/// General axis permutation: output axis i is input axis perm[i].
template <typename S> Var<S> transpose(Var<S> a, std::vector<Index> perm);
template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, Index axis);
template <typename S> Var<S> slice(Var<S> a, Index axis, Index begin, Index end);

// Reductions.
template <typename S> Var<S> mean_axis(Var<S> a, Index axis);
template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> mean(Var<S> a);

// Pointwise nonlinearities.
template <typename S> Var<S> softmax_axis(Var<S> a, Index axis);
template <typename S> Var<S> exp(Var<S> a);
template <typename S> Var<S> log(Var<S> a);
template <typename S> Var<S> relu(Var<S> a);
/// tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
template <typename S> Var<S> gelu(Var<S> a);
template <typename S> Var<S> sigmoid(Var<S> a);

// Normalization.
template <typename S> Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-6));
/// x is (N, C, X, Y, Z). Train mode normalizes with batch statistics and
/// updates the running buffers; Eval mode uses the buffers.
template <typename S>
Var<S> batch_norm_3d(Var<S> x, Var<S> gamma, Var<S> beta, Parameter<S>& running_mean,
                     Parameter<S>& running_var, NormMode mode, S momentum = S(0.1), S eps = S(1e-5));

// Volumetric convolutions. x is (N, Cin, X, Y, Z).
/// w is (Cout, Cin, k, k, k), b is (Cout).
template <typename S> Var<S> conv3d(Var<S> x, Var<S> w, Var<S> b, ConvGeometry g);
/// w is (Cin, Cout, k, k, k), b is (Cout). Adjoint of conv3d with the same geometry.
template <typename S> Var<S> conv_transpose3d(Var<S> x, Var<S> w, Var<S> b, ConvGeometry g);

/// tokens (..., m, h) plus a learnable (m, h) positional table.
template <typename S> Var<S> embedding_add(Var<S> tokens, Var<S> positions);

}  // namespace segsurv

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ctxreg/tensor.hpp"

// Differentiable primitives. Binary elementwise ops accept a right operand
// whose shape equals a suffix of the left operand's shape (leading-dimension
// broadcast only); anything else raises ShapeError naming the op and shapes.
namespace ctxreg::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// scale * x + shift
Tensor scale(const Tensor& x, Real scale, Real shift = Real(0));
Tensor concat_last(const std::vector<Tensor>& parts);
std::vector<Tensor> split_last(const Tensor& x, std::size_t pieces);
Tensor transpose_last2(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = Real(1e-5));
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Inverted dropout: kept activations are divided by (1 - rate). Identity
/// when !training or rate == 0.
Tensor dropout(const Tensor& x, Real rate, bool training, std::mt19937_64& rng);

/// Rows of `table` ([V, D]) gathered by id; result shape is ids_shape + [D].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape);
/// Positions where mask != 0 are replaced by `value` and receive no gradient.
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, Real value);
/// Picks x[..., index[i]] along the last dimension; result drops that dimension.
Tensor pick_last(const Tensor& x, std::span<const std::int32_t> index);
/// Gathers along the leading dimension: out[i] = x[rows[i]].
Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Sequential row-major sum to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sums the last dimension in index order.
Tensor sum_last(const Tensor& x);

/// max(0, x) with subgradient 0 at the kink.
Tensor hinge(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);

/// Elementwise log((1/M) * sum_m exp(x_m)), stabilized by the per-element max.
Tensor log_mean_exp(const std::vector<Tensor>& xs);

}  // namespace ctxreg::ops

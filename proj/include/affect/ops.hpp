#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "affect/tensor.hpp"

namespace affect::num {

/// [m x k] . [k x n], [B x m x k] . [k x n] (shared right operand) or
/// [B x m x k] . [B x k x n] (batched).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& a);

// Binary elementwise ops. `b` must match `a`'s shape, hold a single element
// (scalar broadcast), or match a trailing suffix of `a`'s shape (broadcast over
// the leading axes, e.g. a bias row or a positional table).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies per-feature gain and bias.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(std::span<const Tensor> xs, std::size_t axis);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes);
Tensor reshape(const Tensor& x, Shape shape);

/// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace affect::num

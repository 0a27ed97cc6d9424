#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "flowseg/tensor.hpp"

namespace flowseg::ops {

using Dims3 = std::array<int, 3>;

/// Names of every differentiable op. Each has a gradient-check entry in the
/// test suite.
const std::vector<std::string_view>& registered();

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float k);
/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

/// x: [N,Cin,H,W,D], w: [Cout,Cin,kh,kw,kd] (odd extents), bias: [Cout].
/// Zero padding of k/2 per side. Output extent per axis is `in` for stride 1
/// and `in / 2` (floor) for stride 2.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Dims3 stride = {1, 1, 1});

/// Adjoint of a stride-2 conv3d: x: [N,Cin,h,w,d], w: [Cin,Cout,kh,kw,kd],
/// bias: [Cout]. Output extent per axis is `2 * in` where stride is 2.
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, Dims3 stride = {2, 2, 2});

/// Non-overlapping mean pool with window == stride. Extents must divide.
Tensor avgpool3d(const Tensor& x, Dims3 window);
/// [N,C,...] -> [N,C]
Tensor global_avgpool(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// Concatenates along axis 1. All other extents must agree.
Tensor concat_channels(const std::vector<Tensor>& xs);
/// Contiguous range [start, start+length) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::int64_t start, std::int64_t length);

/// mean((a - b)^2) as a scalar.
Tensor mse(const Tensor& a, const Tensor& b);
/// Mean over elements of the numerically stable logistic loss.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace flowseg::ops

#pragma once

#include <string>

#include "flowseg/ops.hpp"
#include "flowseg/optim.hpp"

namespace flowseg {

/// Registers "<name>.w" [out,in,k...] and "<name>.b" [out].
void add_conv(ParamSet& ps, const std::string& name, int out, int in, ops::Dims3 kernel, Rng& rng, float gain = 1.0f);
/// Registers a transposed conv "<name>.w" [in,out,k...] and "<name>.b" [out].
void add_conv_transpose(ParamSet& ps, const std::string& name, int in, int out, ops::Dims3 kernel, Rng& rng,
                        float gain = 1.0f);

Tensor conv(const ParamSet& ps, const std::string& name, const Tensor& x, ops::Dims3 stride = {1, 1, 1});
Tensor conv_transpose(const ParamSet& ps, const std::string& name, const Tensor& x, ops::Dims3 stride = {2, 2, 2});

/// Draws a tensor of i.i.d. standard normals.
Tensor randn(const Shape& shape, Rng& rng);

bool all_finite(const Tensor& t);

}  // namespace flowseg

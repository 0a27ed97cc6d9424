#include "flowseg/layers.hpp"

#include <cmath>

namespace flowseg {

void add_conv(ParamSet& ps, const std::string& name, int out, int in, ops::Dims3 kernel, Rng& rng, float gain) {
  const std::int64_t fan_in = static_cast<std::int64_t>(in) * kernel[0] * kernel[1] * kernel[2];
  ps.add(name + ".w", init_conv_weight({out, in, kernel[0], kernel[1], kernel[2]}, fan_in, rng, gain));
  ps.add(name + ".b", Tensor::zeros({out}));
}

void add_conv_transpose(ParamSet& ps, const std::string& name, int in, int out, ops::Dims3 kernel, Rng& rng,
                        float gain) {
  // Each output voxel of a stride-2 transposed conv receives about in*k/8 taps.
  const std::int64_t fan_in = std::max<std::int64_t>(1, static_cast<std::int64_t>(in) * kernel[0] * kernel[1] * kernel[2] / 8);
  ps.add(name + ".w", init_conv_weight({in, out, kernel[0], kernel[1], kernel[2]}, fan_in, rng, gain));
  ps.add(name + ".b", Tensor::zeros({out}));
}

Tensor conv(const ParamSet& ps, const std::string& name, const Tensor& x, ops::Dims3 stride) {
  return ops::conv3d(x, ps.tensor(name + ".w"), ps.tensor(name + ".b"), stride);
}

Tensor conv_transpose(const ParamSet& ps, const std::string& name, const Tensor& x, ops::Dims3 stride) {
  return ops::conv_transpose3d(x, ps.tensor(name + ".w"), ps.tensor(name + ".b"), stride);
}

Tensor randn(const Shape& shape, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor(shape, std::move(v));
}

bool all_finite(const Tensor& t) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace flowseg

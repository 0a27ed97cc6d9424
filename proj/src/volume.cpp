#include "flowseg/volume.hpp"

#include <algorithm>

namespace flowseg {

Volume::Volume(std::array<std::int64_t, 3> d, std::array<float, 3> s, float fill)
    : dims(d), spacing(s), values(static_cast<std::size_t>(d[0] * d[1] * d[2]), fill) {}

std::int64_t Volume::count_positive() const {
  return std::count_if(values.begin(), values.end(), [](float v) { return v > 0.5f; });
}

Tensor to_network(const Volume& v) {
  std::vector<float> data(v.values.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = v.values[i] / 127.5f - 1.0f;
  return Tensor({1, 1, v.dims[0], v.dims[1], v.dims[2]}, std::move(data));
}

Volume from_network(const Tensor& t, const Volume& like) {
  if (t.numel() != like.size()) {
    throw ShapeError("from_network: tensor " + shape_str(t.shape()) + " does not match volume geometry");
  }
  Volume out(like.dims, like.spacing);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = (t.ptr()[i] + 1.0f) * 127.5f;
  return out;
}

}  // namespace flowseg

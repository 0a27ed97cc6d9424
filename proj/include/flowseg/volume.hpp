#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "flowseg/tensor.hpp"

namespace flowseg {

/// Dense scalar field of extent (H, W, D), row-major with the axial index
/// (third) varying fastest.
struct Volume {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::vector<float> values;

  Volume() = default;
  Volume(std::array<std::int64_t, 3> d, std::array<float, 3> s, float fill = 0.0f);

  std::int64_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const { return (i * dims[1] + j) * dims[2] + k; }
  float& at(std::int64_t i, std::int64_t j, std::int64_t k) { return values[static_cast<std::size_t>(index(i, j, k))]; }
  float at(std::int64_t i, std::int64_t j, std::int64_t k) const { return values[static_cast<std::size_t>(index(i, j, k))]; }

  std::int64_t count_positive() const;
  bool same_geometry(const Volume& o) const { return dims == o.dims && spacing == o.spacing; }

  bool operator==(const Volume&) const = default;
};

/// [0,255] display units -> [-1,1] network units, as a [1,1,H,W,D] tensor.
Tensor to_network(const Volume& v);
/// Inverse of to_network for a [1,1,H,W,D] tensor; geometry taken from `like`.
Volume from_network(const Tensor& t, const Volume& like);

}  // namespace flowseg

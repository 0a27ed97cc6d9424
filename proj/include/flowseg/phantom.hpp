#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "flowseg/volume.hpp"

namespace flowseg {

struct PhantomConfig {
  std::array<std::int64_t, 3> dims{32, 32, 32};
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  int min_nodules = 0;
  int max_nodules = 2;
  float min_radius_mm = 2.5f;
  float max_radius_mm = 4.0f;
  float min_nodule_hu = 30.0f;
  float max_nodule_hu = 100.0f;
  /// Probability that a nodule is a multi-lobed union instead of a sphere.
  float lobed_fraction = 0.4f;
  float lung_hu = -800.0f;
  float body_hu = 40.0f;
  float air_hu = -1000.0f;
  float noise_hu = 50.0f;
};

struct Nodule {
  std::array<std::int64_t, 3> center{};
  float radius_mm = 0.0f;
  float intensity_hu = 0.0f;
  /// Lobe centers (mm offsets from `center`) and radii. A sphere has one lobe.
  std::vector<std::array<float, 3>> lobe_offsets;
  std::vector<float> lobe_radii;
};

struct Phantom {
  Volume image;  ///< Hounsfield units, before preprocessing.
  Volume gt_mask;
  std::vector<Nodule> nodules;
  std::uint64_t seed = 0;
};

struct SliceLabel {
  std::int64_t slice = 0;
  int label = 0;
};

class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& cfg);

/// Clip to [-1000, 1000] HU, then map affinely onto [0, 255]. Not idempotent.
Volume preprocess(const Volume& hu);

/// One label per axial slice: 1 iff the mask has a positive voxel there.
std::vector<SliceLabel> slice_labels(const Volume& mask);
std::vector<SliceLabel> slice_labels(const Phantom& p);

struct Fold {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> eval;
};

/// Shuffled partition of [0, n) into k near-equal eval sets (the first n % k
/// folds get one extra id). Train is the complement of eval.
std::vector<Fold> make_folds(std::int64_t n, int k, std::uint64_t seed);

}  // namespace flowseg

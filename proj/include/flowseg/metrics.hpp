#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "flowseg/volume.hpp"

namespace flowseg {

/// 2|A n B| / (|A| + |B|) over voxels > 0.5; 1 when both are empty.
double dice(const Volume& a, const Volume& b);

/// Positive voxels with at least one of their six face neighbours in the
/// background (outside the volume counts as background).
std::vector<std::array<std::int64_t, 3>> surface_voxels(const Volume& mask);

/// Exact squared Euclidean distance (in mm^2, honouring spacing) from every
/// voxel to the nearest voxel with seeds[i] != 0. Infinity if there are none.
std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seeds, std::array<std::int64_t, 3> dims,
                                               std::array<float, 3> spacing);

/// Symmetric mean surface distance in mm: the mean over both surfaces of
/// each surface voxel's distance to the other surface. 0 when both masks are
/// empty; the volume diagonal when exactly one is.
double mean_surface_distance(const Volume& a, const Volume& b);

/// Sentinel returned when exactly one mask is empty.
double empty_mask_penalty(const Volume& like);

struct VolumeScore {
  std::string method;
  int fold = 0;
  std::int64_t volume_id = 0;
  double dice = 0.0;
  double msd_mm = 0.0;
};

struct MethodSummary {
  std::string method;
  double mean_dice = 0.0;  ///< mean over folds of the per-fold mean, in [0,1]
  double std_dice = 0.0;   ///< population std of the per-fold means
  double median_msd = 0.0;  ///< over every scored volume
  std::size_t volumes = 0;
};

/// One row per method, ordered by mean dice, best first (ties by name).
std::vector<MethodSummary> aggregate(const std::vector<VolumeScore>& scores);

/// Median of a non-empty list (mean of the middle pair for even sizes).
double median(std::vector<double> values);

/// Display name used in tables: "tfg" -> "Ours", "cam" -> "CAM",
/// "gradcam" -> "Grad-CAM"; anything else unchanged.
std::string method_label(const std::string& method);

/// method,fold,volume_id,dice,msd_mm
std::string results_csv(const std::vector<VolumeScore>& scores);
/// method,mean_dice,std_dice,median_msd
std::string summary_csv(const std::vector<MethodSummary>& rows);
/// Aligned text table with dice in percent, e.g. "Ours  42.05±4.24  12.50".
std::string summary_table(const std::vector<MethodSummary>& rows);

}  // namespace flowseg

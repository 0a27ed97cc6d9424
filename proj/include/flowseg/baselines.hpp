#pragma once

#include <vector>

#include "flowseg/predictor.hpp"
#include "flowseg/volume.hpp"

namespace flowseg {

/// Per-slice heatmap at slice resolution, min-max normalized into [0,1].
struct AttributionMap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> values;  ///< row-major [height, width]
};

/// relu(sum_c weights[c] * features[c]) for one item of [1,C,h,w,1] feature
/// maps, upsampled bilinearly to [height,width] and normalized.
AttributionMap weighted_feature_map(const Tensor& features, const std::vector<float>& weights, std::int64_t height,
                                    std::int64_t width);

/// Bilinear resize with half-pixel centers and edge clamping.
std::vector<float> upsample_bilinear(const std::vector<float>& src, std::int64_t h, std::int64_t w, std::int64_t H,
                                     std::int64_t W);

/// (x - min) / (max - min). A constant map becomes all ones if positive and
/// all zeros otherwise.
void normalize_min_max(std::vector<float>& values);

/// Class activation map: head weights times final feature maps.
AttributionMap cam(const Classifier& f, const Slab2p5D& slab);

/// Spatial mean of d(logit)/d(features) per channel.
std::vector<float> grad_cam_weights(const Classifier& f, const Slab2p5D& slab);
AttributionMap grad_cam(const Classifier& f, const Slab2p5D& slab);

enum class AttributionMethod { cam, grad_cam };

/// One map per axial slice of a [1,1,H,W,D] volume in network units; slices
/// predicted negative (probability <= `slice_threshold`) get an all-zero map.
std::vector<AttributionMap> volume_attribution(const Classifier& f, const Tensor& volume, AttributionMethod method,
                                               float slice_threshold = 0.5f);

/// Stacks per-slice maps (slice k -> axial index k) into a volume and keeps
/// voxels whose value exceeds theta.
Volume attribution_mask(const std::vector<AttributionMap>& maps, const Volume& like, float theta = 0.5f);

/// Stacked maps without thresholding, for figures.
Volume attribution_volume(const std::vector<AttributionMap>& maps, const Volume& like);

}  // namespace flowseg

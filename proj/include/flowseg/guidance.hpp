#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "flowseg/flow.hpp"
#include "flowseg/latent.hpp"
#include "flowseg/predictor.hpp"
#include "flowseg/volume.hpp"

namespace flowseg {

struct GuidanceConfig {
  float s = 1.0f;
  int T = 30;
  int tau = 15;
  int m = 5;
  float y = 0.0f;
  float guided_slice_threshold = 0.5f;
  /// Re-select guided slices on each decoded clean estimate instead of
  /// fixing them from the input volume.
  bool recompute_slices = false;
  /// 3x3x3 mean filter on the residual before thresholding.
  bool smooth_residual = false;
  /// Fixed residual threshold in display units; negative selects Otsu.
  float fixed_threshold = -1.0f;

  /// Throws std::invalid_argument unless 0 <= tau, tau + m <= T and s >= 0.
  void validate() const;
};

struct GuidanceStep {
  int t = 0;
  double grad_norm = 0.0;
  double loss = 0.0;
  double mean_prob = 0.0;
};

struct GuidanceTrace {
  std::vector<GuidanceStep> steps;
  std::vector<std::int64_t> guided_slices;
  /// Mean guided-slice probability on the decoded clean estimate before the
  /// first update and after the m-th (NaN when guidance did not run).
  double prob_before = std::numeric_limits<double>::quiet_NaN();
  double prob_after = std::numeric_limits<double>::quiet_NaN();
};

struct SegmentationResult {
  Volume counterfactual;  ///< display units [0,255]
  Volume residual;        ///< |counterfactual - input|
  Volume mask;            ///< 0/1; empty when guidance was skipped
  double threshold = 0.0;
  GuidanceTrace trace;
  /// Set when no slice was predicted positive, so the result is the
  /// unguided reconstruction.
  bool guidance_skipped = false;
};

/// The frozen models Algorithm 1 runs on. Nothing here is modified.
struct GuidanceModels {
  const Autoencoder& ae;
  VelocityFn v;
  const Classifier& f;
};

/// z + v(z, u) (1 - u), u = t/T.
Tensor clean_estimate(const VelocityFn& v, const Tensor& z, int t, const TimeGrid& grid);

/// z - s * grad. Throws NumericError on a non-finite gradient.
Tensor guidance_update(const Tensor& z, const Tensor& grad, float s);

/// Axial indices whose predicted probability exceeds `threshold`.
/// `volume` is [1,1,H,W,D] in network units.
std::vector<std::int64_t> select_guided_slices(const Classifier& f, const Tensor& volume, float threshold);

struct Threshold {
  double value = 0.0;
  Volume mask;
};

/// Otsu over the nonzero residual voxels (256 bins spanning their range).
/// A single distinct nonzero value thresholds at zero. mask = residual > value.
Threshold otsu_threshold(const Volume& residual);
Threshold fixed_threshold(const Volume& residual, double theta);
/// Dispatches on cfg.fixed_threshold, after optional smoothing.
Threshold threshold_residual(const Volume& residual, const GuidanceConfig& cfg);

/// Mean over the in-bounds 3x3x3 neighbourhood of each voxel.
Volume box_smooth(const Volume& v);

/// Encode, invert to tau, integrate back to T and decode, with no guidance.
/// Returns display units.
Volume reconstruct(const Volume& x, const Autoencoder& ae, const VelocityFn& v, const GuidanceConfig& cfg);

/// Training-free guidance: the counterfactual, its residual against `x` and
/// the thresholded mask. `x` is in display units [0,255].
SegmentationResult tfg_segment(const Volume& x, const GuidanceModels& models, const GuidanceConfig& cfg);

/// step, grad_norm, loss, mean_prob.
std::string trace_csv(const GuidanceTrace& trace);

/// |reconstruct(x) - x|, box-smoothed when cfg.smooth_residual is set: the
/// residual tfg_segment would threshold if guidance changed nothing.
Volume unguided_residual(const Volume& x, const Autoencoder& ae, const VelocityFn& v, const GuidanceConfig& cfg);

/// Mask threshold calibrated on unguided residuals: the q-quantile (value at
/// sorted index floor(q * (n - 1))) of all their voxels pooled. Voxels above
/// it are rarer than 1 - q where guidance did not edit anything.
double calibrate_threshold(const std::vector<Volume>& residuals, double q);

/// One P5 image per axial slice: the panels side by side, each scaled into
/// [0,255] by its own maximum (display-unit volumes are written as-is).
struct Panel {
  const Volume* volume = nullptr;
  bool display_units = false;
};
void write_slice_panels(const std::filesystem::path& dir, const std::string& stem, const std::vector<Panel>& panels,
                        const std::vector<std::int64_t>& slices);

}  // namespace flowseg

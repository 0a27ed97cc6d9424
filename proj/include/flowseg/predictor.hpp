#pragma once

#include <functional>
#include <vector>

#include "flowseg/optim.hpp"
#include "flowseg/persistence.hpp"
#include "flowseg/rng.hpp"
#include "flowseg/tensor.hpp"

namespace flowseg {

/// k adjacent axial slices around `center`, as a [1,k,H,W,1] tensor in
/// network units. Slices past either end repeat the edge slice.
struct Slab2p5D {
  Tensor data;
  std::int64_t center = 0;
  int k = 9;
};

/// Axial indices feeding the slab for `center` (edge-replicated).
std::vector<std::int64_t> slab_indices(std::int64_t depth, std::int64_t center, int k);

/// `volume` is [1,1,H,W,D].
Slab2p5D stack_25d(const Tensor& volume, std::int64_t center, int k);
/// Slabs for each center, stacked into [centers.size(),k,H,W,1]. Built from
/// taped ops, so gradients flow back into `volume`.
Tensor stack_25d_batch(const Tensor& volume, const std::vector<std::int64_t>& centers, int k);

struct PredictorConfig {
  int k = 9;
  int hidden1 = 16;
  int hidden2 = 32;
  int kernel = 3;
  int iterations = 10000;
  int batch = 16;
  float lr = 5e-4f;
  int validate_every = 100;
  float threshold = 0.5f;
};

/// 2D network over 2.5D slabs, expressed with depth-1 conv3d kernels:
/// two stride-2 conv+relu stages, global average pooling, then a 1x1x1 conv
/// to a single logit.
class Classifier {
 public:
  Classifier(const PredictorConfig& cfg, Rng& rng);

  /// [N,k,H,W,1] -> final feature maps [N,hidden2,H/4,W/4,1].
  Tensor features(const Tensor& slabs) const;
  /// Logit head applied to feature maps: [N,hidden2,h,w,1] -> [N].
  Tensor head(const Tensor& features) const;
  /// [N,k,H,W,1] -> logits [N].
  Tensor logits(const Tensor& slabs) const { return head(features(slabs)); }

  /// Head weights, one per feature channel, and the bias.
  std::vector<float> head_weights() const;
  float head_bias() const;

  const PredictorConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  void set_trainable(bool on);

  /// Checkpoint tensors under "clf.*".
  std::vector<std::pair<std::string, Tensor>> state() const;
  void load(const NamedTensors& ckpt);

 private:
  PredictorConfig cfg_;
  ParamSet params_;
};

/// sigmoid(logit) for one slab.
float predict_slice(const Classifier& f, const Slab2p5D& slab);
/// One probability per axial slice of a [1,1,H,W,D] volume.
std::vector<float> volume_predictions(const Classifier& f, const Tensor& volume);

struct AugmentationConfig {
  double p_flip = 0.5;
  double p_rotate = 0.5;
  double p_translate = 1.0;
  double p_zoom = 0.95;
  double max_rotation_deg = 15.0;
  double max_translation = 0.1;  ///< fraction of the in-plane extent
  double zoom_min = 0.9;
  double zoom_max = 1.1;

  static AugmentationConfig none() { return {0.0, 0.0, 0.0, 0.0}; }
};

/// In-plane geometric transform shared by every channel of a slab.
struct AugmentParams {
  bool flip = false;
  double angle_deg = 0.0;
  double shift_h = 0.0;  ///< voxels
  double shift_w = 0.0;
  double zoom = 1.0;

  bool is_identity() const { return !flip && angle_deg == 0.0 && shift_h == 0.0 && shift_w == 0.0 && zoom == 1.0; }
};

/// Draws each transform independently with its probability.
AugmentParams draw_augmentation(const AugmentationConfig& aug, std::int64_t height, std::int64_t width, Rng& rng);
/// Bilinear resampling of [N,C,H,W,1] slabs with border replication.
Tensor apply_augmentation(const Tensor& slabs, const AugmentParams& p);
Tensor augment(const Tensor& slabs, const AugmentationConfig& aug, Rng& rng);

/// Draws positives and negatives with equal probability regardless of
/// their counts.
class BalancedSampler {
 public:
  BalancedSampler(std::size_t positives, std::size_t negatives);
  /// Returns (is_positive, index within its pool).
  std::pair<bool, std::size_t> draw(Rng& rng) const;

 private:
  std::size_t positives_;
  std::size_t negatives_;
};

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  double precision() const;
  double recall() const;
  /// 2PR/(P+R); 1 when there are no positives at all and none predicted,
  /// 0 when either precision or recall has nothing to count.
  double f1() const;
};

ConfusionCounts confusion(const std::vector<float>& probabilities, const std::vector<int>& labels, float threshold);

/// A preprocessed volume in network units plus its per-slice labels.
struct LabeledVolume {
  Tensor image;  ///< [1,1,H,W,D]
  std::vector<int> labels;
};

struct PredictorLogRow {
  int iteration = 0;
  double loss = 0.0;  ///< mean training loss since the previous row
  double val_f1 = 0.0;
};

struct PredictorTraining {
  Classifier best;
  Classifier last;
  double best_f1 = -1.0;
  int best_iteration = 0;
  std::vector<PredictorLogRow> log;

  /// Everything needed to resume: last weights, optimizer state, the best
  /// weights so far (under "best.") and the log.
  std::vector<std::pair<std::string, Tensor>> resume_state() const;
};

using PredictorLogFn = std::function<void(const PredictorLogRow&)>;

/// Balanced BCE training on augmented slabs, validating every
/// cfg.validate_every iterations on `val` and keeping the weights with the
/// highest slice F1. Throws if either class is absent from `train`.
PredictorTraining train_predictor(const std::vector<LabeledVolume>& train, const std::vector<LabeledVolume>& val,
                                  const PredictorConfig& cfg, const AugmentationConfig& aug, std::uint64_t seed,
                                  const PredictorLogFn& on_log = {}, const NamedTensors* resume = nullptr);

}  // namespace flowseg

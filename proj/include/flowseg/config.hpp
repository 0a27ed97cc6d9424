#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowseg/flow.hpp"
#include "flowseg/guidance.hpp"
#include "flowseg/latent.hpp"
#include "flowseg/phantom.hpp"
#include "flowseg/predictor.hpp"

namespace flowseg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a pipeline run depends on. Serialized as flat "key = value"
/// lines with dotted keys, e.g. "guidance.s = 1".
struct RunConfig {
  std::uint64_t seed = 1;
  int corpus_size = 60;
  int folds = 3;
  /// Fraction of each fold's training ids held out for predictor validation.
  double val_fraction = 0.2;
  std::string output_dir = "run";
  /// Skip the autoencoder and run the flow on voxels directly.
  bool identity_latent = false;
  float cam_threshold = 0.5f;
  /// When positive, tfg masks use a per-fold threshold: this quantile of the
  /// unguided reconstruction residual over the fold's training volumes.
  /// Zero falls back to guidance.fixed_threshold / Otsu.
  double calibration_quantile = 0.9999;

  PhantomConfig phantom;
  AeConfig ae;
  FlowConfig flow;
  PredictorConfig predictor;
  AugmentationConfig augmentation;
  /// Smoothing is on here: the calibrated threshold assumes it.
  GuidanceConfig guidance{.smooth_residual = true};

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

/// Parses "key = value" lines. Blank lines and lines starting with '#' are
/// ignored. Unknown keys, malformed values and duplicates throw ConfigError
/// naming the line. Keys not mentioned keep their defaults. The result is
/// validated.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

/// Sets one key from its string form (the same syntax as the file).
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Every key with its current value, one per line, in a fixed order.
std::string serialize_config(const RunConfig& cfg);

/// All recognized keys, in serialization order.
std::vector<std::string> config_keys();

/// Applies the FLOWSEG_SEED environment variable, if set.
void apply_seed_override(RunConfig& cfg);

}  // namespace flowseg

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "flowseg/baselines.hpp"
#include "flowseg/config.hpp"
#include "flowseg/flow.hpp"
#include "flowseg/guidance.hpp"
#include "flowseg/latent.hpp"
#include "flowseg/metrics.hpp"
#include "flowseg/persistence.hpp"
#include "flowseg/predictor.hpp"

namespace flowseg {

/// Segmentation methods compared in the evaluation table.
enum class Method { tfg, cam, gradcam };
std::string method_name(Method m);
/// Throws ConfigError for anything but "tfg", "cam" or "gradcam".
Method parse_method(const std::string& name);
const std::vector<Method>& all_methods();

/// Ids of one fold: eval is the fold's held-out set; train is split further
/// into predictor training and validation ids.
struct FoldSplit {
  int fold = 0;
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> eval;
  std::vector<std::int64_t> predictor_train;
  std::vector<std::int64_t> predictor_val;
};

/// The trained models of one fold.
struct FoldModels {
  Autoencoder ae;
  VelocityField flow;
  Classifier clf;
};

/// Directory layout and stage runners for one output directory. Every stage
/// reads its prerequisites from disk, so stages can run in separate
/// processes; missing inputs raise MissingArtifact naming the file.
///
///   <out>/config.txt
///   <out>/data/labels.json, vol_NNN.fsvl, mask_NNN.fsvl
///   <out>/fold<k>/ae.fsg, flow.fsg, predictor.fsg, predictor_state.fsg, *_log.csv,
///                 threshold.txt
///   <out>/fold<k>/<method>/vol_NNN_{mask,residual,counterfactual,heatmap}.fsvl,
///                          vol_NNN_trace.csv, panels/
///   <out>/fold<k>/tfg/guidance.csv, <out>/fold<k>/predictor_eval.csv
///   <out>/eval/results.csv, summary.csv, table.txt
class Pipeline {
 public:
  using Log = std::function<void(const std::string&)>;

  explicit Pipeline(RunConfig cfg, Log log = {});

  const RunConfig& config() const { return cfg_; }
  std::filesystem::path root() const { return cfg_.output_dir; }
  std::filesystem::path data_dir() const { return root() / "data"; }
  std::filesystem::path fold_dir(int fold) const { return root() / ("fold" + std::to_string(fold)); }
  std::filesystem::path method_dir(int fold, Method m) const { return fold_dir(fold) / method_name(m); }
  std::filesystem::path eval_dir() const { return root() / "eval"; }
  static std::string volume_stem(std::int64_t id);

  /// Writes the phantom corpus and its manifest.
  Manifest generate_data();
  Manifest manifest() const;

  FoldSplit split(int fold) const;

  /// Each trainer writes its checkpoint (weights plus optimizer state) and a
  /// log CSV. With `resume`, training continues from the existing checkpoint
  /// up to the configured step count.
  void train_ae(int fold, bool resume = false);
  void train_flow(int fold, bool resume = false);
  void train_predictor(int fold, bool resume = false);

  /// Fits the fold's tfg mask threshold on its training volumes and writes
  /// it to threshold.txt. No-op when calibration_quantile is zero.
  void calibrate(int fold, int jobs = 1);

  Autoencoder load_autoencoder(int fold) const;
  FoldModels load_models(int fold) const;

  /// Segments the fold's eval volumes (or just `volume`, which must belong
  /// to the fold) with `method`, spreading volumes over `jobs` threads.
  void segment(int fold, Method method, std::optional<std::int64_t> volume = std::nullopt, int jobs = 1);

  /// Slice-level F1 of the fold's predictor on its eval volumes.
  ConfusionCounts predictor_eval(int fold) const;

  /// Scores every (method, fold, volume) and writes the result tables.
  /// Throws MissingArtifact listing all absent masks.
  std::vector<MethodSummary> evaluate(const std::vector<Method>& methods);

  /// gen-data, all training, calibration, all segmentation, eval.
  std::vector<MethodSummary> run_all(int jobs = 1);

 private:
  void log(const std::string& msg) const;
  std::vector<LabeledVolume> labeled(const std::vector<std::int64_t>& ids, const Manifest& m) const;
  Volume read_image(const Manifest& m, std::int64_t id) const;
  Volume read_mask(const Manifest& m, std::int64_t id) const;
  std::uint64_t stream(const std::string& name, int fold) const;

  RunConfig cfg_;
  Log log_;
};

/// Guided-slice probabilities recorded per volume by tfg segmentation.
struct GuidanceRecord {
  std::int64_t volume_id = 0;
  int nodules = 0;
  std::size_t guided_slices = 0;
  double prob_before = 0.0;
  double prob_after = 0.0;
  bool skipped = false;
};
std::vector<GuidanceRecord> read_guidance_records(const std::filesystem::path& csv);

}  // namespace flowseg

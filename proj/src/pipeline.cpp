#include "flowseg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace flowseg {

namespace fs = std::filesystem;

namespace {

void append_state(std::vector<std::pair<std::string, Tensor>>& out, const ParamSet& ps) {
  for (auto& kv : ps.optimizer_state()) out.push_back(std::move(kv));
}

NamedTensors require_checkpoint(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifact(what + " checkpoint not found: " + p.string());
  return read_checkpoint(p);
}

std::string train_log_csv(const std::vector<TrainPoint>& points) {
  CsvWriter csv({"step", "loss"});
  for (const auto& p : points) csv.row({std::to_string(p.step), fmt_float(p.loss, 8)});
  return csv.str();
}

// Runs body(i) for i in [0, n) on up to `jobs` threads. The first exception
// is rethrown after all threads finish.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& body) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::tfg:
      return "tfg";
    case Method::cam:
      return "cam";
    case Method::gradcam:
      return "gradcam";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : all_methods()) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "' (expected tfg, cam or gradcam)");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::tfg, Method::cam, Method::gradcam};
  return m;
}

Pipeline::Pipeline(RunConfig cfg, Log log) : cfg_(std::move(cfg)), log_(std::move(log)) { cfg_.validate(); }

void Pipeline::log(const std::string& msg) const {
  if (log_) log_(msg);
}

std::string Pipeline::volume_stem(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vol_%03lld", static_cast<long long>(id));
  return buf;
}

std::uint64_t Pipeline::stream(const std::string& name, int fold) const {
  return derive_seed(cfg_.seed, name, static_cast<std::uint64_t>(fold));
}

Manifest Pipeline::generate_data() {
  fs::create_directories(data_dir());
  write_text(root() / "config.txt", serialize_config(cfg_));
  Manifest m;
  m.seed = cfg_.seed;
  m.folds = cfg_.folds;
  std::vector<int> fold_of(static_cast<std::size_t>(cfg_.corpus_size), 0);
  if (cfg_.corpus_size > 0) {
    const auto folds = make_folds(cfg_.corpus_size, cfg_.folds, derive_seed(cfg_.seed, "folds"));
    for (std::size_t k = 0; k < folds.size(); ++k) {
      for (auto id : folds[k].eval) fold_of[static_cast<std::size_t>(id)] = static_cast<int>(k);
    }
  }
  for (std::int64_t id = 0; id < cfg_.corpus_size; ++id) {
    const std::uint64_t seed = derive_seed(cfg_.seed, "data", static_cast<std::uint64_t>(id));
    const Phantom p = generate_phantom(seed, cfg_.phantom);
    ManifestEntry e;
    e.id = id;
    e.seed = seed;
    e.image = volume_stem(id) + ".fsvl";
    e.mask = "mask_" + volume_stem(id).substr(4) + ".fsvl";
    e.fold = fold_of[static_cast<std::size_t>(id)];
    e.nodule_count = static_cast<int>(p.nodules.size());
    for (const auto& l : slice_labels(p)) e.slice_labels.push_back(l.label);
    write_volume(data_dir() / e.image, preprocess(p.image));
    write_volume(data_dir() / e.mask, p.gt_mask);
    m.entries.push_back(std::move(e));
  }
  write_manifest(data_dir() / "labels.json", m);
  log("gen-data: " + std::to_string(m.entries.size()) + " volumes in " + data_dir().string());
  return m;
}

Manifest Pipeline::manifest() const {
  const fs::path p = data_dir() / "labels.json";
  if (!fs::exists(p)) throw MissingArtifact("corpus manifest not found: " + p.string() + " (run gen-data first)");
  Manifest m = read_manifest(p);
  if (m.folds != cfg_.folds) {
    throw ConfigError("corpus was generated with " + std::to_string(m.folds) + " folds, config says " +
                      std::to_string(cfg_.folds));
  }
  return m;
}

Volume Pipeline::read_image(const Manifest& m, std::int64_t id) const {
  return read_volume(data_dir() / m.entry(id).image);
}

Volume Pipeline::read_mask(const Manifest& m, std::int64_t id) const { return read_volume(data_dir() / m.entry(id).mask); }

FoldSplit Pipeline::split(int fold) const {
  if (fold < 0 || fold >= cfg_.folds) {
    throw ConfigError("fold " + std::to_string(fold) + " outside [0, " + std::to_string(cfg_.folds) + ")");
  }
  const Manifest m = manifest();
  FoldSplit s;
  s.fold = fold;
  for (const auto& e : m.entries) (e.fold == fold ? s.eval : s.train).push_back(e.id);
  // Shuffle a copy of the training ids and hold out the first share for
  // predictor validation.
  std::vector<std::int64_t> ids = s.train;
  Rng rng(stream("split.val", fold));
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::lround(cfg_.val_fraction * static_cast<double>(ids.size())));
  s.predictor_val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, ids.size())));
  s.predictor_train.assign(ids.begin() + static_cast<std::ptrdiff_t>(s.predictor_val.size()), ids.end());
  std::sort(s.predictor_val.begin(), s.predictor_val.end());
  std::sort(s.predictor_train.begin(), s.predictor_train.end());
  return s;
}

std::vector<LabeledVolume> Pipeline::labeled(const std::vector<std::int64_t>& ids, const Manifest& m) const {
  std::vector<LabeledVolume> out;
  for (auto id : ids) out.push_back({to_network(read_image(m, id)), m.entry(id).slice_labels});
  return out;
}

void Pipeline::train_ae(int fold, bool resume) {
  const fs::path ckpt = fold_dir(fold) / "ae.fsg";
  if (cfg_.identity_latent) {
    log("train-ae: identity latent mode, nothing to train");
    return;
  }
  const Manifest m = manifest();
  const FoldSplit s = split(fold);
  std::vector<Tensor> volumes;
  for (auto id : s.train) volumes.push_back(to_network(read_image(m, id)));
  NamedTensors prior;
  if (resume) prior = require_checkpoint(ckpt, "autoencoder");
  std::vector<TrainPoint> points;
  Autoencoder ae = train_autoencoder(volumes, cfg_.ae, stream("train.ae", fold),
                                     [&](const TrainPoint& p) { points.push_back(p); }, resume ? &prior : nullptr);
  fs::create_directories(fold_dir(fold));
  auto state = ae.state();
  append_state(state, ae.params());
  write_checkpoint(ckpt, state);
  write_text(fold_dir(fold) / (resume ? "ae_log_resumed.csv" : "ae_log.csv"), train_log_csv(points));
  log("train-ae fold " + std::to_string(fold) + ": " + std::to_string(points.size()) + " steps, train MSE " +
      fmt_float(reconstruction_mse(ae, volumes)));
}

void Pipeline::train_flow(int fold, bool resume) {
  const Manifest m = manifest();
  const FoldSplit s = split(fold);
  const Autoencoder ae = load_autoencoder(fold);
  std::vector<Tensor> latents;
  {
    NoGradGuard ng;
    for (auto id : s.train) latents.push_back(ae.encode(to_network(read_image(m, id))));
  }
  const fs::path ckpt = fold_dir(fold) / "flow.fsg";
  NamedTensors prior;
  if (resume) prior = require_checkpoint(ckpt, "flow");
  std::vector<TrainPoint> points;
  VelocityField v = flowseg::train_flow(latents, cfg_.flow, stream("train.flow", fold),
                               [&](const TrainPoint& p) { points.push_back(p); }, resume ? &prior : nullptr);
  fs::create_directories(fold_dir(fold));
  auto state = v.state();
  append_state(state, v.params());
  write_checkpoint(ckpt, state);
  write_text(fold_dir(fold) / (resume ? "flow_log_resumed.csv" : "flow_log.csv"), train_log_csv(points));
  log("train-flow fold " + std::to_string(fold) + ": " + std::to_string(points.size()) + " steps");
}

void Pipeline::train_predictor(int fold, bool resume) {
  const Manifest m = manifest();
  const FoldSplit s = split(fold);
  const fs::path state_path = fold_dir(fold) / "predictor_state.fsg";
  NamedTensors prior;
  if (resume) prior = require_checkpoint(state_path, "predictor state");
  CsvWriter csv({"iteration", "loss", "val_F1"});
  auto res = flowseg::train_predictor(labeled(s.predictor_train, m), labeled(s.predictor_val, m), cfg_.predictor,
                                      cfg_.augmentation, stream("train.predictor", fold), {},
                                      resume ? &prior : nullptr);
  for (const auto& r : res.log) csv.row({std::to_string(r.iteration), fmt_float(r.loss, 8), fmt_float(r.val_f1)});
  fs::create_directories(fold_dir(fold));
  write_checkpoint(fold_dir(fold) / "predictor.fsg", res.best.state());
  write_checkpoint(state_path, res.resume_state());
  csv.save(fold_dir(fold) / "predictor_log.csv");
  log("train-predictor fold " + std::to_string(fold) + ": best val F1 " + fmt_float(res.best_f1, 4) + " at iteration " +
      std::to_string(res.best_iteration));
}

void Pipeline::calibrate(int fold, int jobs) {
  if (cfg_.calibration_quantile <= 0.0) return;
  const Manifest m = manifest();
  const FoldSplit s = split(fold);
  const Autoencoder ae = load_autoencoder(fold);
  Rng unused(0);
  VelocityField v(ae.latent_channels(), cfg_.flow, unused);
  v.load(require_checkpoint(fold_dir(fold) / "flow.fsg", "flow (run train-flow first)"));
  v.set_trainable(false);
  const VelocityFn fn = v.fn();
  std::vector<Volume> residuals(s.train.size());
  parallel_for(s.train.size(), jobs, [&](std::size_t i) {
    residuals[i] = unguided_residual(read_image(m, s.train[i]), ae, fn, cfg_.guidance);
  });
  const double theta = calibrate_threshold(residuals, cfg_.calibration_quantile);
  write_text(fold_dir(fold) / "threshold.txt", fmt_float(theta, 6) + "\n");
  log("calibrate fold " + std::to_string(fold) + ": threshold " + fmt_float(theta, 3));
}

Autoencoder Pipeline::load_autoencoder(int fold) const {
  if (cfg_.identity_latent) return Autoencoder::identity();
  Rng unused(0);
  Autoencoder ae(cfg_.ae, unused);
  ae.load(require_checkpoint(fold_dir(fold) / "ae.fsg", "autoencoder (run train-ae first)"));
  return ae;
}

FoldModels Pipeline::load_models(int fold) const {
  Autoencoder ae = load_autoencoder(fold);
  Rng unused(0);
  VelocityField v(ae.latent_channels(), cfg_.flow, unused);
  v.load(require_checkpoint(fold_dir(fold) / "flow.fsg", "flow"));
  Classifier f(cfg_.predictor, unused);
  f.load(require_checkpoint(fold_dir(fold) / "predictor.fsg", "predictor"));
  ae.set_trainable(false);
  v.set_trainable(false);
  f.set_trainable(false);
  return {std::move(ae), std::move(v), std::move(f)};
}

void Pipeline::segment(int fold, Method method, std::optional<std::int64_t> volume, int jobs) {
  const Manifest m = manifest();
  const FoldSplit s = split(fold);
  std::vector<std::int64_t> ids = s.eval;
  if (volume) {
    if (std::find(ids.begin(), ids.end(), *volume) == ids.end()) {
      throw ConfigError("volume " + std::to_string(*volume) + " is not in the eval set of fold " + std::to_string(fold));
    }
    ids = {*volume};
  }
  const FoldModels models = load_models(fold);
  GuidanceConfig guidance = cfg_.guidance;
  if (method == Method::tfg && cfg_.calibration_quantile > 0.0) {
    const fs::path p = fold_dir(fold) / "threshold.txt";
    if (!fs::exists(p)) throw MissingArtifact("calibrated threshold not found: " + p.string() + " (run calibrate first)");
    std::ifstream in(p);
    if (!(in >> guidance.fixed_threshold)) throw FormatError("unreadable threshold in " + p.string());
  }
  const fs::path dir = method_dir(fold, method);
  fs::create_directories(dir / "panels");
  const auto dims = cfg_.phantom.dims;

  std::vector<GuidanceRecord> records(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t n) {
    const std::int64_t id = ids[n];
    const Volume x = read_image(m, id);
    if (x.dims != dims) {
      throw ShapeError("volume " + std::to_string(id) + " has dims " + std::to_string(x.dims[0]) + "x" +
                       std::to_string(x.dims[1]) + "x" + std::to_string(x.dims[2]) +
                       " but the models were configured for phantom.dims");
    }
    const Volume gt = read_mask(m, id);
    const std::string stem = volume_stem(id);
    std::vector<std::int64_t> panel_slices;
    for (std::int64_t k = 0; k < x.dims[2]; ++k) {
      if (m.entry(id).slice_labels[static_cast<std::size_t>(k)]) panel_slices.push_back(k);
    }
    if (method == Method::tfg) {
      const SegmentationResult r = tfg_segment(x, {models.ae, models.flow.fn(), models.clf}, guidance);
      write_volume(dir / (stem + "_mask.fsvl"), r.mask);
      write_volume(dir / (stem + "_residual.fsvl"), r.residual);
      write_volume(dir / (stem + "_counterfactual.fsvl"), r.counterfactual);
      write_text(dir / (stem + "_trace.csv"), trace_csv(r.trace));
      write_slice_panels(dir / "panels", stem,
                         {{&x, true}, {&r.counterfactual, true}, {&r.residual, false}, {&r.mask, false}, {&gt, false}},
                         panel_slices);
      records[n] = {id, m.entry(id).nodule_count, r.trace.guided_slices.size(), r.trace.prob_before,
                    r.trace.prob_after, r.guidance_skipped};
    } else {
      const auto maps = volume_attribution(models.clf, to_network(x),
                                           method == Method::cam ? AttributionMethod::cam : AttributionMethod::grad_cam,
                                           cfg_.guidance.guided_slice_threshold);
      const Volume heat = attribution_volume(maps, x);
      const Volume mask = attribution_mask(maps, x, cfg_.cam_threshold);
      write_volume(dir / (stem + "_mask.fsvl"), mask);
      write_volume(dir / (stem + "_heatmap.fsvl"), heat);
      write_slice_panels(dir / "panels", stem, {{&x, true}, {&heat, false}, {&mask, false}, {&gt, false}},
                         panel_slices);
    }
  });

  if (method == Method::tfg) {
    // Merge with records of volumes segmented earlier so single-volume runs
    // accumulate instead of overwriting.
    const fs::path csv_path = dir / "guidance.csv";
    std::vector<GuidanceRecord> all = fs::exists(csv_path) ? read_guidance_records(csv_path) : std::vector<GuidanceRecord>{};
    for (const auto& r : records) {
      all.erase(std::remove_if(all.begin(), all.end(), [&](const GuidanceRecord& o) { return o.volume_id == r.volume_id; }),
                all.end());
      all.push_back(r);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.volume_id < b.volume_id; });
    CsvWriter csv({"volume_id", "nodules", "guided_slices", "prob_before", "prob_after", "skipped"});
    for (const auto& r : all) {
      csv.row({std::to_string(r.volume_id), std::to_string(r.nodules), std::to_string(r.guided_slices),
               fmt_float(r.prob_before, 8), fmt_float(r.prob_after, 8), r.skipped ? "1" : "0"});
    }
    csv.save(csv_path);
  }
  log("segment fold " + std::to_string(fold) + " " + method_name(method) + ": " + std::to_string(ids.size()) +
      " volume(s)");
}

ConfusionCounts Pipeline::predictor_eval(int fold) const {
  const Manifest m = manifest();
  const FoldSplit s = split(fold);
  const FoldModels models = load_models(fold);
  std::vector<float> probs;
  std::vector<int> labels;
  for (auto id : s.eval) {
    const auto p = volume_predictions(models.clf, to_network(read_image(m, id)));
    probs.insert(probs.end(), p.begin(), p.end());
    const auto& l = m.entry(id).slice_labels;
    labels.insert(labels.end(), l.begin(), l.end());
  }
  const ConfusionCounts c = confusion(probs, labels, cfg_.predictor.threshold);
  CsvWriter csv({"fold", "tp", "fp", "fn", "tn", "f1"});
  csv.row({std::to_string(fold), std::to_string(c.tp), std::to_string(c.fp), std::to_string(c.fn), std::to_string(c.tn),
           fmt_float(c.f1())});
  csv.save(fold_dir(fold) / "predictor_eval.csv");
  return c;
}

std::vector<MethodSummary> Pipeline::evaluate(const std::vector<Method>& methods) {
  const Manifest m = manifest();
  std::vector<VolumeScore> scores;
  std::vector<std::string> missing;
  for (Method method : methods) {
    for (int fold = 0; fold < cfg_.folds; ++fold) {
      for (const auto& e : m.entries) {
        if (e.fold != fold) continue;
        const fs::path p = method_dir(fold, method) / (volume_stem(e.id) + "_mask.fsvl");
        if (!fs::exists(p)) {
          missing.push_back(p.string());
          continue;
        }
        const Volume pred = read_volume(p);
        const Volume gt = read_mask(m, e.id);
        scores.push_back({method_name(method), fold, e.id, dice(pred, gt), mean_surface_distance(pred, gt)});
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "eval: " + std::to_string(missing.size()) + " segmentation(s) missing:";
    for (const auto& p : missing) msg += "\n  " + p;
    throw MissingArtifact(msg);
  }
  if (scores.empty()) throw MissingArtifact("eval: nothing to score (empty corpus)");
  const auto rows = aggregate(scores);
  fs::create_directories(eval_dir());
  write_text(eval_dir() / "results.csv", results_csv(scores));
  write_text(eval_dir() / "summary.csv", summary_csv(rows));
  write_text(eval_dir() / "table.txt", "Method Mean-DSC(%) Median-MSD(mm)\n" + summary_table(rows));
  return rows;
}

std::vector<MethodSummary> Pipeline::run_all(int jobs) {
  generate_data();
  for (int fold = 0; fold < cfg_.folds; ++fold) {
    train_ae(fold);
    train_flow(fold);
    train_predictor(fold);
    predictor_eval(fold);
    calibrate(fold, jobs);
    for (Method method : all_methods()) segment(fold, method, std::nullopt, jobs);
  }
  return evaluate(all_methods());
}

std::vector<GuidanceRecord> read_guidance_records(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw MissingArtifact("guidance records not found: " + csv.string());
  std::vector<GuidanceRecord> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError("guidance.csv: malformed row '" + line + "'");
    GuidanceRecord r;
    r.volume_id = std::stoll(cells[0]);
    r.nodules = std::stoi(cells[1]);
    r.guided_slices = static_cast<std::size_t>(std::stoull(cells[2]));
    r.prob_before = std::stod(cells[3]);
    r.prob_after = std::stod(cells[4]);
    r.skipped = cells[5] == "1";
    out.push_back(r);
  }
  return out;
}

}  // namespace flowseg

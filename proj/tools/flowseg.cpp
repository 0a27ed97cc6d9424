// Command-line front end: one subcommand per pipeline stage.
//
// Settings are layered: built-in defaults, then --config, then FLOWSEG_SEED,
// then --set key=value and the dedicated flags.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flowseg/pipeline.hpp"

using namespace flowseg;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kNumeric = 4 };

struct Options {
  std::string config_path;
  std::string out;
  std::vector<std::string> overrides;
  bool identity_latent = false;
  std::optional<std::uint64_t> seed;
  int fold = 0;
  bool all_folds = false;
  bool resume = false;
  int jobs = 1;
  std::string method = "tfg";
  std::optional<std::int64_t> volume;
  std::optional<float> s;
  std::vector<std::string> methods;
  std::optional<int> k;
};

RunConfig build_config(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  apply_seed_override(cfg);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.identity_latent) cfg.identity_latent = true;
  if (o.seed) cfg.seed = *o.seed;
  if (o.s) cfg.guidance.s = *o.s;
  if (o.k) cfg.folds = *o.k;
  cfg.validate();
  return cfg;
}

std::vector<int> folds_of(const Options& o, const RunConfig& cfg) {
  if (!o.all_folds) return {o.fold};
  std::vector<int> out;
  for (int k = 0; k < cfg.folds; ++k) out.push_back(k);
  return out;
}

void print_summary(const std::vector<MethodSummary>& rows) {
  std::cout << "Method Mean-DSC(%) Median-MSD(mm)\n" << summary_table(rows);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised nodule segmentation with guided rectified flow"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config_path, "Key-value config file")->check(CLI::ExistingFile);
    c->add_option("--out", o.out, "Output directory (overrides output_dir)");
    c->add_option("--set", o.overrides, "Override one config key, e.g. --set guidance.m=3");
    c->add_flag("--identity-latent", o.identity_latent, "Run the flow on voxels, without an autoencoder");
    c->add_option("--seed", o.seed, "Root seed (overrides config and FLOWSEG_SEED)");
  };
  auto fold_opts = [&](CLI::App* c) {
    c->add_option("--fold", o.fold, "Fold index")->check(CLI::NonNegativeNumber);
    c->add_flag("--all-folds", o.all_folds, "Process every fold");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the phantom corpus");
  common(gen);

  std::vector<std::pair<CLI::App*, void (Pipeline::*)(int, bool)>> trainers;
  struct Trainer {
    const char* name;
    const char* what;
    void (Pipeline::*fn)(int, bool);
  };
  for (const Trainer& t : {Trainer{"train-ae", "autoencoder", &Pipeline::train_ae},
                           Trainer{"train-flow", "velocity field", &Pipeline::train_flow},
                           Trainer{"train-predictor", "slice predictor", &Pipeline::train_predictor}}) {
    auto* c = app.add_subcommand(t.name, std::string("Train a fold's ") + t.what);
    common(c);
    fold_opts(c);
    c->add_flag("--resume", o.resume, "Continue from the existing checkpoint");
    trainers.emplace_back(c, t.fn);
  }

  auto* seg = app.add_subcommand("segment", "Segment a fold's held-out volumes");
  common(seg);
  fold_opts(seg);
  seg->add_option("--method", o.method, "tfg, cam or gradcam")->check(CLI::IsMember({"tfg", "cam", "gradcam"}));
  seg->add_option("--volume", o.volume, "Only this volume id");
  seg->add_option("--s", o.s, "Guidance strength");
  seg->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* cal = app.add_subcommand("calibrate", "Fit a fold's tfg mask threshold on its training volumes");
  common(cal);
  fold_opts(cal);
  cal->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* pe = app.add_subcommand("predictor-eval", "Slice-level F1 of a fold's predictor on its held-out volumes");
  common(pe);
  fold_opts(pe);

  auto* ev = app.add_subcommand("eval", "Score all segmentations and write the result tables");
  common(ev);
  ev->add_option("--methods", o.methods, "Methods to score (default: all)")
      ->check(CLI::IsMember({"tfg", "cam", "gradcam"}));
  ev->add_option("--k", o.k, "Number of folds");

  auto* run = app.add_subcommand("run", "gen-data, training, segmentation and eval for every fold");
  common(run);
  run->add_option("--s", o.s, "Guidance strength");
  run->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    Pipeline p(build_config(o), [](const std::string& msg) { std::cerr << msg << '\n'; });
    if (gen->parsed()) {
      p.generate_data();
    }
    for (auto& [cmd, fn] : trainers) {
      if (!cmd->parsed()) continue;
      for (int fold : folds_of(o, p.config())) (p.*fn)(fold, o.resume);
    }
    if (cal->parsed()) {
      for (int fold : folds_of(o, p.config())) p.calibrate(fold, o.jobs);
    }
    if (seg->parsed()) {
      for (int fold : folds_of(o, p.config())) p.segment(fold, parse_method(o.method), o.volume, o.jobs);
    }
    if (pe->parsed()) {
      for (int fold : folds_of(o, p.config())) {
        const auto c = p.predictor_eval(fold);
        std::cout << "fold " << fold << " F1 " << fmt_float(c.f1(), 4) << '\n';
      }
    }
    if (ev->parsed()) {
      std::vector<Method> methods;
      for (const auto& m : o.methods) methods.push_back(parse_method(m));
      print_summary(p.evaluate(methods.empty() ? all_methods() : methods));
    }
    if (run->parsed()) print_summary(p.run_all(o.jobs));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape mismatch: " << e.what() << '\n';
    return kConfig;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kMissing;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

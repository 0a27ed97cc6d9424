#include "flowseg/config.hpp"

#include <array>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace flowseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

template <typename T, std::size_t N>
std::array<T, N> parse_list(const std::string& key, const std::string& v) {
  std::array<T, N> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated values");
    out[i++] = parse_number<T>(key, trim(item));
  }
  if (i != N) throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated values");
  return out;
}

template <typename T, std::size_t N>
std::string format_list(const std::array<T, N>& a) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + format_number(a[i]);
  return out;
}

struct Entry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Entry number(std::string key, T RunConfig::*field) {
  return {key, [field](const RunConfig& c) { return format_number(c.*field); },
          [key, field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(key, v); }};
}

template <typename S, typename T>
Entry nested(std::string key, S RunConfig::*section, T S::*field) {
  return {key, [section, field](const RunConfig& c) { return format_number(c.*section.*field); },
          [key, section, field](RunConfig& c, const std::string& v) { c.*section.*field = parse_number<T>(key, v); }};
}

template <typename S>
Entry nested_bool(std::string key, S RunConfig::*section, bool S::*field) {
  return {key, [section, field](const RunConfig& c) { return std::string(c.*section.*field ? "true" : "false"); },
          [key, section, field](RunConfig& c, const std::string& v) { c.*section.*field = parse_bool(key, v); }};
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back(number("seed", &RunConfig::seed));
    e.push_back(number("corpus_size", &RunConfig::corpus_size));
    e.push_back(number("folds", &RunConfig::folds));
    e.push_back(number("val_fraction", &RunConfig::val_fraction));
    e.push_back({"output_dir", [](const RunConfig& c) { return c.output_dir; },
                 [](RunConfig& c, const std::string& v) { c.output_dir = v; }});
    e.push_back({"identity_latent", [](const RunConfig& c) { return std::string(c.identity_latent ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.identity_latent = parse_bool("identity_latent", v); }});
    e.push_back(number("cam_threshold", &RunConfig::cam_threshold));
    e.push_back(number("calibration_quantile", &RunConfig::calibration_quantile));

    using P = PhantomConfig;
    e.push_back({"phantom.dims", [](const RunConfig& c) { return format_list(c.phantom.dims); },
                 [](RunConfig& c, const std::string& v) { c.phantom.dims = parse_list<std::int64_t, 3>("phantom.dims", v); }});
    e.push_back({"phantom.spacing", [](const RunConfig& c) { return format_list(c.phantom.spacing); },
                 [](RunConfig& c, const std::string& v) { c.phantom.spacing = parse_list<float, 3>("phantom.spacing", v); }});
    e.push_back(nested("phantom.min_nodules", &RunConfig::phantom, &P::min_nodules));
    e.push_back(nested("phantom.max_nodules", &RunConfig::phantom, &P::max_nodules));
    e.push_back(nested("phantom.min_radius_mm", &RunConfig::phantom, &P::min_radius_mm));
    e.push_back(nested("phantom.max_radius_mm", &RunConfig::phantom, &P::max_radius_mm));
    e.push_back(nested("phantom.min_nodule_hu", &RunConfig::phantom, &P::min_nodule_hu));
    e.push_back(nested("phantom.max_nodule_hu", &RunConfig::phantom, &P::max_nodule_hu));
    e.push_back(nested("phantom.lobed_fraction", &RunConfig::phantom, &P::lobed_fraction));
    e.push_back(nested("phantom.noise_hu", &RunConfig::phantom, &P::noise_hu));

    using A = AeConfig;
    e.push_back(nested("ae.hidden", &RunConfig::ae, &A::hidden));
    e.push_back(nested("ae.latent_channels", &RunConfig::ae, &A::latent_channels));
    e.push_back(nested("ae.steps", &RunConfig::ae, &A::steps));
    e.push_back(nested("ae.batch", &RunConfig::ae, &A::batch));
    e.push_back(nested("ae.lr", &RunConfig::ae, &A::lr));
    e.push_back(nested("ae.target_mse", &RunConfig::ae, &A::target_mse));

    using F = FlowConfig;
    e.push_back(nested("flow.hidden", &RunConfig::flow, &F::hidden));
    e.push_back(nested("flow.steps", &RunConfig::flow, &F::steps));
    e.push_back(nested("flow.batch", &RunConfig::flow, &F::batch));
    e.push_back(nested("flow.lr", &RunConfig::flow, &F::lr));

    using C = PredictorConfig;
    e.push_back(nested("predictor.k", &RunConfig::predictor, &C::k));
    e.push_back(nested("predictor.hidden1", &RunConfig::predictor, &C::hidden1));
    e.push_back(nested("predictor.hidden2", &RunConfig::predictor, &C::hidden2));
    e.push_back(nested("predictor.kernel", &RunConfig::predictor, &C::kernel));
    e.push_back(nested("predictor.iterations", &RunConfig::predictor, &C::iterations));
    e.push_back(nested("predictor.batch", &RunConfig::predictor, &C::batch));
    e.push_back(nested("predictor.lr", &RunConfig::predictor, &C::lr));
    e.push_back(nested("predictor.validate_every", &RunConfig::predictor, &C::validate_every));
    e.push_back(nested("predictor.threshold", &RunConfig::predictor, &C::threshold));

    using Au = AugmentationConfig;
    e.push_back(nested("augment.p_flip", &RunConfig::augmentation, &Au::p_flip));
    e.push_back(nested("augment.p_rotate", &RunConfig::augmentation, &Au::p_rotate));
    e.push_back(nested("augment.p_translate", &RunConfig::augmentation, &Au::p_translate));
    e.push_back(nested("augment.p_zoom", &RunConfig::augmentation, &Au::p_zoom));
    e.push_back(nested("augment.max_rotation_deg", &RunConfig::augmentation, &Au::max_rotation_deg));
    e.push_back(nested("augment.max_translation", &RunConfig::augmentation, &Au::max_translation));
    e.push_back(nested("augment.zoom_min", &RunConfig::augmentation, &Au::zoom_min));
    e.push_back(nested("augment.zoom_max", &RunConfig::augmentation, &Au::zoom_max));

    using G = GuidanceConfig;
    e.push_back(nested("guidance.s", &RunConfig::guidance, &G::s));
    e.push_back(nested("guidance.T", &RunConfig::guidance, &G::T));
    e.push_back(nested("guidance.tau", &RunConfig::guidance, &G::tau));
    e.push_back(nested("guidance.m", &RunConfig::guidance, &G::m));
    e.push_back(nested("guidance.y", &RunConfig::guidance, &G::y));
    e.push_back(nested("guidance.slice_threshold", &RunConfig::guidance, &G::guided_slice_threshold));
    e.push_back(nested_bool("guidance.recompute_slices", &RunConfig::guidance, &G::recompute_slices));
    e.push_back(nested_bool("guidance.smooth_residual", &RunConfig::guidance, &G::smooth_residual));
    e.push_back(nested("guidance.fixed_threshold", &RunConfig::guidance, &G::fixed_threshold));
    return e;
  }();
  return entries;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : registry()) {
    if (e.key == key) return e;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(corpus_size >= 0, "corpus_size must be >= 0");
  need(folds >= 2, "folds must be >= 2");
  need(corpus_size == 0 || corpus_size >= folds, "corpus_size must be at least the number of folds");
  need(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must lie in (0, 1)");
  need(!output_dir.empty(), "output_dir must not be empty");
  need(calibration_quantile >= 0.0 && calibration_quantile <= 1.0, "calibration_quantile must lie in [0, 1]");
  need(cam_threshold >= 0.0f && cam_threshold <= 1.0f, "cam_threshold must lie in [0, 1]");
  for (auto d : phantom.dims) need(d > 0, "phantom.dims must be positive");
  for (auto s : phantom.spacing) need(s > 0.0f, "phantom.spacing must be positive");
  need(phantom.min_nodules >= 0 && phantom.min_nodules <= phantom.max_nodules, "phantom nodule counts out of order");
  need(phantom.min_radius_mm > 0.0f && phantom.min_radius_mm <= phantom.max_radius_mm, "phantom radii out of order");
  if (!identity_latent) {
    for (auto d : phantom.dims) need(d % 4 == 0, "phantom.dims must be divisible by 4 for the autoencoder");
  }
  need(ae.steps >= 0 && ae.batch > 0 && ae.lr > 0.0f, "ae training settings must be positive");
  need(flow.steps >= 0 && flow.batch > 0 && flow.lr > 0.0f && flow.hidden > 0, "flow settings must be positive");
  need(predictor.k >= 1 && predictor.k % 2 == 1, "predictor.k must be odd");
  need(predictor.iterations > 0 && predictor.batch > 0 && predictor.validate_every > 0 && predictor.lr > 0.0f,
       "predictor training settings must be positive");
  need(augmentation.zoom_min > 0.0 && augmentation.zoom_min <= augmentation.zoom_max, "augment zoom range invalid");
  try {
    guidance.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : registry()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& e : registry()) out.push_back(e.key);
  return out;
}

void apply_seed_override(RunConfig& cfg) {
  if (const char* s = std::getenv("FLOWSEG_SEED")) {
    try {
      cfg.seed = parse_number<std::uint64_t>("FLOWSEG_SEED", trim(s));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("environment: ") + e.what());
    }
  }
}

}  // namespace flowseg

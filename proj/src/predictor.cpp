#include "flowseg/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "flowseg/layers.hpp"
#include "flowseg/ops.hpp"

namespace flowseg {

namespace {

void check_volume(const Tensor& v) {
  if (v.rank() != 5 || v.dim(0) != 1 || v.dim(1) != 1) {
    throw ShapeError("expected a [1,1,H,W,D] volume, got " + shape_str(v.shape()));
  }
}

void check_k(int k) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("2.5D stack size must be odd and positive, got " + std::to_string(k));
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

std::vector<std::int64_t> slab_indices(std::int64_t depth, std::int64_t center, int k) {
  check_k(k);
  if (center < 0 || center >= depth) throw std::out_of_range("slab center " + std::to_string(center) + " out of range");
  std::vector<std::int64_t> idx;
  for (int j = -(k - 1) / 2; j <= (k - 1) / 2; ++j) idx.push_back(std::clamp<std::int64_t>(center + j, 0, depth - 1));
  return idx;
}

Slab2p5D stack_25d(const Tensor& volume, std::int64_t center, int k) {
  check_volume(volume);
  const std::int64_t H = volume.dim(2), W = volume.dim(3), D = volume.dim(4);
  const auto idx = slab_indices(D, center, k);
  std::vector<float> data(static_cast<std::size_t>(k * H * W));
  for (int c = 0; c < k; ++c) {
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t j = 0; j < W; ++j) {
        data[static_cast<std::size_t>((c * H + i) * W + j)] = volume.at((i * W + j) * D + idx[static_cast<std::size_t>(c)]);
      }
    }
  }
  return {Tensor({1, k, H, W, 1}, std::move(data)), center, k};
}

Tensor stack_25d_batch(const Tensor& volume, const std::vector<std::int64_t>& centers, int k) {
  check_volume(volume);
  if (centers.empty()) throw std::invalid_argument("stack_25d_batch: no centers");
  const std::int64_t D = volume.dim(4);
  std::vector<Tensor> slices(static_cast<std::size_t>(D));
  auto get = [&](std::int64_t d) -> const Tensor& {
    auto& s = slices[static_cast<std::size_t>(d)];
    if (!s.defined()) s = ops::slice(volume, 4, d, 1);
    return s;
  };
  std::vector<Tensor> parts;
  for (auto c : centers) {
    for (auto d : slab_indices(D, c, k)) parts.push_back(get(d));
  }
  const Tensor stacked = ops::concat_channels(parts);
  return ops::reshape(stacked, {static_cast<std::int64_t>(centers.size()), k, volume.dim(2), volume.dim(3), 1});
}

Classifier::Classifier(const PredictorConfig& cfg, Rng& rng) : cfg_(cfg) {
  check_k(cfg.k);
  const int ks = cfg.kernel;
  add_conv(params_, "clf.conv1", cfg.hidden1, cfg.k, {ks, ks, 1}, rng);
  add_conv(params_, "clf.conv2", cfg.hidden2, cfg.hidden1, {ks, ks, 1}, rng);
  add_conv(params_, "clf.head", 1, cfg.hidden2, {1, 1, 1}, rng);
}

Tensor Classifier::features(const Tensor& slabs) const {
  if (slabs.rank() != 5 || slabs.dim(1) != cfg_.k || slabs.dim(4) != 1) {
    throw ShapeError("classifier: expected [N," + std::to_string(cfg_.k) + ",H,W,1], got " + shape_str(slabs.shape()));
  }
  Tensor h = ops::relu(conv(params_, "clf.conv1", slabs, {2, 2, 1}));
  return ops::relu(conv(params_, "clf.conv2", h, {2, 2, 1}));
}

Tensor Classifier::head(const Tensor& features) const {
  const std::int64_t n = features.dim(0);
  Tensor pooled = ops::reshape(ops::global_avgpool(features), {n, features.dim(1), 1, 1, 1});
  return ops::reshape(conv(params_, "clf.head", pooled), {n});
}

std::vector<float> Classifier::head_weights() const {
  const auto d = params_.tensor("clf.head.w").data();
  return {d.begin(), d.end()};
}

float Classifier::head_bias() const { return params_.tensor("clf.head.b").at(0); }

void Classifier::set_trainable(bool on) {
  if (on) {
    params_.track();
  } else {
    params_.freeze();
  }
}

std::vector<std::pair<std::string, Tensor>> Classifier::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& name : params_.names()) out.emplace_back(name, params_.tensor(name).detach());
  return out;
}

void Classifier::load(const NamedTensors& ckpt) { params_.load(ckpt); }

float predict_slice(const Classifier& f, const Slab2p5D& slab) {
  NoGradGuard ng;
  const float p = sigmoid(f.logits(slab.data).item());
  if (!std::isfinite(p)) throw NumericError("predict_slice: non-finite probability");
  return p;
}

std::vector<float> volume_predictions(const Classifier& f, const Tensor& volume) {
  check_volume(volume);
  NoGradGuard ng;
  std::vector<std::int64_t> centers(static_cast<std::size_t>(volume.dim(4)));
  for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = static_cast<std::int64_t>(i);
  const Tensor logits = f.logits(stack_25d_batch(volume, centers, f.config().k));
  std::vector<float> out;
  for (float l : logits.data()) out.push_back(sigmoid(l));
  return out;
}

AugmentParams draw_augmentation(const AugmentationConfig& aug, std::int64_t height, std::int64_t width, Rng& rng) {
  AugmentParams p;
  p.flip = rng.bernoulli(aug.p_flip);
  if (rng.bernoulli(aug.p_rotate)) p.angle_deg = rng.uniform(-aug.max_rotation_deg, aug.max_rotation_deg);
  if (rng.bernoulli(aug.p_translate)) {
    p.shift_h = rng.uniform(-aug.max_translation, aug.max_translation) * static_cast<double>(height);
    p.shift_w = rng.uniform(-aug.max_translation, aug.max_translation) * static_cast<double>(width);
  }
  if (rng.bernoulli(aug.p_zoom)) p.zoom = rng.uniform(aug.zoom_min, aug.zoom_max);
  return p;
}

Tensor apply_augmentation(const Tensor& slabs, const AugmentParams& p) {
  if (slabs.rank() != 5 || slabs.dim(4) != 1) throw ShapeError("augment: expected [N,C,H,W,1], got " + shape_str(slabs.shape()));
  if (p.is_identity()) return slabs.detach();
  const std::int64_t planes = slabs.dim(0) * slabs.dim(1), H = slabs.dim(2), W = slabs.dim(3);
  const double ch = 0.5 * static_cast<double>(H - 1), cw = 0.5 * static_cast<double>(W - 1);
  const double theta = p.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  std::vector<float> out(static_cast<std::size_t>(slabs.numel()));
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      // Inverse map: undo shift, then rotation and zoom, then the flip.
      const double y = static_cast<double>(i) - ch - p.shift_h;
      const double x = static_cast<double>(j) - cw - p.shift_w;
      const double sy = (cs * y + sn * x) / p.zoom + ch;
      double sx = (-sn * y + cs * x) / p.zoom + cw;
      if (p.flip) sx = static_cast<double>(W - 1) - sx;
      const double cy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
      const double cx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
      const auto y0 = static_cast<std::int64_t>(std::floor(cy)), x0 = static_cast<std::int64_t>(std::floor(cx));
      const std::int64_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double fy = cy - static_cast<double>(y0), fx = cx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < planes; ++c) {
        const float* src = slabs.ptr() + c * H * W;
        const double v = (1 - fy) * ((1 - fx) * src[y0 * W + x0] + fx * src[y0 * W + x1]) +
                         fy * ((1 - fx) * src[y1 * W + x0] + fx * src[y1 * W + x1]);
        out[static_cast<std::size_t>(c * H * W + i * W + j)] = static_cast<float>(v);
      }
    }
  }
  return Tensor(slabs.shape(), std::move(out));
}

Tensor augment(const Tensor& slabs, const AugmentationConfig& aug, Rng& rng) {
  return apply_augmentation(slabs, draw_augmentation(aug, slabs.dim(2), slabs.dim(3), rng));
}

BalancedSampler::BalancedSampler(std::size_t positives, std::size_t negatives)
    : positives_(positives), negatives_(negatives) {
  if (positives == 0 || negatives == 0) {
    throw std::invalid_argument("balanced sampling needs both classes (positives=" + std::to_string(positives) +
                                ", negatives=" + std::to_string(negatives) + ")");
  }
}

std::pair<bool, std::size_t> BalancedSampler::draw(Rng& rng) const {
  const bool pos = rng.bernoulli(0.5);
  return {pos, static_cast<std::size_t>(rng.below(pos ? positives_ : negatives_))};
}

double ConfusionCounts::precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }

double ConfusionCounts::recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }

double ConfusionCounts::f1() const {
  if (tp == 0) return (fp == 0 && fn == 0) ? 1.0 : 0.0;
  const double p = precision(), r = recall();
  return 2.0 * p * r / (p + r);
}

ConfusionCounts confusion(const std::vector<float>& probabilities, const std::vector<int>& labels, float threshold) {
  if (probabilities.size() != labels.size()) throw std::invalid_argument("confusion: size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = probabilities[i] > threshold;
    const bool truth = labels[i] != 0;
    if (pred && truth) ++c.tp;
    if (pred && !truth) ++c.fp;
    if (!pred && truth) ++c.fn;
    if (!pred && !truth) ++c.tn;
  }
  return c;
}

std::vector<std::pair<std::string, Tensor>> PredictorTraining::resume_state() const {
  auto out = last.state();
  for (auto& kv : last.params().optimizer_state()) out.push_back(kv);
  for (auto& [name, t] : best.state()) out.emplace_back("best." + name, t);
  out.emplace_back("best.f1", Tensor::scalar(static_cast<float>(best_f1)));
  out.emplace_back("best.iteration", Tensor::scalar(static_cast<float>(best_iteration)));
  std::vector<float> rows;
  for (const auto& r : log) {
    rows.push_back(static_cast<float>(r.iteration));
    rows.push_back(static_cast<float>(r.loss));
    rows.push_back(static_cast<float>(r.val_f1));
  }
  if (!rows.empty()) out.emplace_back("train.log", Tensor({static_cast<std::int64_t>(log.size()), 3}, rows));
  return out;
}

namespace {

double validation_f1(const Classifier& f, const std::vector<LabeledVolume>& val, float threshold) {
  std::vector<float> probs;
  std::vector<int> labels;
  for (const auto& v : val) {
    auto p = volume_predictions(f, v.image);
    probs.insert(probs.end(), p.begin(), p.end());
    labels.insert(labels.end(), v.labels.begin(), v.labels.end());
  }
  return confusion(probs, labels, threshold).f1();
}

}  // namespace

PredictorTraining train_predictor(const std::vector<LabeledVolume>& train, const std::vector<LabeledVolume>& val,
                                  const PredictorConfig& cfg, const AugmentationConfig& aug, std::uint64_t seed,
                                  const PredictorLogFn& on_log, const NamedTensors* resume) {
  struct Item {
    std::size_t volume;
    std::int64_t slice;
  };
  std::vector<Item> pos, neg;
  for (std::size_t v = 0; v < train.size(); ++v) {
    check_volume(train[v].image);
    if (static_cast<std::int64_t>(train[v].labels.size()) != train[v].image.dim(4)) {
      throw std::invalid_argument("train_predictor: label count does not match volume depth");
    }
    for (std::size_t s = 0; s < train[v].labels.size(); ++s) {
      (train[v].labels[s] ? pos : neg).push_back({v, static_cast<std::int64_t>(s)});
    }
  }
  const BalancedSampler sampler(pos.size(), neg.size());
  if (val.empty()) throw std::invalid_argument("train_predictor: empty validation split");

  Rng init(derive_seed(seed, "clf.init"));
  const Classifier fresh(cfg, init);
  PredictorTraining out{fresh, fresh, -1.0, 0, {}};
  Classifier& f = out.last;
  int start = 1;
  if (resume) {
    f.load(*resume);
    start = static_cast<int>(f.params().load_optimizer_state(*resume)) + 1;
    NamedTensors best;
    for (const auto& [name, t] : *resume) {
      if (name.rfind("best.clf.", 0) == 0) best.emplace(name.substr(5), t);
    }
    out.best.load(best);
    out.best_f1 = checkpoint_get(*resume, "best.f1").item();
    out.best_iteration = static_cast<int>(checkpoint_get(*resume, "best.iteration").item());
    if (auto it = resume->find("train.log"); it != resume->end()) {
      for (std::int64_t r = 0; r < it->second.dim(0); ++r) {
        out.log.push_back({static_cast<int>(it->second.at(3 * r)), it->second.at(3 * r + 1), it->second.at(3 * r + 2)});
      }
    }
  }

  double window_loss = 0.0;
  int window = 0;
  for (int it = start; it <= cfg.iterations; ++it) {
    Rng rng(derive_seed(seed, "clf.batch", static_cast<std::uint64_t>(it)));
    std::vector<Tensor> slabs;
    std::vector<float> targets;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto [is_pos, idx] = sampler.draw(rng);
      const Item& item = is_pos ? pos[idx] : neg[idx];
      slabs.push_back(augment(stack_25d(train[item.volume].image, item.slice, cfg.k).data, aug, rng));
      targets.push_back(is_pos ? 1.0f : 0.0f);
    }
    const Tensor batch = ops::concat_channels(slabs);
    const Tensor x = ops::reshape(batch, {cfg.batch, cfg.k, batch.dim(2), batch.dim(3), 1});
    f.set_trainable(true);
    Tape tape;
    Tensor loss;
    try {
      loss = ops::bce_with_logits(f.logits(x), Tensor({cfg.batch}, targets));
    } catch (const NumericError& e) {
      throw NumericError("train_predictor: iteration " + std::to_string(it) + ": " + e.what());
    }
    adam_step(f.params(), tape.backward(loss), cfg.lr);
    window_loss += loss.item();
    ++window;

    if (it % cfg.validate_every == 0 || it == cfg.iterations) {
      f.set_trainable(false);
      const double f1 = validation_f1(f, val, cfg.threshold);
      PredictorLogRow row{it, window ? window_loss / window : 0.0, f1};
      out.log.push_back(row);
      if (on_log) on_log(row);
      window_loss = 0.0;
      window = 0;
      if (f1 > out.best_f1) {
        out.best_f1 = f1;
        out.best_iteration = it;
        out.best.load(NamedTensors(f.params().named_tensors()));
      }
    }
  }
  f.set_trainable(false);
  out.best.set_trainable(false);
  return out;
}

}  // namespace flowseg

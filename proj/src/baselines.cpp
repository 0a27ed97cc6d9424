#include "flowseg/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flowseg/layers.hpp"
#include "flowseg/ops.hpp"

namespace flowseg {

namespace {

// Channel-weighted relu map of one batch item; accumulation in double so a
// power-of-two rescaling of the weights rescales the map exactly.
AttributionMap weighted_map(const float* feat, std::int64_t C, std::int64_t h, std::int64_t w,
                            const std::vector<float>& weights, std::int64_t H, std::int64_t W) {
  if (static_cast<std::int64_t>(weights.size()) != C) {
    throw ShapeError("attribution: " + std::to_string(weights.size()) + " weights for " + std::to_string(C) +
                     " channels");
  }
  std::vector<float> small(static_cast<std::size_t>(h * w));
  for (std::int64_t p = 0; p < h * w; ++p) {
    double s = 0.0;
    for (std::int64_t c = 0; c < C; ++c) s += static_cast<double>(weights[static_cast<std::size_t>(c)]) * feat[c * h * w + p];
    small[static_cast<std::size_t>(p)] = static_cast<float>(std::max(0.0, s));
  }
  AttributionMap out{H, W, upsample_bilinear(small, h, w, H, W)};
  normalize_min_max(out.values);
  return out;
}

void check_features(const Tensor& features) {
  if (features.rank() != 5 || features.dim(4) != 1) {
    throw ShapeError("attribution: expected [N,C,h,w,1] features, got " + shape_str(features.shape()));
  }
}

Classifier frozen(const Classifier& f) {
  Classifier c = f;
  c.set_trainable(false);
  return c;
}

// Per-item spatial means of d(sum of logits)/d(features). Items do not
// interact, so this is each item's own gradient.
std::vector<std::vector<float>> pooled_gradients(const Classifier& f, const Tensor& slabs, Tensor& features_out) {
  Tensor feats;
  {
    NoGradGuard ng;
    feats = f.features(slabs);
  }
  feats = feats.leaf();
  Tape tape;
  const Tensor g = tape.backward(ops::sum(f.head(feats))).at(feats);
  if (!all_finite(g)) throw NumericError("grad_cam: non-finite gradient");
  const std::int64_t N = feats.dim(0), C = feats.dim(1), hw = feats.dim(2) * feats.dim(3);
  std::vector<std::vector<float>> out(static_cast<std::size_t>(N), std::vector<float>(static_cast<std::size_t>(C)));
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t p = 0; p < hw; ++p) s += g.at((n * C + c) * hw + p);
      out[static_cast<std::size_t>(n)][static_cast<std::size_t>(c)] = static_cast<float>(s / static_cast<double>(hw));
    }
  }
  features_out = feats.detach();
  return out;
}

}  // namespace

std::vector<float> upsample_bilinear(const std::vector<float>& src, std::int64_t h, std::int64_t w, std::int64_t H,
                                     std::int64_t W) {
  if (static_cast<std::int64_t>(src.size()) != h * w || h < 1 || w < 1) throw ShapeError("upsample_bilinear: bad size");
  auto coord = [](std::int64_t o, std::int64_t in, std::int64_t out) {
    const double c = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(c, 0.0, static_cast<double>(in - 1));
  };
  std::vector<float> dst(static_cast<std::size_t>(H * W));
  for (std::int64_t i = 0; i < H; ++i) {
    const double y = coord(i, h, H);
    const auto y0 = static_cast<std::int64_t>(std::floor(y));
    const std::int64_t y1 = std::min(y0 + 1, h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::int64_t j = 0; j < W; ++j) {
      const double x = coord(j, w, W);
      const auto x0 = static_cast<std::int64_t>(std::floor(x));
      const std::int64_t x1 = std::min(x0 + 1, w - 1);
      const double fx = x - static_cast<double>(x0);
      auto at = [&](std::int64_t a, std::int64_t b) { return static_cast<double>(src[static_cast<std::size_t>(a * w + b)]); };
      const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      dst[static_cast<std::size_t>(i * W + j)] = static_cast<float>(v);
    }
  }
  return dst;
}

void normalize_min_max(std::vector<float>& values) {
  if (values.empty()) return;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const float lo = *mn, hi = *mx;
  if (hi == lo) {
    std::fill(values.begin(), values.end(), hi > 0.0f ? 1.0f : 0.0f);
    return;
  }
  for (auto& v : values) v = static_cast<float>((static_cast<double>(v) - lo) / (static_cast<double>(hi) - lo));
}

AttributionMap weighted_feature_map(const Tensor& features, const std::vector<float>& weights, std::int64_t height,
                                    std::int64_t width) {
  check_features(features);
  if (features.dim(0) != 1) throw ShapeError("weighted_feature_map: expected a single item");
  return weighted_map(features.ptr(), features.dim(1), features.dim(2), features.dim(3), weights, height, width);
}

AttributionMap cam(const Classifier& f, const Slab2p5D& slab) {
  NoGradGuard ng;
  const Tensor feats = f.features(slab.data);
  return weighted_feature_map(feats, f.head_weights(), slab.data.dim(2), slab.data.dim(3));
}

std::vector<float> grad_cam_weights(const Classifier& f_in, const Slab2p5D& slab) {
  const Classifier f = frozen(f_in);
  Tensor feats;
  return pooled_gradients(f, slab.data, feats).front();
}

AttributionMap grad_cam(const Classifier& f_in, const Slab2p5D& slab) {
  const Classifier f = frozen(f_in);
  Tensor feats;
  const auto weights = pooled_gradients(f, slab.data, feats).front();
  return weighted_feature_map(feats, weights, slab.data.dim(2), slab.data.dim(3));
}

std::vector<AttributionMap> volume_attribution(const Classifier& f_in, const Tensor& volume, AttributionMethod method,
                                               float slice_threshold) {
  const Classifier f = frozen(f_in);
  const std::int64_t H = volume.dim(2), W = volume.dim(3), D = volume.dim(4);
  const auto probs = volume_predictions(f, volume);
  std::vector<std::int64_t> positive;
  for (std::int64_t k = 0; k < D; ++k) {
    if (probs[static_cast<std::size_t>(k)] > slice_threshold) positive.push_back(k);
  }
  std::vector<AttributionMap> maps(static_cast<std::size_t>(D),
                                   AttributionMap{H, W, std::vector<float>(static_cast<std::size_t>(H * W), 0.0f)});
  if (positive.empty()) return maps;

  const Tensor slabs = [&] {
    NoGradGuard ng;
    return stack_25d_batch(volume, positive, f.config().k);
  }();
  Tensor feats;
  std::vector<std::vector<float>> weights;
  if (method == AttributionMethod::grad_cam) {
    weights = pooled_gradients(f, slabs, feats);
  } else {
    NoGradGuard ng;
    feats = f.features(slabs);
    weights.assign(positive.size(), f.head_weights());
  }
  const std::int64_t C = feats.dim(1), h = feats.dim(2), w = feats.dim(3);
  for (std::size_t n = 0; n < positive.size(); ++n) {
    maps[static_cast<std::size_t>(positive[n])] =
        weighted_map(feats.ptr() + static_cast<std::int64_t>(n) * C * h * w, C, h, w, weights[n], H, W);
  }
  return maps;
}

Volume attribution_volume(const std::vector<AttributionMap>& maps, const Volume& like) {
  const auto [H, W, D] = like.dims;
  if (static_cast<std::int64_t>(maps.size()) != D) throw ShapeError("attribution_volume: one map per slice required");
  Volume out(like.dims, like.spacing);
  for (std::int64_t k = 0; k < D; ++k) {
    const auto& m = maps[static_cast<std::size_t>(k)];
    if (m.height != H || m.width != W) throw ShapeError("attribution_volume: map size differs from slice size");
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t j = 0; j < W; ++j) out.at(i, j, k) = m.values[static_cast<std::size_t>(i * W + j)];
    }
  }
  return out;
}

Volume attribution_mask(const std::vector<AttributionMap>& maps, const Volume& like, float theta) {
  Volume out = attribution_volume(maps, like);
  for (auto& v : out.values) v = v > theta ? 1.0f : 0.0f;
  return out;
}

}  // namespace flowseg

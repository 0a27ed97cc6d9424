#include "flowseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "flowseg/rng.hpp"

namespace flowseg {

namespace {

constexpr int kMaxPlacementAttempts = 100;

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

struct Ellipsoid {
  std::array<float, 3> center{};  // mm
  std::array<float, 3> semi{};    // mm
  bool infinite_axial = false;

  float normalized_radius(const std::array<float, 3>& p) const {
    float r2 = 0.0f;
    for (int a = 0; a < 3; ++a) {
      if (a == 2 && infinite_axial) continue;
      const float d = (p[a] - center[a]) / semi[a];
      r2 += d * d;
    }
    return std::sqrt(r2);
  }

  /// Soft membership with a linear falloff `width` mm wide across the surface.
  float weight(const std::array<float, 3>& p, float width) const {
    float min_semi = infinite_axial ? std::min(semi[0], semi[1]) : std::min({semi[0], semi[1], semi[2]});
    const float dist_inside = (1.0f - normalized_radius(p)) * min_semi;
    return clamp01(dist_inside / width + 0.5f);
  }
};

/// Smooth lattice noise in [-1, 1] with cell size `cell` voxels.
class ValueNoise {
 public:
  ValueNoise(std::array<std::int64_t, 3> dims, float cell, Rng& rng) : cell_(cell) {
    for (int a = 0; a < 3; ++a) n_[a] = static_cast<std::int64_t>(std::ceil(static_cast<float>(dims[a]) / cell)) + 2;
    lattice_.resize(static_cast<std::size_t>(n_[0] * n_[1] * n_[2]));
    for (auto& v : lattice_) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  }

  float at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    const float p[3] = {static_cast<float>(i) / cell_, static_cast<float>(j) / cell_, static_cast<float>(k) / cell_};
    std::int64_t base[3];
    float f[3];
    for (int a = 0; a < 3; ++a) {
      base[a] = static_cast<std::int64_t>(std::floor(p[a]));
      const float t = p[a] - static_cast<float>(base[a]);
      f[a] = t * t * (3.0f - 2.0f * t);
    }
    float acc = 0.0f;
    for (int c = 0; c < 8; ++c) {
      const std::int64_t x = base[0] + (c & 1), y = base[1] + ((c >> 1) & 1), z = base[2] + ((c >> 2) & 1);
      const float w = ((c & 1) ? f[0] : 1 - f[0]) * (((c >> 1) & 1) ? f[1] : 1 - f[1]) * (((c >> 2) & 1) ? f[2] : 1 - f[2]);
      acc += w * lattice_[static_cast<std::size_t>((x * n_[1] + y) * n_[2] + z)];
    }
    return acc;
  }

 private:
  float cell_;
  std::array<std::int64_t, 3> n_{};
  std::vector<float> lattice_;
};

std::array<float, 3> voxel_mm(std::int64_t i, std::int64_t j, std::int64_t k, const std::array<float, 3>& s) {
  return {static_cast<float>(i) * s[0], static_cast<float>(j) * s[1], static_cast<float>(k) * s[2]};
}

/// Soft nodule weight at a point: max over lobes of a 1-voxel linear falloff
/// centered on the lobe surface.
float nodule_weight(const Nodule& n, const std::array<float, 3>& p, const std::array<float, 3>& s, float width) {
  const std::array<float, 3> c = voxel_mm(n.center[0], n.center[1], n.center[2], s);
  float w = 0.0f;
  for (std::size_t l = 0; l < n.lobe_radii.size(); ++l) {
    float d2 = 0.0f;
    for (int a = 0; a < 3; ++a) {
      const float d = p[a] - (c[a] + n.lobe_offsets[l][a]);
      d2 += d * d;
    }
    w = std::max(w, clamp01((n.lobe_radii[l] - std::sqrt(d2)) / width + 0.5f));
  }
  return w;
}

}  // namespace

Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& cfg) {
  for (auto d : cfg.dims) {
    if (d < 16) throw std::invalid_argument("generate_phantom: every extent must be >= 16");
  }
  if (cfg.min_nodules < 0 || cfg.max_nodules < cfg.min_nodules) {
    throw std::invalid_argument("generate_phantom: invalid nodule count range");
  }
  if (cfg.min_radius_mm <= 0 || cfg.max_radius_mm < cfg.min_radius_mm) {
    throw std::invalid_argument("generate_phantom: invalid radius range");
  }

  Rng rng(seed);
  const auto& s = cfg.spacing;
  const float width = std::min({s[0], s[1], s[2]});
  std::array<float, 3> extent{};
  for (int a = 0; a < 3; ++a) extent[a] = static_cast<float>(cfg.dims[a]) * s[a];

  Ellipsoid body;
  body.infinite_axial = true;
  body.center = {extent[0] * 0.5f, extent[1] * 0.5f, extent[2] * 0.5f};
  body.semi = {extent[0] * static_cast<float>(rng.uniform(0.40, 0.45)),
               extent[1] * static_cast<float>(rng.uniform(0.43, 0.47)), extent[2]};

  std::array<Ellipsoid, 2> lungs;
  for (int side = 0; side < 2; ++side) {
    auto& lung = lungs[side];
    const float sign = side == 0 ? -1.0f : 1.0f;
    lung.center = {extent[0] * static_cast<float>(rng.uniform(0.46, 0.52)),
                   extent[1] * (0.5f + sign * static_cast<float>(rng.uniform(0.21, 0.24))),
                   extent[2] * static_cast<float>(rng.uniform(0.47, 0.53))};
    lung.semi = {extent[0] * static_cast<float>(rng.uniform(0.28, 0.32)),
                 extent[1] * static_cast<float>(rng.uniform(0.19, 0.21)),
                 extent[2] * static_cast<float>(rng.uniform(0.36, 0.42))};
  }

  ValueNoise coarse(cfg.dims, 8.0f, rng);
  ValueNoise fine(cfg.dims, 4.0f, rng);

  Phantom p;
  p.seed = seed;
  p.image = Volume(cfg.dims, s, cfg.air_hu);
  p.gt_mask = Volume(cfg.dims, s, 0.0f);

  // Lung membership is needed again when placing nodules.
  Volume lung_weight(cfg.dims, s, 0.0f);
  for (std::int64_t i = 0; i < cfg.dims[0]; ++i) {
    for (std::int64_t j = 0; j < cfg.dims[1]; ++j) {
      for (std::int64_t k = 0; k < cfg.dims[2]; ++k) {
        const auto pos = voxel_mm(i, j, k, s);
        const float noise = cfg.noise_hu * (0.67f * coarse.at(i, j, k) + 0.33f * fine.at(i, j, k));
        const float wb = body.weight(pos, width);
        const float wl = std::max(lungs[0].weight(pos, width), lungs[1].weight(pos, width)) * wb;
        float v = cfg.air_hu + wb * (cfg.body_hu + noise - cfg.air_hu);
        v += wl * (cfg.lung_hu + noise - v);
        p.image.at(i, j, k) = v;
        lung_weight.at(i, j, k) = wl;
      }
    }
  }

  const int count = cfg.min_nodules + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_nodules - cfg.min_nodules + 1)));
  for (int n = 0; n < count; ++n) {
    Nodule nod;
    nod.radius_mm = static_cast<float>(rng.uniform(cfg.min_radius_mm, cfg.max_radius_mm));
    nod.intensity_hu = static_cast<float>(rng.uniform(cfg.min_nodule_hu, cfg.max_nodule_hu));
    if (rng.bernoulli(cfg.lobed_fraction)) {
      const int lobes = 2 + static_cast<int>(rng.below(3));
      for (int l = 0; l < lobes; ++l) {
        const float r = nod.radius_mm * static_cast<float>(rng.uniform(0.55, 0.8));
        std::array<float, 3> dir{static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                                 static_cast<float>(rng.normal())};
        const float len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-6f;
        for (auto& d : dir) d *= (nod.radius_mm - r) / len;
        nod.lobe_offsets.push_back(dir);
        nod.lobe_radii.push_back(r);
      }
    } else {
      nod.lobe_offsets.push_back({0.0f, 0.0f, 0.0f});
      nod.lobe_radii.push_back(nod.radius_mm);
    }

    const float margin = nod.radius_mm + width;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      const auto& lung = lungs[rng.below(2)];
      // Uniform point in the lung ellipsoid shrunk by the nodule extent.
      std::array<float, 3> u{};
      do {
        for (auto& c : u) c = static_cast<float>(rng.uniform(-1.0, 1.0));
      } while (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 1.0f);
      for (int a = 0; a < 3; ++a) {
        const float pos = lung.center[a] + u[a] * std::max(lung.semi[a] - margin, 0.0f);
        nod.center[a] = std::clamp<std::int64_t>(std::llround(pos / s[a]), 0, cfg.dims[a] - 1);
      }
      bool ok = true;
      for (const auto& other : p.nodules) {
        float d2 = 0.0f;
        for (int a = 0; a < 3; ++a) {
          const float d = static_cast<float>(nod.center[a] - other.center[a]) * s[a];
          d2 += d * d;
        }
        if (std::sqrt(d2) < nod.radius_mm + other.radius_mm + 2.0f * width) ok = false;
      }
      // Every voxel the nodule touches must be fully inside lung.
      std::array<std::int64_t, 3> lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        const auto reach = static_cast<std::int64_t>(std::ceil(margin / s[a]));
        lo[a] = nod.center[a] - reach;
        hi[a] = nod.center[a] + reach;
        if (lo[a] < 0 || hi[a] >= cfg.dims[a]) ok = false;
      }
      for (std::int64_t i = lo[0]; ok && i <= hi[0]; ++i) {
        for (std::int64_t j = lo[1]; ok && j <= hi[1]; ++j) {
          for (std::int64_t k = lo[2]; ok && k <= hi[2]; ++k) {
            if (nodule_weight(nod, voxel_mm(i, j, k, s), s, width) > 0.0f && lung_weight.at(i, j, k) < 1.0f) ok = false;
          }
        }
      }
      placed = ok;
    }
    if (!placed) {
      throw PlacementError("generate_phantom: could not place nodule " + std::to_string(n) + " inside lung after " +
                           std::to_string(kMaxPlacementAttempts) + " attempts");
    }

    const auto reach = static_cast<std::int64_t>(std::ceil(margin / width));
    for (std::int64_t i = std::max<std::int64_t>(0, nod.center[0] - reach); i <= std::min(cfg.dims[0] - 1, nod.center[0] + reach); ++i) {
      for (std::int64_t j = std::max<std::int64_t>(0, nod.center[1] - reach); j <= std::min(cfg.dims[1] - 1, nod.center[1] + reach); ++j) {
        for (std::int64_t k = std::max<std::int64_t>(0, nod.center[2] - reach); k <= std::min(cfg.dims[2] - 1, nod.center[2] + reach); ++k) {
          const float w = nodule_weight(nod, voxel_mm(i, j, k, s), s, width);
          if (w <= 0.0f) continue;
          float& v = p.image.at(i, j, k);
          v += w * (nod.intensity_hu - v);
          if (w >= 0.5f) p.gt_mask.at(i, j, k) = 1.0f;
        }
      }
    }
    p.nodules.push_back(std::move(nod));
  }
  return p;
}

Volume preprocess(const Volume& hu) {
  Volume out(hu.dims, hu.spacing);
  for (std::size_t i = 0; i < hu.values.size(); ++i) {
    const float c = std::clamp(hu.values[i], -1000.0f, 1000.0f);
    out.values[i] = (c + 1000.0f) * (255.0f / 2000.0f);
  }
  return out;
}

std::vector<SliceLabel> slice_labels(const Volume& mask) {
  std::vector<SliceLabel> labels(static_cast<std::size_t>(mask.dims[2]));
  for (std::int64_t k = 0; k < mask.dims[2]; ++k) labels[k].slice = k;
  for (std::int64_t i = 0; i < mask.dims[0]; ++i) {
    for (std::int64_t j = 0; j < mask.dims[1]; ++j) {
      for (std::int64_t k = 0; k < mask.dims[2]; ++k) {
        if (mask.at(i, j, k) > 0.5f) labels[k].label = 1;
      }
    }
  }
  return labels;
}

std::vector<SliceLabel> slice_labels(const Phantom& p) {
  if (p.gt_mask.dims != p.image.dims) throw ShapeError("slice_labels: mask and image dims differ");
  return slice_labels(p.gt_mask);
}

std::vector<Fold> make_folds(std::int64_t n, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: need k >= 2");
  if (n < k) throw std::invalid_argument("make_folds: n=" + std::to_string(n) + " is smaller than k=" + std::to_string(k));
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(ids[i], ids[rng.below(static_cast<std::uint64_t>(i + 1))]);
  }
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  std::int64_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const std::int64_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].eval.assign(ids.begin() + pos, ids.begin() + pos + size);
    std::sort(folds[f].eval.begin(), folds[f].eval.end());
    pos += size;
  }
  for (int f = 0; f < k; ++f) {
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      folds[f].train.insert(folds[f].train.end(), folds[g].eval.begin(), folds[g].eval.end());
    }
    std::sort(folds[f].train.begin(), folds[f].train.end());
  }
  return folds;
}

}  // namespace flowseg

#include "flowseg/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flowseg/layers.hpp"
#include "flowseg/ops.hpp"
#include "flowseg/persistence.hpp"

namespace flowseg {

namespace {

double mean_sigmoid(const Tensor& logits) {
  double s = 0.0;
  for (float l : logits.data()) s += 1.0 / (1.0 + std::exp(-static_cast<double>(l)));
  return s / static_cast<double>(logits.numel());
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (float x : t.data()) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

Volume abs_diff(const Volume& a, const Volume& b) {
  Volume out(a.dims, a.spacing);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::abs(a.values[i] - b.values[i]);
  return out;
}

// Frozen copies share parameter storage but never record onto a tape.
Autoencoder frozen(const Autoencoder& ae) {
  Autoencoder c = ae;
  c.set_trainable(false);
  return c;
}

Classifier frozen(const Classifier& f) {
  Classifier c = f;
  c.set_trainable(false);
  return c;
}

}  // namespace

void GuidanceConfig::validate() const {
  if (T < 1) throw std::invalid_argument("guidance: T must be positive");
  if (tau < 0 || m < 0 || tau + m > T) {
    throw std::invalid_argument("guidance: need 0 <= tau and tau + m <= T (tau=" + std::to_string(tau) +
                                ", m=" + std::to_string(m) + ", T=" + std::to_string(T) + ")");
  }
  if (!(s >= 0.0f)) throw std::invalid_argument("guidance: s must be >= 0");
}

Tensor clean_estimate(const VelocityFn& v, const Tensor& z, int t, const TimeGrid& grid) {
  if (t < 0 || t > grid.T) throw std::out_of_range("clean_estimate: step " + std::to_string(t) + " outside [0, T]");
  const float u = grid.u(t);
  const Tensor vel = v(z, std::vector<float>(static_cast<std::size_t>(z.dim(0)), u));
  return ops::add(z, ops::scale(vel, 1.0f - u));
}

Tensor guidance_update(const Tensor& z, const Tensor& grad, float s) {
  if (z.shape() != grad.shape()) {
    throw ShapeError("guidance_update: " + shape_str(z.shape()) + " vs " + shape_str(grad.shape()));
  }
  if (!all_finite(grad)) throw NumericError("guidance_update: non-finite gradient");
  return ops::sub(z, ops::scale(grad, s));
}

std::vector<std::int64_t> select_guided_slices(const Classifier& f, const Tensor& volume, float threshold) {
  const auto probs = volume_predictions(f, volume);
  std::vector<std::int64_t> out;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (probs[k] > threshold) out.push_back(static_cast<std::int64_t>(k));
  }
  return out;
}

Threshold fixed_threshold(const Volume& residual, double theta) {
  Threshold out{theta, Volume(residual.dims, residual.spacing)};
  for (std::size_t i = 0; i < residual.values.size(); ++i) out.mask.values[i] = residual.values[i] > theta ? 1.0f : 0.0f;
  return out;
}

Threshold otsu_threshold(const Volume& residual) {
  constexpr int kBins = 256;
  float lo = 0.0f, hi = 0.0f;
  bool any = false;
  for (float r : residual.values) {
    if (r == 0.0f) continue;
    lo = any ? std::min(lo, r) : r;
    hi = any ? std::max(hi, r) : r;
    any = true;
  }
  if (!any || lo == hi) return fixed_threshold(residual, 0.0);

  const double width = (static_cast<double>(hi) - lo) / kBins;
  auto bin = [&](float r) {
    return std::min(kBins - 1, static_cast<int>((static_cast<double>(r) - lo) / width));
  };
  std::vector<double> hist(kBins, 0.0);
  double total = 0.0, total_sum = 0.0;
  for (float r : residual.values) {
    if (r == 0.0f) continue;
    hist[static_cast<std::size_t>(bin(r))] += 1.0;
  }
  for (int k = 0; k < kBins; ++k) {
    total += hist[static_cast<std::size_t>(k)];
    total_sum += hist[static_cast<std::size_t>(k)] * (lo + (k + 0.5) * width);
  }

  int best = 0;
  double best_var = -1.0, w0 = 0.0, s0 = 0.0;
  for (int k = 0; k + 1 < kBins; ++k) {
    w0 += hist[static_cast<std::size_t>(k)];
    s0 += hist[static_cast<std::size_t>(k)] * (lo + (k + 0.5) * width);
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double d = s0 / w0 - (total_sum - s0) / w1;
    const double var = w0 * w1 * d * d;
    if (var > best_var) {
      best_var = var;
      best = k;
    }
  }

  // Membership goes by bin so a voxel sitting exactly on the edge lands on
  // the same side it was counted on.
  Threshold out{lo + (best + 1) * width, Volume(residual.dims, residual.spacing)};
  for (std::size_t i = 0; i < residual.values.size(); ++i) {
    const float r = residual.values[i];
    out.mask.values[i] = (r != 0.0f && bin(r) > best) ? 1.0f : 0.0f;
  }
  return out;
}

Volume box_smooth(const Volume& v) {
  Volume out(v.dims, v.spacing);
  const auto [H, W, D] = v.dims;
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      for (std::int64_t k = 0; k < D; ++k) {
        double s = 0.0;
        int n = 0;
        for (std::int64_t a = std::max<std::int64_t>(0, i - 1); a <= std::min(H - 1, i + 1); ++a) {
          for (std::int64_t b = std::max<std::int64_t>(0, j - 1); b <= std::min(W - 1, j + 1); ++b) {
            for (std::int64_t c = std::max<std::int64_t>(0, k - 1); c <= std::min(D - 1, k + 1); ++c) {
              s += v.at(a, b, c);
              ++n;
            }
          }
        }
        out.at(i, j, k) = static_cast<float>(s / n);
      }
    }
  }
  return out;
}

Threshold threshold_residual(const Volume& residual, const GuidanceConfig& cfg) {
  const Volume r = cfg.smooth_residual ? box_smooth(residual) : residual;
  return cfg.fixed_threshold >= 0.0f ? fixed_threshold(r, cfg.fixed_threshold) : otsu_threshold(r);
}

Volume reconstruct(const Volume& x, const Autoencoder& ae_in, const VelocityFn& v, const GuidanceConfig& cfg) {
  cfg.validate();
  const TimeGrid grid{cfg.T};
  const Autoencoder ae = frozen(ae_in);
  NoGradGuard ng;
  Tensor z = invert(v, ae.encode(to_network(x)), cfg.tau, grid);
  z = integrate(v, z, cfg.tau, grid);
  return from_network(ae.decode(z), x);
}

SegmentationResult tfg_segment(const Volume& x, const GuidanceModels& models, const GuidanceConfig& cfg) {
  cfg.validate();
  const TimeGrid grid{cfg.T};
  const Autoencoder ae = frozen(models.ae);
  const Classifier f = frozen(models.f);
  const VelocityFn& v = models.v;
  const int k = f.config().k;

  SegmentationResult res;
  const Tensor xn = to_network(x);
  std::vector<std::int64_t> slices = select_guided_slices(f, xn, cfg.guided_slice_threshold);
  res.trace.guided_slices = slices;
  res.guidance_skipped = slices.empty();

  auto probe = [&](const Tensor& z, int t) {
    NoGradGuard ng;
    const Tensor x_hat = ae.decode(clean_estimate(v, z, t, grid));
    return mean_sigmoid(f.logits(stack_25d_batch(x_hat, slices, k)));
  };

  Tensor z;
  {
    NoGradGuard ng;
    z = ae.encode(xn);
    for (int t = cfg.T; t > cfg.tau; --t) {
      try {
        z = backward_euler_step(v, z, t, grid);
      } catch (const NumericError& e) {
        throw NumericError("tfg_segment: inversion step " + std::to_string(t) + ": " + e.what());
      }
    }
  }
  const int guided_end = cfg.tau + cfg.m;
  for (int t = cfg.tau; t < cfg.T; ++t) {
    try {
      if (!res.guidance_skipped && t == guided_end && !slices.empty()) res.trace.prob_after = probe(z, t);
      if (!res.guidance_skipped && t < guided_end && !slices.empty()) {
        Tensor z_hat;
        {
          NoGradGuard ng;
          z_hat = clean_estimate(v, z, t, grid).leaf();
        }
        Tape tape;
        const Tensor x_hat = ae.decode(z_hat);
        if (cfg.recompute_slices) {
          NoGradGuard ng;
          slices = select_guided_slices(f, x_hat.detach(), cfg.guided_slice_threshold);
        }
        if (!slices.empty()) {
          const Tensor logits = f.logits(stack_25d_batch(x_hat, slices, k));
          const Tensor loss =
              ops::bce_with_logits(logits, Tensor::full({static_cast<std::int64_t>(slices.size())}, cfg.y));
          const Tensor grad = tape.backward(loss).at(z_hat);
          GuidanceStep step{t, l2_norm(grad), loss.item(), mean_sigmoid(logits)};
          if (res.trace.steps.empty()) res.trace.prob_before = step.mean_prob;
          res.trace.steps.push_back(step);
          z = guidance_update(z, grad, cfg.s);
        }
      }
      NoGradGuard ng;
      z = forward_euler_step(v, z, t, grid);
    } catch (const NumericError& e) {
      throw NumericError("tfg_segment: step " + std::to_string(t) + ": " + e.what());
    }
  }
  if (!res.guidance_skipped && guided_end == cfg.T && !slices.empty() && !res.trace.steps.empty()) {
    res.trace.prob_after = probe(z, cfg.T);
  }

  {
    NoGradGuard ng;
    res.counterfactual = from_network(ae.decode(z), x);
  }
  res.residual = abs_diff(res.counterfactual, x);
  Threshold th = threshold_residual(res.residual, cfg);
  res.threshold = th.value;
  res.mask = std::move(th.mask);
  // Without guidance the residual is pure reconstruction error, so nothing
  // in it marks a nodule.
  if (res.guidance_skipped) std::fill(res.mask.values.begin(), res.mask.values.end(), 0.0f);
  return res;
}

Volume unguided_residual(const Volume& x, const Autoencoder& ae, const VelocityFn& v, const GuidanceConfig& cfg) {
  Volume r = abs_diff(reconstruct(x, ae, v, cfg), x);
  return cfg.smooth_residual ? box_smooth(r) : r;
}

double calibrate_threshold(const std::vector<Volume>& residuals, double q) {
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("calibrate_threshold: q outside [0, 1]");
  std::vector<float> pooled;
  for (const Volume& r : residuals) pooled.insert(pooled.end(), r.values.begin(), r.values.end());
  if (pooled.empty()) throw std::invalid_argument("calibrate_threshold: no voxels");
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(pooled.size() - 1)));
  std::nth_element(pooled.begin(), pooled.begin() + static_cast<std::ptrdiff_t>(idx), pooled.end());
  return pooled[idx];
}

std::string trace_csv(const GuidanceTrace& trace) {
  CsvWriter csv({"step", "grad_norm", "loss", "mean_prob"});
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& s = trace.steps[i];
    csv.row({std::to_string(i + 1), fmt_float(s.grad_norm), fmt_float(s.loss), fmt_float(s.mean_prob)});
  }
  return csv.str();
}

void write_slice_panels(const std::filesystem::path& dir, const std::string& stem, const std::vector<Panel>& panels,
                        const std::vector<std::int64_t>& slices) {
  if (panels.empty()) return;
  const auto dims = panels.front().volume->dims;
  std::vector<float> scale;
  for (const auto& p : panels) {
    if (p.volume->dims != dims) throw ShapeError("write_slice_panels: panels differ in size");
    float mx = 0.0f;
    for (float x : p.volume->values) mx = std::max(mx, x);
    scale.push_back(p.display_units ? 1.0f : (mx > 0.0f ? 255.0f / mx : 0.0f));
  }
  const std::int64_t H = dims[0], W = dims[1], width = W * static_cast<std::int64_t>(panels.size());
  std::filesystem::create_directories(dir);
  for (std::int64_t k : slices) {
    std::vector<std::uint8_t> px(static_cast<std::size_t>(H * width));
    for (std::size_t p = 0; p < panels.size(); ++p) {
      for (std::int64_t i = 0; i < H; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
          const float val = std::clamp(panels[p].volume->at(i, j, k) * scale[p], 0.0f, 255.0f);
          px[static_cast<std::size_t>(i * width + static_cast<std::int64_t>(p) * W + j)] =
              static_cast<std::uint8_t>(std::lround(val));
        }
      }
    }
    write_pgm(dir / (stem + "_z" + std::to_string(k) + ".pgm"), width, H, px);
  }
}

}  // namespace flowseg

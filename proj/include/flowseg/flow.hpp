#pragma once

#include <functional>
#include <vector>

#include "flowseg/latent.hpp"
#include "flowseg/optim.hpp"
#include "flowseg/persistence.hpp"
#include "flowseg/tensor.hpp"

namespace flowseg {

/// Uniform discretization of [0,1] into T steps. Step index t maps to
/// continuous time u = t/T; u = 0 is noise and u = 1 is data.
struct TimeGrid {
  int T = 30;

  double dt() const { return 1.0 / T; }
  float u(int t) const { return static_cast<float>(static_cast<double>(t) / T); }
};

/// A velocity field evaluated on a batch `z` with one time value per item.
using VelocityFn = std::function<Tensor(const Tensor& z, const std::vector<float>& u)>;

struct FlowConfig {
  int hidden = 32;
  int steps = 3000;
  int batch = 4;
  float lr = 5e-4f;
};

/// Three 3x3x3 convs with silu between them. Time enters as an extra input
/// channel filled with u.
class VelocityField {
 public:
  VelocityField(int channels, const FlowConfig& cfg, Rng& rng);

  Tensor operator()(const Tensor& z, const std::vector<float>& u) const;
  Tensor operator()(const Tensor& z, float u) const;
  VelocityFn fn() const;

  int channels() const { return channels_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  void set_trainable(bool on);

  /// Checkpoint tensors under "flow.*".
  std::vector<std::pair<std::string, Tensor>> state() const { return named(params_); }
  void load(const NamedTensors& ckpt) { params_.load(ckpt); }

 private:
  static std::vector<std::pair<std::string, Tensor>> named(const ParamSet& ps);
  int channels_;
  ParamSet params_;
};

/// u * x1 + (1 - u) * x0.
Tensor interpolate(const Tensor& x0, const Tensor& x1, float u);
/// Per-item time: item n of the batch uses u[n].
Tensor interpolate(const Tensor& x0, const Tensor& x1, const std::vector<float>& u);

/// Rectified-flow regression loss on a batch of data latents x1. Draws x0
/// (all elements, row-major) from rng.normal(), then one u per batch item
/// from rng.uniform(), and returns mean((x1 - x0 - v(x_u, u))^2).
Tensor flow_loss(const VelocityFn& v, const Tensor& x1, Rng& rng);

/// z + v(z, t/T) dt, for t in [0, T-1].
Tensor forward_euler_step(const VelocityFn& v, const Tensor& z, int t, const TimeGrid& grid);
/// z - v(z, t/T) dt, for t in [1, T]: explicit Euler run backwards in time.
Tensor backward_euler_step(const VelocityFn& v, const Tensor& z, int t, const TimeGrid& grid);

/// Backward steps t = T, ..., tau + 1, taking a data latent to time tau.
Tensor invert(const VelocityFn& v, const Tensor& z, int tau, const TimeGrid& grid);
/// Forward steps t = from, ..., T - 1.
Tensor integrate(const VelocityFn& v, const Tensor& z, int from, const TimeGrid& grid);
/// T forward steps from noise.
Tensor sample(const VelocityFn& v, const Tensor& noise, const TimeGrid& grid);

/// Adam on flow_loss over minibatches of `latents` ([1,C,h,w,d] each).
/// Batches and noise come from a generator keyed on (seed, step); `resume`
/// continues a partial run bit-exactly.
VelocityField train_flow(const std::vector<Tensor>& latents, const FlowConfig& cfg, std::uint64_t seed,
                         const TrainCallback& on_step = {}, const NamedTensors* resume = nullptr);

}  // namespace flowseg

#pragma once

#include <functional>
#include <vector>

#include "flowseg/optim.hpp"
#include "flowseg/persistence.hpp"
#include "flowseg/tensor.hpp"

namespace flowseg {

struct AeConfig {
  int hidden = 8;
  int latent_channels = 4;
  int steps = 2000;
  int batch = 4;
  float lr = 5e-4f;
  float target_mse = 0.01f;
};

struct TrainPoint {
  int step = 0;
  float loss = 0.0f;
};

/// Deterministic convolutional autoencoder between [N,1,H,W,D] volumes in
/// [-1,1] and [N,4,H/4,W/4,D/4] latents, or the identity map.
///
/// Latents are divided by a scale fitted on training encodings so the flow
/// sees roughly unit-variance inputs.
class Autoencoder {
 public:
  static Autoencoder identity();
  Autoencoder(const AeConfig& cfg, Rng& rng);

  bool is_identity() const { return identity_; }
  int latent_channels() const { return identity_ ? 1 : cfg_.latent_channels; }
  Shape latent_shape(const Shape& x_shape) const;

  Tensor encode(const Tensor& x) const;
  /// Output squashed into [-1,1].
  Tensor decode(const Tensor& z) const;

  float latent_scale() const { return latent_scale_; }
  void set_latent_scale(float s) { latent_scale_ = s; }

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  void set_trainable(bool on);

  /// Checkpoint tensors under "ae.enc.*" / "ae.dec.*".
  std::vector<std::pair<std::string, Tensor>> state() const;
  void load(const NamedTensors& ckpt);

  const AeConfig& config() const { return cfg_; }

 private:
  Autoencoder() = default;
  Tensor encode_raw(const Tensor& x) const;
  Tensor decode_raw(const Tensor& z) const;

  bool identity_ = false;
  AeConfig cfg_;
  ParamSet params_;
  float latent_scale_ = 1.0f;
};

using TrainCallback = std::function<void(const TrainPoint&)>;

/// Adam on mse(decode(encode(x)), x) over random minibatches of `volumes`
/// ([1,1,H,W,D] each, network units). Fits the latent scale afterwards.
/// Throws NumericError naming the step on a non-finite loss.
///
/// Minibatches are drawn from a generator keyed on (seed, step), so passing
/// `resume` (model plus optimizer state from a partial run) continues the
/// same trajectory.
Autoencoder train_autoencoder(const std::vector<Tensor>& volumes, const AeConfig& cfg, std::uint64_t seed,
                              const TrainCallback& on_step = {}, const NamedTensors* resume = nullptr);

/// Mean reconstruction MSE over `volumes` in network units.
double reconstruction_mse(const Autoencoder& ae, const std::vector<Tensor>& volumes);

/// Stacks [1,...] tensors along axis 0.
Tensor stack_batch(const std::vector<Tensor>& items);

}  // namespace flowseg

#include "flowseg/latent.hpp"

#include <cmath>

#include "flowseg/layers.hpp"
#include "flowseg/ops.hpp"

namespace flowseg {

namespace {
constexpr const char* kScaleKey = "ae.enc.latent_scale";
}

Autoencoder Autoencoder::identity() {
  Autoencoder ae;
  ae.identity_ = true;
  return ae;
}

Autoencoder::Autoencoder(const AeConfig& cfg, Rng& rng) : cfg_(cfg) {
  const int h = cfg.hidden;
  const int c = cfg.latent_channels;
  add_conv(params_, "ae.enc.down1", h, 1, {3, 3, 3}, rng);
  add_conv(params_, "ae.enc.mid", h, h, {3, 3, 3}, rng);
  add_conv(params_, "ae.enc.down2", c, h, {3, 3, 3}, rng);
  add_conv_transpose(params_, "ae.dec.up1", c, h, {3, 3, 3}, rng);
  add_conv(params_, "ae.dec.mid", h, h, {3, 3, 3}, rng);
  add_conv_transpose(params_, "ae.dec.up2", h, 1, {3, 3, 3}, rng);
}

Shape Autoencoder::latent_shape(const Shape& x) const {
  if (x.size() != 5 || x[1] != 1) throw ShapeError("autoencoder: expected [N,1,H,W,D], got " + shape_str(x));
  if (identity_) return x;
  for (int a = 2; a < 5; ++a) {
    if (x[a] % 4 != 0) throw ShapeError("autoencoder: spatial extents must be divisible by 4, got " + shape_str(x));
  }
  return {x[0], cfg_.latent_channels, x[2] / 4, x[3] / 4, x[4] / 4};
}

void Autoencoder::set_trainable(bool on) {
  if (on) {
    params_.track();
  } else {
    params_.freeze();
  }
}

Tensor Autoencoder::encode_raw(const Tensor& x) const {
  Tensor h = ops::silu(conv(params_, "ae.enc.down1", x, {2, 2, 2}));
  h = ops::silu(conv(params_, "ae.enc.mid", h));
  return conv(params_, "ae.enc.down2", h, {2, 2, 2});
}

Tensor Autoencoder::decode_raw(const Tensor& z) const {
  Tensor h = ops::silu(conv_transpose(params_, "ae.dec.up1", z));
  h = ops::silu(conv(params_, "ae.dec.mid", h));
  Tensor y = conv_transpose(params_, "ae.dec.up2", h);
  return ops::sub(ops::scale(ops::sigmoid(y), 2.0f), Tensor::full(y.shape(), 1.0f));
}

Tensor Autoencoder::encode(const Tensor& x) const {
  latent_shape(x.shape());
  if (identity_) return x;
  return ops::scale(encode_raw(x), 1.0f / latent_scale_);
}

Tensor Autoencoder::decode(const Tensor& z) const {
  if (identity_) return z;
  if (z.rank() != 5 || z.dim(1) != cfg_.latent_channels) {
    throw ShapeError("autoencoder: latent must be [N," + std::to_string(cfg_.latent_channels) + ",h,w,d], got " +
                     shape_str(z.shape()));
  }
  return decode_raw(ops::scale(z, latent_scale_));
}

std::vector<std::pair<std::string, Tensor>> Autoencoder::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (identity_) return out;
  for (const auto& name : params_.names()) out.emplace_back(name, params_.tensor(name).detach());
  out.emplace_back(kScaleKey, Tensor::scalar(latent_scale_));
  return out;
}

void Autoencoder::load(const NamedTensors& ckpt) {
  if (identity_) return;
  params_.load(ckpt);
  latent_scale_ = checkpoint_get(ckpt, kScaleKey).item();
}

Tensor stack_batch(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("stack_batch: empty");
  Shape shape = items.front().shape();
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(items.front().numel()) * items.size());
  for (const auto& t : items) {
    if (t.shape() != items.front().shape()) throw ShapeError("stack_batch: mixed shapes");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  shape[0] *= static_cast<std::int64_t>(items.size());
  return Tensor(shape, std::move(data));
}

Autoencoder train_autoencoder(const std::vector<Tensor>& volumes, const AeConfig& cfg, std::uint64_t seed,
                              const TrainCallback& on_step, const NamedTensors* resume) {
  if (volumes.empty()) throw std::invalid_argument("train_autoencoder: no training volumes");
  Rng init(derive_seed(seed, "ae.init"));
  Autoencoder ae(cfg, init);
  ae.latent_shape(volumes.front().shape());
  int start = 1;
  if (resume) {
    ae.load(*resume);
    ae.set_latent_scale(1.0f);
    start = static_cast<int>(ae.params().load_optimizer_state(*resume)) + 1;
  }
  for (int step = start; step <= cfg.steps; ++step) {
    Rng rng(derive_seed(seed, "ae.batch", static_cast<std::uint64_t>(step)));
    std::vector<Tensor> items;
    for (int b = 0; b < cfg.batch; ++b) items.push_back(volumes[rng.below(volumes.size())]);
    const Tensor x = stack_batch(items);
    ae.set_trainable(true);
    Tape tape;
    Tensor loss;
    try {
      loss = ops::mse(ae.decode(ae.encode(x)), x);
    } catch (const NumericError& e) {
      throw NumericError("train_autoencoder: step " + std::to_string(step) + ": " + e.what());
    }
    adam_step(ae.params(), tape.backward(loss), cfg.lr);
    if (on_step) on_step({step, loss.item()});
  }
  ae.set_trainable(false);

  // Fit the latent scale to the RMS of raw encodings.
  double sq = 0.0;
  std::int64_t count = 0;
  for (const auto& v : volumes) {
    const Tensor z = ae.encode(v);  // scale is still 1 here
    for (float x : z.data()) sq += static_cast<double>(x) * x;
    count += z.numel();
  }
  const double rms = std::sqrt(sq / static_cast<double>(count));
  ae.set_latent_scale(rms > 1e-6 ? static_cast<float>(rms) : 1.0f);
  return ae;
}

double reconstruction_mse(const Autoencoder& ae, const std::vector<Tensor>& volumes) {
  NoGradGuard ng;
  double total = 0.0;
  for (const auto& v : volumes) total += ops::mse(ae.decode(ae.encode(v)), v).item();
  return volumes.empty() ? 0.0 : total / static_cast<double>(volumes.size());
}

}  // namespace flowseg

#include "flowseg/flow.hpp"

#include <stdexcept>

#include "flowseg/layers.hpp"
#include "flowseg/ops.hpp"

namespace flowseg {

namespace {

// [N,1,spatial...] tensor whose item n is filled with u[n].
Tensor time_planes(const Shape& z_shape, const std::vector<float>& u) {
  if (static_cast<std::int64_t>(u.size()) != z_shape.at(0)) {
    throw ShapeError("velocity field: " + std::to_string(u.size()) + " time values for batch " + shape_str(z_shape));
  }
  Shape shape = z_shape;
  shape[1] = 1;
  const std::int64_t per = shape_numel(shape) / shape[0];
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  for (std::size_t n = 0; n < u.size(); ++n) {
    std::fill(data.begin() + static_cast<std::ptrdiff_t>(n * per), data.begin() + static_cast<std::ptrdiff_t>((n + 1) * per),
              u[n]);
  }
  return Tensor(shape, std::move(data));
}

void check_step(const char* what, int t, int lo, int hi) {
  if (t < lo || t > hi) {
    throw std::out_of_range(std::string(what) + ": step " + std::to_string(t) + " outside [" + std::to_string(lo) +
                            ", " + std::to_string(hi) + "]");
  }
}

}  // namespace

VelocityField::VelocityField(int channels, const FlowConfig& cfg, Rng& rng) : channels_(channels) {
  add_conv(params_, "flow.in", cfg.hidden, channels + 1, {3, 3, 3}, rng);
  add_conv(params_, "flow.mid", cfg.hidden, cfg.hidden, {3, 3, 3}, rng);
  add_conv(params_, "flow.out", channels, cfg.hidden, {3, 3, 3}, rng);
}

Tensor VelocityField::operator()(const Tensor& z, const std::vector<float>& u) const {
  if (z.rank() != 5 || z.dim(1) != channels_) {
    throw ShapeError("velocity field: expected [N," + std::to_string(channels_) + ",h,w,d], got " + shape_str(z.shape()));
  }
  Tensor h = ops::concat_channels({z, time_planes(z.shape(), u)});
  h = ops::silu(conv(params_, "flow.in", h));
  h = ops::silu(conv(params_, "flow.mid", h));
  return conv(params_, "flow.out", h);
}

Tensor VelocityField::operator()(const Tensor& z, float u) const {
  return (*this)(z, std::vector<float>(static_cast<std::size_t>(z.dim(0)), u));
}

VelocityFn VelocityField::fn() const {
  return [this](const Tensor& z, const std::vector<float>& u) { return (*this)(z, u); };
}

void VelocityField::set_trainable(bool on) {
  if (on) {
    params_.track();
  } else {
    params_.freeze();
  }
}

std::vector<std::pair<std::string, Tensor>> VelocityField::named(const ParamSet& ps) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& name : ps.names()) out.emplace_back(name, ps.tensor(name).detach());
  return out;
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, float u) {
  return ops::add(ops::scale(x1, u), ops::scale(x0, 1.0f - u));
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, const std::vector<float>& u) {
  if (x0.shape() != x1.shape()) throw ShapeError("interpolate: " + shape_str(x0.shape()) + " vs " + shape_str(x1.shape()));
  Shape one = x0.shape();
  one[1] = 1;
  std::vector<float> w(static_cast<std::size_t>(x0.numel())), wc(w.size());
  const std::int64_t per = x0.numel() / x0.dim(0);
  for (std::int64_t i = 0; i < x0.numel(); ++i) {
    const float un = u.at(static_cast<std::size_t>(i / per));
    w[static_cast<std::size_t>(i)] = un;
    wc[static_cast<std::size_t>(i)] = 1.0f - un;
  }
  return ops::add(ops::mul(x1, Tensor(x0.shape(), std::move(w))), ops::mul(x0, Tensor(x0.shape(), std::move(wc))));
}

Tensor flow_loss(const VelocityFn& v, const Tensor& x1, Rng& rng) {
  const Tensor x0 = randn(x1.shape(), rng);
  std::vector<float> u(static_cast<std::size_t>(x1.dim(0)));
  for (auto& un : u) un = static_cast<float>(rng.uniform());
  const Tensor xt = interpolate(x0, x1, u);
  return ops::mse(v(xt, u), ops::sub(x1, x0));
}

Tensor forward_euler_step(const VelocityFn& v, const Tensor& z, int t, const TimeGrid& grid) {
  check_step("forward_euler_step", t, 0, grid.T - 1);
  const Tensor vel = v(z, std::vector<float>(static_cast<std::size_t>(z.dim(0)), grid.u(t)));
  return ops::add(z, ops::scale(vel, static_cast<float>(grid.dt())));
}

Tensor backward_euler_step(const VelocityFn& v, const Tensor& z, int t, const TimeGrid& grid) {
  check_step("backward_euler_step", t, 1, grid.T);
  const Tensor vel = v(z, std::vector<float>(static_cast<std::size_t>(z.dim(0)), grid.u(t)));
  return ops::sub(z, ops::scale(vel, static_cast<float>(grid.dt())));
}

Tensor invert(const VelocityFn& v, const Tensor& z, int tau, const TimeGrid& grid) {
  check_step("invert", tau, 0, grid.T);
  Tensor out = z;
  for (int t = grid.T; t > tau; --t) out = backward_euler_step(v, out, t, grid);
  return out;
}

Tensor integrate(const VelocityFn& v, const Tensor& z, int from, const TimeGrid& grid) {
  check_step("integrate", from, 0, grid.T);
  Tensor out = z;
  for (int t = from; t < grid.T; ++t) out = forward_euler_step(v, out, t, grid);
  return out;
}

Tensor sample(const VelocityFn& v, const Tensor& noise, const TimeGrid& grid) { return integrate(v, noise, 0, grid); }

VelocityField train_flow(const std::vector<Tensor>& latents, const FlowConfig& cfg, std::uint64_t seed,
                         const TrainCallback& on_step, const NamedTensors* resume) {
  if (latents.empty()) throw std::invalid_argument("train_flow: no training latents");
  Rng init(derive_seed(seed, "flow.init"));
  VelocityField field(static_cast<int>(latents.front().dim(1)), cfg, init);
  int start = 1;
  if (resume) {
    field.load(*resume);
    start = static_cast<int>(field.params().load_optimizer_state(*resume)) + 1;
  }
  for (int step = start; step <= cfg.steps; ++step) {
    Rng rng(derive_seed(seed, "flow.batch", static_cast<std::uint64_t>(step)));
    std::vector<Tensor> items;
    for (int b = 0; b < cfg.batch; ++b) items.push_back(latents[rng.below(latents.size())]);
    const Tensor x1 = stack_batch(items);
    field.set_trainable(true);
    Tape tape;
    Tensor loss;
    try {
      loss = flow_loss(field.fn(), x1, rng);
    } catch (const NumericError& e) {
      throw NumericError("train_flow: step " + std::to_string(step) + ": " + e.what());
    }
    adam_step(field.params(), tape.backward(loss), cfg.lr);
    if (on_step) on_step({step, loss.item()});
  }
  field.set_trainable(false);
  return field;
}

}  // namespace flowseg

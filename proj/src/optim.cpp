#include "flowseg/optim.hpp"

#include <cmath>

namespace flowseg {

Parameter::Parameter(Tensor init)
    : value(init.leaf()),
      m(static_cast<std::size_t>(init.numel()), 0.0f),
      v(static_cast<std::size_t>(init.numel()), 0.0f) {}

Parameter& ParamSet::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  order_.push_back(name);
  return params_.emplace(name, Parameter(std::move(init))).first->second;
}

Parameter& ParamSet::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParamSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamSet::track() {
  for (auto& [_, p] : params_) p.value = p.value.leaf();
}

void ParamSet::freeze() {
  for (auto& [_, p] : params_) p.value = p.value.detach();
}

std::int64_t ParamSet::numel() const {
  std::int64_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.numel();
  return n;
}

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* bytes, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& name : order_) {
    const auto& t = params_.at(name).value;
    mix(name.data(), name.size());
    for (auto d : t.shape()) mix(&d, sizeof d);
    mix(t.ptr(), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  return h;
}

std::map<std::string, Tensor> ParamSet::named_tensors() const {
  std::map<std::string, Tensor> out;
  for (const auto& name : order_) out.emplace(name, params_.at(name).value.detach());
  return out;
}

void ParamSet::load(const std::map<std::string, Tensor>& tensors) {
  for (const auto& name : order_) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("checkpoint is missing parameter " + name);
    auto& p = params_.at(name);
    if (it->second.shape() != p.value.shape()) {
      throw ShapeError("parameter " + name + ": checkpoint shape " + shape_str(it->second.shape()) + " vs model " +
                       shape_str(p.value.shape()));
    }
    p = Parameter(it->second);
  }
}

std::vector<std::pair<std::string, Tensor>> ParamSet::optimizer_state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  std::int64_t step = 0;
  for (const auto& name : order_) {
    const auto& p = params_.at(name);
    out.emplace_back(name + ".adam_m", Tensor(p.value.shape(), p.m));
    out.emplace_back(name + ".adam_v", Tensor(p.value.shape(), p.v));
    step = p.step;
  }
  out.emplace_back("adam.step", Tensor::scalar(static_cast<float>(step)));
  return out;
}

std::int64_t ParamSet::load_optimizer_state(const std::map<std::string, Tensor>& tensors) {
  auto find = [&tensors](const std::string& key) -> const Tensor& {
    auto it = tensors.find(key);
    if (it == tensors.end()) throw std::out_of_range("optimizer state is missing " + key);
    return it->second;
  };
  const auto step = static_cast<std::int64_t>(find("adam.step").item());
  for (const auto& name : order_) {
    auto& p = params_.at(name);
    const Tensor& m = find(name + ".adam_m");
    const Tensor& v = find(name + ".adam_v");
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape()) {
      throw ShapeError("optimizer state for " + name + " has the wrong shape");
    }
    p.m.assign(m.data().begin(), m.data().end());
    p.v.assign(v.data().begin(), v.data().end());
    p.step = step;
  }
  return step;
}

void adam_step(ParamSet& params, const GradMap& grads, float lr, const AdamConfig& cfg) {
  for (const auto& name : params.names()) {
    auto& p = params.get(name);
    if (!grads.contains(p.value)) throw std::invalid_argument("adam_step: no gradient for parameter " + name);
  }
  for (const auto& name : params.names()) {
    auto& p = params.get(name);
    const Tensor& g = grads.at(p.value);
    p.step += 1;
    const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(p.step));
    const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(p.step));
    std::vector<float> w(p.value.data().begin(), p.value.data().end());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g.ptr()[i];
      p.m[i] = cfg.beta1 * p.m[i] + (1.0f - cfg.beta1) * gi;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0f - cfg.beta2) * gi * gi;
      const float mhat = p.m[i] / bc1;
      const float vhat = p.v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    p.value = Tensor(p.value.shape(), std::move(w), true);
  }
}

Tensor init_conv_weight(const Shape& shape, std::int64_t fan_in, Rng& rng, float gain) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  std::vector<float> w(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : w) x = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor(shape, std::move(w));
}

}  // namespace flowseg

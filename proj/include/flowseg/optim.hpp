#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowseg/rng.hpp"
#include "flowseg/tensor.hpp"

namespace flowseg {

/// A trainable tensor plus its Adam moments.
struct Parameter {
  Tensor value;
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;

  Parameter() = default;
  explicit Parameter(Tensor init);
};

/// Named parameters in insertion order. Names become checkpoint keys.
class ParamSet {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const { return get(name).value; }

  /// Re-marks every parameter as a fresh gradient leaf. Call before building
  /// a taped forward pass.
  void track();
  /// Strips leaf marking (inference use).
  void freeze();

  std::vector<std::string> names() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::int64_t numel() const;

  /// FNV-1a over names, shapes and raw float bits.
  std::uint64_t checksum() const;

  std::map<std::string, Tensor> named_tensors() const;
  /// Replaces values from a name-keyed map; shapes must agree and every
  /// parameter must be present.
  void load(const std::map<std::string, Tensor>& tensors);

  /// Adam moments and step count under "<name>.adam_m", "<name>.adam_v" and
  /// "adam.step", for resuming training.
  std::vector<std::pair<std::string, Tensor>> optimizer_state() const;
  /// Restores moments written by optimizer_state(). Returns the step count.
  std::int64_t load_optimizer_state(const std::map<std::string, Tensor>& tensors);

 private:
  std::vector<std::string> order_;
  std::map<std::string, Parameter> params_;
};

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// One Adam update over all parameters. Throws if a gradient is missing.
void adam_step(ParamSet& params, const GradMap& grads, float lr, const AdamConfig& cfg = {});

/// Kaiming-uniform style init for conv weights shaped [out, in, k...].
Tensor init_conv_weight(const Shape& shape, std::int64_t fan_in, Rng& rng, float gain = 1.0f);

}  // namespace flowseg

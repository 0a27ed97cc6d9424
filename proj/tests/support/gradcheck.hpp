#pragma once

// Central finite-difference oracle for the differentiable ops. Shared by the
// unit tests and the acceptance binary.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flowseg/ops.hpp"
#include "flowseg/rng.hpp"
#include "flowseg/tensor.hpp"

namespace flowseg::oracle {

struct GradCase {
  std::string op;
  /// Builds fresh random inputs. Only inputs with requires_grad are checked.
  std::function<std::vector<Tensor>(Rng&)> make_inputs;
  std::function<Tensor(const std::vector<Tensor>&)> apply;
};

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return grad ? Tensor(shape, std::move(v)).leaf() : Tensor(shape, std::move(v));
}

/// Values bounded away from zero so relu's kink is never straddled.
inline Tensor random_nonzero(const Shape& shape, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>((rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0));
  return Tensor(shape, std::move(v)).leaf();
}

inline std::vector<GradCase> all_grad_cases() {
  using namespace flowseg::ops;
  std::vector<GradCase> cases;
  auto two = [](Shape a, Shape b) {
    return [a, b](Rng& r) { return std::vector<Tensor>{random_tensor(a, r), random_tensor(b, r)}; };
  };
  auto one = [](Shape a) { return [a](Rng& r) { return std::vector<Tensor>{random_tensor(a, r)}; }; };

  cases.push_back({"add", two({2, 3, 4}, {2, 3, 4}), [](auto& in) { return add(in[0], in[1]); }});
  cases.push_back({"sub", two({2, 3, 4}, {2, 3, 4}), [](auto& in) { return sub(in[0], in[1]); }});
  cases.push_back({"mul", two({2, 3, 4}, {2, 3, 4}), [](auto& in) { return mul(in[0], in[1]); }});
  cases.push_back({"scale", one({3, 5}), [](auto& in) { return scale(in[0], -1.7f); }});
  cases.push_back({"matmul", two({2, 3}, {3, 4}), [](auto& in) { return matmul(in[0], in[1]); }});
  cases.push_back({"conv3d",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor({2, 2, 5, 4, 3}, r), random_tensor({3, 2, 3, 3, 3}, r),
                                                random_tensor({3}, r)};
                   },
                   [](auto& in) { return conv3d(in[0], in[1], in[2]); }});
  cases.push_back({"conv3d",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor({1, 2, 6, 4, 5}, r), random_tensor({2, 2, 3, 3, 1}, r),
                                                random_tensor({2}, r)};
                   },
                   [](auto& in) { return conv3d(in[0], in[1], in[2], {2, 2, 1}); }});
  cases.push_back({"conv3d",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor({1, 1, 5, 6, 4}, r), random_tensor({2, 1, 3, 3, 3}, r),
                                                random_tensor({2}, r)};
                   },
                   [](auto& in) { return conv3d(in[0], in[1], in[2], {2, 2, 2}); }});
  cases.push_back({"conv_transpose3d",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor({2, 2, 3, 2, 2}, r), random_tensor({2, 3, 3, 3, 3}, r),
                                                random_tensor({3}, r)};
                   },
                   [](auto& in) { return conv_transpose3d(in[0], in[1], in[2]); }});
  cases.push_back({"avgpool3d", one({2, 2, 4, 4, 2}), [](auto& in) { return avgpool3d(in[0], {2, 2, 1}); }});
  cases.push_back({"global_avgpool", one({2, 3, 3, 2, 2}), [](auto& in) { return global_avgpool(in[0]); }});
  cases.push_back({"relu", [](Rng& r) { return std::vector<Tensor>{random_nonzero({4, 5}, r)}; },
                   [](auto& in) { return relu(in[0]); }});
  cases.push_back({"silu", one({4, 5}), [](auto& in) { return silu(scale(in[0], 3.0f)); }});
  cases.push_back({"sigmoid", one({4, 5}), [](auto& in) { return sigmoid(scale(in[0], 3.0f)); }});
  cases.push_back({"reshape", one({2, 6}), [](auto& in) { return reshape(in[0], {3, 4}); }});
  cases.push_back({"concat_channels",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor({2, 1, 3, 2}, r), random_tensor({2, 3, 3, 2}, r)};
                   },
                   [](auto& in) { return concat_channels({in[0], in[1], in[0]}); }});
  cases.push_back({"slice", one({2, 5, 3}), [](auto& in) { return slice(in[0], 1, 1, 3); }});
  cases.push_back({"mse", two({3, 4}, {3, 4}), [](auto& in) { return mse(in[0], in[1]); }});
  cases.push_back({"bce_with_logits",
                   [](Rng& r) {
                     auto logits = random_tensor({6}, r, true, -3.0, 3.0);
                     std::vector<float> y(6);
                     for (auto& v : y) v = r.bernoulli(0.5) ? 1.0f : 0.0f;
                     return std::vector<Tensor>{logits, Tensor({6}, y)};
                   },
                   [](auto& in) { return bce_with_logits(in[0], in[1]); }});
  cases.push_back({"sum", one({3, 4}), [](auto& in) { return sum(in[0]); }});
  cases.push_back({"mean", one({3, 4}), [](auto& in) { return mean(in[0]); }});
  return cases;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
};

/// Norm-wise relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)
/// per input, maximized over inputs. The scalar probed is sum(out * w) for a
/// fixed random w, reduced in double outside the tape.
inline GradCheckResult grad_check(const GradCase& c, Rng& rng, double h = 1e-3) {
  auto inputs = c.make_inputs(rng);
  Tensor probe_out;
  {
    NoGradGuard ng;
    probe_out = c.apply(inputs);
  }
  Tensor weights = random_tensor(probe_out.shape(), rng, false);

  auto eval = [&](const std::vector<Tensor>& in) {
    NoGradGuard ng;
    Tensor out = c.apply(in);
    double s = 0.0;
    for (std::int64_t i = 0; i < out.numel(); ++i) s += static_cast<double>(out.at(i)) * weights.at(i);
    return s;
  };

  GradMap grads;
  {
    Tape tape;
    Tensor out = c.apply(inputs);
    grads = tape.backward(ops::sum(ops::mul(out, weights)));
  }

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    const Tensor& ga = grads.at(inputs[k]);
    double num = 0.0, na = 0.0, nf = 0.0;
    for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<float> plus(inputs[k].data().begin(), inputs[k].data().end()), minus = plus;
      plus[i] += static_cast<float>(h);
      minus[i] -= static_cast<float>(h);
      const double step = static_cast<double>(plus[i]) - minus[i];
      auto in_p = inputs, in_m = inputs;
      in_p[k] = Tensor(inputs[k].shape(), plus);
      in_m[k] = Tensor(inputs[k].shape(), minus);
      const double fd = (eval(in_p) - eval(in_m)) / step;
      const double a = ga.at(i);
      num += (a - fd) * (a - fd);
      na += a * a;
      nf += fd * fd;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nf), 1e-12});
    res.max_rel_error = std::max(res.max_rel_error, std::sqrt(num) / denom);
  }
  return res;
}

}  // namespace flowseg::oracle

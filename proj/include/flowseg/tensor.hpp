#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace flowseg {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// Raised when operand shapes do not satisfy an op's shape rule.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a NaN or Inf shows up in a forward value or a gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Immutable row-major f32 array. Copies share storage; every constructed
/// value gets a fresh id, which is how the tape and gradient maps refer to it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, float value);
  static Tensor scalar(float value);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return shape_numel(shape_); }
  bool defined() const { return static_cast<bool>(data_); }

  std::span<const float> data() const;
  const float* ptr() const { return data_->data(); }
  float item() const;
  float at(std::int64_t flat) const { return (*data_)[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return requires_grad_; }
  std::uint64_t id() const { return id_; }

  /// Same values, new identity, not tracked.
  Tensor detach() const;
  /// Same values, new identity, marked as a gradient leaf.
  Tensor leaf() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
  bool requires_grad_ = false;
  std::uint64_t id_ = 0;
};

/// Gradients keyed by the id of the tensor they belong to.
class GradMap {
 public:
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  const Tensor& at(const Tensor& t) const;
  void insert(std::uint64_t id, Tensor g) { grads_.insert_or_assign(id, std::move(g)); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

/// Append-only record of tracked operations.
///
/// Constructing a Tape makes it the active tape of the calling thread until
/// it is destroyed; ops record onto the active tape whenever one of their
/// inputs requires a gradient. Nodes are appended in execution order, so
/// walking them backwards is a valid reverse topological order.
class Tape {
 public:
  using Accum = std::function<void(std::uint64_t id, const std::vector<float>& g)>;
  using BackwardFn = std::function<void(const std::vector<float>& grad_out, const Accum& accum)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear();

  /// Registers `out` as produced by `op` from `inputs`. Returns `out` marked
  /// as requiring grad.
  Tensor record(std::string_view op, std::span<const Tensor> inputs, Tensor out, BackwardFn fn);

  /// Reverse-mode sweep seeded with d(loss)/d(loss) = 1. Returns gradients of
  /// every leaf reached. The tape is cleared afterwards.
  GradMap backward(const Tensor& loss);

 private:
  struct Node {
    std::string op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output;
    std::int64_t out_numel;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, Shape> shapes_;
  std::unordered_map<std::uint64_t, bool> produced_;
  Tape* prev_ = nullptr;
};

/// Runs backward on the active tape.
GradMap backward(const Tensor& loss);

/// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

}  // namespace flowseg

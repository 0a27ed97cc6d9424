#include "flowseg/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace flowseg {

namespace {

std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad), id_(next_id()) {
  for (auto d : shape_) {
    if (d <= 0) throw ShapeError("tensor: non-positive extent in shape " + shape_str(shape_));
  }
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape_)) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                     " values, got " + std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<float>>(std::move(data));
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0f); }

Tensor Tensor::full(const Shape& shape, float value) {
  return Tensor(shape, std::vector<float>(static_cast<std::size_t>(shape_numel(shape)), value));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

std::span<const float> Tensor::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

float Tensor::item() const {
  if (!data_ || data_->size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.requires_grad_ = false;
  t.id_ = next_id();
  return t;
}

Tensor Tensor::leaf() const {
  Tensor t = detach();
  t.requires_grad_ = true;
  return t;
}

const Tensor& GradMap::at(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) throw std::out_of_range("no gradient recorded for tensor " + shape_str(t.shape()));
  return it->second;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::clear() {
  nodes_.clear();
  shapes_.clear();
  produced_.clear();
}

Tensor Tape::record(std::string_view op, std::span<const Tensor> inputs, Tensor out, BackwardFn fn) {
  Node node;
  node.op = std::string(op);
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    node.inputs.push_back(in.id());
    shapes_.emplace(in.id(), in.shape());
  }
  out.requires_grad_ = true;
  node.output = out.id();
  node.out_numel = out.numel();
  node.fn = std::move(fn);
  shapes_.emplace(out.id(), out.shape());
  produced_[out.id()] = true;
  nodes_.push_back(std::move(node));
  return out;
}

GradMap Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (nodes_.empty()) throw std::logic_error("backward: tape is empty");
  if (!produced_.count(loss.id())) throw std::logic_error("backward: loss was not produced on this tape");

  std::unordered_map<std::uint64_t, std::vector<float>> grads;
  grads[loss.id()] = {1.0f};

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto g = grads.find(it->output);
    if (g == grads.end()) continue;
    const std::vector<float> grad_out = std::move(g->second);
    grads.erase(g);
    const std::string& op = it->op;
    const std::size_t node_index = static_cast<std::size_t>(std::distance(it, nodes_.rend())) - 1;
    Accum accum = [&](std::uint64_t id, const std::vector<float>& contrib) {
      auto sh = shapes_.find(id);
      if (sh == shapes_.end()) return;
      for (float v : contrib) {
        if (!std::isfinite(v)) {
          throw NumericError("backward: non-finite gradient produced by node " + std::to_string(node_index) + " (" +
                             op + ")");
        }
      }
      auto& dst = grads[id];
      if (dst.empty()) {
        dst = contrib;
      } else {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += contrib[i];
      }
    };
    it->fn(grad_out, accum);
  }

  GradMap out;
  for (auto& [id, g] : grads) {
    if (produced_.count(id)) continue;
    out.insert(id, Tensor(shapes_.at(id), std::move(g)));
  }
  clear();
  return out;
}

GradMap backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw std::logic_error("backward: no active tape");
  return t->backward(loss);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

}  // namespace flowseg

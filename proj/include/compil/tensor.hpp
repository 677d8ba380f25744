#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace compil {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != 0) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};

// Dense row-major n-d array with an optional gradient slot. Handles share
// storage on copy; clone() makes a deep copy. Gradients are accumulated by
// Tape::backward into every requires_grad tensor on the path to the output.
template <typename T>
class Tensor {
 public:
  Tensor() : st_(std::make_shared<TensorStorage<T>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.st_->values.assign(shape_numel(shape), T(0));
    t.st_->shape = std::move(shape);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (T& x : t.st_->values) x = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.st_->shape = std::move(shape);
    t.st_->values = std::move(data);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  const Shape& shape() const { return st_->shape; }
  int rank() const { return static_cast<int>(st_->shape.size()); }
  int extent(int axis) const { return st_->shape.at(static_cast<std::size_t>(axis)); }
  int rows() const { return extent(0); }
  int cols() const { return extent(1); }
  std::size_t numel() const { return st_->values.size(); }

  std::span<T> values() { return st_->values; }
  std::span<const T> values() const { return st_->values; }
  T& operator[](std::size_t i) { return st_->values[i]; }
  const T& operator[](std::size_t i) const { return st_->values[i]; }

  T value() const {
    if (numel() != 1)
      throw std::invalid_argument("value() called on non-scalar tensor " + shape_str(shape()));
    return st_->values[0];
  }

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool rg) { st_->requires_grad = rg; }

  bool has_grad() const { return !st_->grad.empty(); }
  std::span<T> grad() {
    ensure_grad();
    return st_->grad;
  }
  std::span<const T> grad_view() const { return st_->grad; }
  void ensure_grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->values.size(), T(0));
  }
  void zero_grad() {
    if (!st_->grad.empty()) st_->grad.assign(st_->values.size(), T(0));
  }

  Tensor clone() const {
    Tensor t;
    *t.st_ = *st_;
    return t;
  }

  bool same_storage(const Tensor& other) const { return st_ == other.st_; }

  std::shared_ptr<TensorStorage<T>> storage() const { return st_; }

 private:
  std::shared_ptr<TensorStorage<T>> st_;
};

// Reverse-mode tape. Ops execute eagerly and append one node per executed
// operation; nodes are stored in execution order, so every node's inputs
// precede it and a single reverse sweep is a valid backpropagation order.
// Ops whose inputs carry no gradient are not recorded (nothing to propagate).
// A tape must not be shared across concurrent executions.
template <typename T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };

  void record(const char* op, std::function<void()> backward) {
    if (enabled_) nodes_.push_back(Node{op, std::move(backward)});
  }

  bool recording() const { return enabled_; }
  void set_recording(bool on) { enabled_ = on; }

  bool check_finite() const { return check_finite_; }
  void set_check_finite(bool on) { check_finite_ = on; }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  void clear() { nodes_.clear(); }

  // Seeds the scalar output with gradient 1 and sweeps the tape in reverse.
  // Leaves the tape unchanged; repeated calls keep accumulating.
  void backward(Tensor<T>& output) {
    if (output.numel() != 1)
      throw std::invalid_argument("backward: output must be scalar, got " +
                                  shape_str(output.shape()));
    output.ensure_grad();
    output.grad()[0] += T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i].backward();
  }

 private:
  std::vector<Node> nodes_;
  bool enabled_ = true;
  bool check_finite_ = false;
};

// RAII guard that disables recording for the guarded scope (inference paths).
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

}  // namespace compil

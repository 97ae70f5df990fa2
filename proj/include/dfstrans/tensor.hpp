#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfstrans/errors.hpp"

namespace dfstrans {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " does not hold " +
                           std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  double& operator()(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  double operator()(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  double item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) off = off * shape_[axis++] + i;
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

/// A named trainable array with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so every node's parents precede it.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, nullptr, false); }

  Var parameter(Parameter& p) {
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    return push(p.value, {}, nullptr, &p, true);
  }

  Var record(Tensor value, std::vector<std::size_t> parents, Backward fn) {
    bool needs = false;
    for (std::size_t pid : parents) {
      if (pid >= nodes_.size()) throw ContractError("tape parent recorded after child");
      needs = needs || nodes_[pid].requires_grad;
    }
    if (!needs) fn = nullptr;
    return push(std::move(value), std::move(parents), std::move(fn), nullptr, needs);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }

  /// Gradient buffer for a node, zero-allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
      n.grad = Tensor::zeros_like(n.value);
    }
    return n.grad;
  }
  bool has_grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.size() == n.value.size() && n.grad.shape() == n.value.shape();
  }

  /// Propagates d(loss)/d(node) to every node and accumulates into Parameter::grad.
  void backward(Var loss) {
    if (&loss.tape() != this) throw ContractError("loss belongs to a different tape");
    if (value(loss.id()).size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          shape_str(value(loss.id()).shape()));
    }
    grad(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !has_grad(i)) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, Backward fn, Parameter* p, bool needs) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(parents), std::move(fn), p, needs});
    return Var(this, nodes_.size() - 1);
  }

  // deque keeps references returned by value() stable while recording.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

}  // namespace dfstrans

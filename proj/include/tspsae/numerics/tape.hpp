#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "tspsae/numerics/tensor.hpp"

namespace tspsae::ad {

/// A trainable tensor together with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, BasicTensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = BasicTensor<T>(value.shape()); }
};

template <class T>
class Tape;

/// Handle to a node recorded on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so inputs
/// always precede their consumers and backward() is a single reverse sweep.
///
/// Node storage never relocates, so references from value() stay valid as
/// more nodes are recorded.
///
/// A tape built with `tracking = false` stores values only; use it for
/// inference where no gradient will be requested.
template <class T>
class Tape {
 public:
  // Receives the gradient flowing into the node's output and adds the
  // input contributions via tape.accumulate().
  using Backward = std::function<void(Tape&, const BasicTensor<T>& out_grad)>;

  explicit Tape(bool tracking = true) : tracking_(tracking) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const { return tracking_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(BasicTensor<T> value) {
    Node node;
    node.own = std::move(value);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Constant leaf referring to an external tensor, which must outlive the tape.
  Var<T> view(const BasicTensor<T>& value) {
    Node node;
    node.external = &value;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Leaf bound to a parameter; the parameter must outlive the tape.
  Var<T> parameter(Parameter<T>& p) {
    Node node;
    node.external = &p.value;
    node.param = tracking_ ? &p : nullptr;
    node.requires_grad = tracking_;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Leaf that requires a gradient but is not bound to a parameter (tests,
  // input sensitivities). Read the result with grad_of() after backward().
  Var<T> variable(BasicTensor<T> value) {
    Node node;
    node.own = std::move(value);
    node.requires_grad = tracking_;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> record(BasicTensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
    Node node;
    node.own = std::move(value);
    for (const auto& in : inputs) {
      if (in.tape() != this) throw ContractError("tape: input recorded on a different tape");
      if (in.id() >= nodes_.size()) throw ContractError("tape: input does not precede its consumer");
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (tracking_ && node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const BasicTensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.own;
  }

  bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }

  // Adds `g` into the gradient slot of `v`. No-op for constants.
  void accumulate(const Var<T>& v, const BasicTensor<T>& g) {
    if (!requires_grad(v)) return;
    BasicTensor<T>& slot = grad_slot(v.id());
    if (slot.shape() != g.shape()) {
      throw DimensionError("tape: gradient " + shape_string(g.shape()) + " for node " + shape_string(slot.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  // Mutable gradient slot, zero-initialised on first use. Lets backward
  // functions scatter into an input without a temporary.
  BasicTensor<T>& grad_slot(std::size_t id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    BasicTensor<T>& slot = grads_[id];
    if (slot.size() == 0) slot = BasicTensor<T>(value(id).shape());
    return slot;
  }

  // Runs the reverse sweep from a scalar loss. Gradients of parameter
  // leaves are added to Parameter::grad.
  void backward(const Var<T>& loss) {
    if (!tracking_) throw ContractError("tape: backward() on a non-tracking tape");
    if (loss.tape() != this) throw ContractError("tape: loss recorded on a different tape");
    if (loss.value().size() != 1) {
      throw ContractError("tape: backward() needs a scalar loss, got " + shape_string(loss.shape()));
    }
    grads_.assign(nodes_.size(), BasicTensor<T>());
    grad_slot(loss.id())[0] = T(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (grads_[id].size() == 0 || !node.requires_grad) continue;
      if (node.backward) node.backward(*this, grads_[id]);
      if (node.param) {
        Parameter<T>& p = *node.param;
        if (p.grad.shape() != p.value.shape()) p.grad = BasicTensor<T>(p.value.shape());
        const BasicTensor<T>& g = grads_[id];
        for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
      }
    }
  }

  // Gradient of the last backward() loss with respect to `v`, or nullptr if
  // nothing flowed into it.
  const BasicTensor<T>* grad_of(const Var<T>& v) const {
    if (v.id() >= grads_.size() || grads_[v.id()].size() == 0) return nullptr;
    return &grads_[v.id()];
  }

 private:
  struct Node {
    BasicTensor<T> own;
    const BasicTensor<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  bool tracking_;
  std::deque<Node> nodes_;
  std::vector<BasicTensor<T>> grads_;
};

}  // namespace tspsae::ad

#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "da/tensor.hpp"

namespace da {

class Tape;

/// Handle to a tensor recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

/// A trainable tensor living outside any tape. `grad` is (re)written after
/// each backward pass; `reached` reports whether the last backward touched it.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool reached = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
};

/// Records one operation per node, in construction order. Replaying the
/// backward rules in exact reverse order yields deterministic gradients:
/// same seed and single-threaded execution give bitwise-identical results.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until the node enters a backward pass
    bool requires_grad = false;
    std::function<void(Tape&, const Node&)> backward;  // null for leaves
  };

  using BackwardFn = std::function<void(Tape&, const Node&)>;

  Var leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var record(Tensor value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(
        Node{std::move(value), Tensor{}, requires_grad, std::move(backward)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& value(Var v) const { return value(v.id); }

  /// Gradient of the last backward target w.r.t. node `id`; zeros if the
  /// node was never reached.
  Tensor grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && n.value.numel() > 0) return Tensor::zeros(n.value.shape());
    return n.grad;
  }
  Tensor grad(Var v) const { return grad(v.id); }

  bool reached(Var v) const { return !nodes_[static_cast<std::size_t>(v.id)].grad.empty(); }

  /// Adds `g` into the grad buffer of node `id` (no-op for non-grad nodes).
  void accumulate(int id, const Array& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    n.grad.array() += g;
  }

  bool requires_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  /// Reverse sweep from a scalar loss. Throws ShapeError on non-scalar input.
  void backward(Var loss) {
    if (loss.tape != this) throw ValueError("backward: loss recorded on another tape");
    Node& top = nodes_[static_cast<std::size_t>(loss.id)];
    if (top.value.numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       shape_to_string(top.value.shape()));
    }
    if (top.grad.empty()) top.grad = Tensor::zeros(top.value.shape());
    top.grad.array()[0] += 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

/// Per-step binding of parameters onto one tape. A parameter used several
/// times in a step (e.g. the backbone run on both domain images) is bound to
/// a single leaf so its gradient contributions accumulate on one node.
class TapeSession {
 public:
  explicit TapeSession(bool frozen = false) : frozen_(frozen) {}

  Tape& tape() { return tape_; }

  Var input(const Tensor& v) { return tape_.leaf(v, false); }

  Var param(Parameter& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Var{&tape_, it->second};
    Var v = tape_.leaf(p.value, !frozen_);
    bound_.emplace(&p, v.id);
    order_.push_back(&p);
    return v;
  }

  void backward(Var loss) { tape_.backward(loss); }

  /// Copies gradients off the tape into each bound parameter (zeros for
  /// parameters the backward pass never reached). Iterates in binding order.
  void write_grads() {
    for (Parameter* p : order_) {
      const int id = bound_.at(p);
      p->reached = tape_.reached(Var{&tape_, id});
      p->grad = tape_.grad(id);
    }
  }

  bool frozen() const { return frozen_; }

 private:
  Tape tape_;
  bool frozen_;
  std::unordered_map<const Parameter*, int> bound_;  // lookup only, never iterated
  std::vector<Parameter*> order_;
};

}  // namespace da

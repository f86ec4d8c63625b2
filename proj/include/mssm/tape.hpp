#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mssm/tensor.hpp"

namespace mssm {

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid for the tape's
// lifetime.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const std::vector<std::int64_t>& dims() const { return value().dims(); }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Ordered record of executed operations. Backward replays them in exact
// reverse execution order; a value feeding several consumers receives the sum
// of their contributions. Single-threaded by contract.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Tensor value) {
    const bool rg = value.requires_grad;
    return leaf(std::move(value), rg);
  }

  Var leaf(Tensor value, bool requires_grad) {
    require_finite(value, "tape leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    for (std::size_t p : n.parents) {
      if (p >= nodes_.size()) throw std::invalid_argument("tape: parent id out of range");
      n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
    if (ran_backward_) throw std::logic_error("backward: already run on this tape");
    const Node& ln = nodes_[loss.id()];
    if (ln.value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!ln.needs_grad) {
      throw std::invalid_argument("backward: graph detached from differentiable leaves");
    }
    ran_backward_ = true;
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad_allocated) n.backward(*this, i);
    }
  }

  // Zero for anything the loss never reached.
  Tensor grad(const Var& v) const {
    if (v.tape() != this) throw std::invalid_argument("grad: var is not on this tape");
    const Node& n = nodes_[v.id()];
    if (!n.grad_allocated) return Tensor(n.value.dims());
    return n.grad;
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // --- used by op backward closures ---

  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

  // Lazily allocates the (zero-filled) gradient and returns its storage.
  double* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad_allocated) {
      n.grad = Tensor(n.value.dims());
      n.grad_allocated = true;
    }
    return n.grad.data();
  }

  // Accumulates g into the parent's gradient unless the parent is off every
  // differentiable path.
  void add_grad(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (!g.same_dims(n.value)) throw std::logic_error("tape: gradient shape mismatch");
    double* dst = grad_buffer(id);
    const double* src = g.data();
    for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool needs_grad = false;
    bool grad_allocated = false;
  };

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("var: empty handle");
  return tape_->value(id_);
}

// Registers parameter tensors as leaves and remembers (storage, var) pairs so
// an optimizer can route gradients back after backward().
class Binder {
 public:
  Binder(Tape& tape, bool requires_grad) : tape_(&tape), requires_grad_(requires_grad) {}

  Var operator()(Tensor& t) {
    Var v = tape_->leaf(t, requires_grad_);
    bound_.emplace_back(&t, v);
    return v;
  }

  const std::vector<std::pair<Tensor*, Var>>& bound() const { return bound_; }
  Tape& tape() { return *tape_; }
  bool requires_grad() const { return requires_grad_; }

 private:
  Tape* tape_;
  bool requires_grad_;
  std::vector<std::pair<Tensor*, Var>> bound_;
};

}  // namespace mssm

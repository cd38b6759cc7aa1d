#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "mv3d/core/tensor.hpp"

namespace mv3d {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr; }
};

/// Define-by-run record of differentiable operations.
///
/// Nodes are appended in execution order; backward() walks them in exact reverse order. A node
/// is tracked when it is a tracked leaf or any of its parents is tracked; untracked nodes keep no
/// backward closure. One tape belongs to one training step and one thread.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const BasicTensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(BasicTensor<T> v) { return push(std::move(v), false, nullptr, "constant"); }
  Var<T> leaf(BasicTensor<T> v, bool requires_grad = true) {
    return push(std::move(v), requires_grad, nullptr, "leaf");
  }

  /// Append a computed node. `backward` receives the node's output gradient and must
  /// accumulate into parents through grad_buffer(). It is dropped if no parent is tracked.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward,
                const char* op) {
    bool tracked_any = false;
    for (const Var<T>& p : parents) {
      check_owned(p);
      tracked_any = tracked_any || nodes_[p.id].tracked;
    }
    return push(std::move(value), tracked_any, tracked_any ? std::move(backward) : nullptr, op);
  }
  Var<T> record(BasicTensor<T> value, const std::vector<Var<T>>& parents, BackwardFn backward,
                const char* op) {
    bool tracked_any = false;
    for (const Var<T>& p : parents) {
      check_owned(p);
      tracked_any = tracked_any || nodes_[p.id].tracked;
    }
    return push(std::move(value), tracked_any, tracked_any ? std::move(backward) : nullptr, op);
  }

  const BasicTensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  bool tracked(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].tracked;
  }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator for a node, zero-filled on first touch.
  BasicTensor<T>& grad_buffer(Var<T> v) {
    check_owned(v);
    auto& g = grads_[v.id];
    if (!g) g.emplace(nodes_[v.id].value.shape(), T(0));
    return *g;
  }

  void backward(Var<T> loss) {
    check_owned(loss);
    MV3D_REQUIRE(nodes_[loss.id].value.size() == 1,
                 "backward() needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
    grads_.assign(nodes_.size(), std::nullopt);
    backward_done_ = true;
    if (!nodes_[loss.id].tracked) return;
    grad_buffer(loss)[0] = T(1);
    for (std::int64_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (!n.backward || !g) continue;
      n.backward(*this, *g);
    }
  }

  /// d(loss)/d(v) after backward(). Tracked values the loss never reached get zeros;
  /// untracked values get nothing.
  std::optional<BasicTensor<T>> grad(Var<T> v) const {
    check_owned(v);
    MV3D_REQUIRE(backward_done_, "grad() called before backward()");
    if (!nodes_[v.id].tracked) return std::nullopt;
    if (const auto& g = grads_[v.id]) return *g;
    return BasicTensor<T>(nodes_[v.id].value.shape(), T(0));
  }

 private:
  struct Node {
    BasicTensor<T> value;
    bool tracked = false;
    BackwardFn backward;
    const char* op = "";
  };

  Var<T> push(BasicTensor<T> v, bool tracked, BackwardFn bw, const char* op) {
    if (!v.all_finite()) throw NumericFault(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{std::move(v), tracked, std::move(bw), op});
    grads_.emplace_back();
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void check_owned(Var<T> v) const {
    MV3D_REQUIRE(v.tape == this, "variable belongs to a different tape");
    MV3D_REQUIRE(v.id < nodes_.size(), "variable id out of range");
  }

  std::deque<Node> nodes_;  // stable references across push_back
  std::vector<std::optional<BasicTensor<T>>> grads_;
  bool backward_done_ = false;
};

}  // namespace mv3d

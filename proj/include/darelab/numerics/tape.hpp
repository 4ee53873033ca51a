#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "darelab/numerics/tensor.hpp"

namespace darelab {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
// reverse of insertion order is a valid topological order for backward().
//
// A node participates in backward only if the tape was recording when it was
// created and one of its inputs participates. Values produced while a
// NoGradScope is active, or by stop_gradient(), are constants: they keep
// their forward value but pass no gradient upstream.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);
  // Leaf that reads an external tensor without copying it. The tensor must
  // outlive the tape and stay unmodified while the tape is in use.
  Var borrow(const Tensor& value, bool requires_grad);

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())).requires_grad; }
  // Accumulated gradient; all zeros when nothing reached the node.
  Tensor grad(Var v) const;

  // Seeds d(root)/d(root) = seed and propagates. root must be a single element.
  void backward(Var root, double seed = 1.0);

  // Used by op implementations.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, Tensor&& g);

  bool recording() const { return no_grad_depth_ == 0; }
  std::size_t size() const { return nodes_.size(); }

  class NoGradScope {
   public:
    explicit NoGradScope(Tape& tape) : tape_(tape) { ++tape_.no_grad_depth_; }
    ~NoGradScope() { --tape_.no_grad_depth_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Tape& tape_;
  };

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn);

  std::vector<Node> nodes_;
  int no_grad_depth_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// Differentiable primitives. Each has a hand-derived backward.

Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a[m x n] + row broadcast, row has n elements.
Var add_row(Var a, Var row);
Var square(Var a);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var silu(Var x);
Var slice_rows(Var x, std::size_t start, std::size_t len);
Var slice_cols(Var x, std::size_t start, std::size_t len);
Var concat_rows(Var a, Var b);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const int> rows);
Var reshape(Var x, Shape shape);
Var sum(Var x);
Var mean(Var x);
// Forward identity, zero gradient backward.
Var stop_gradient(Var x);

}  // namespace darelab

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mgad/tensor.hpp"

namespace mgad::ad {

struct Node;

/// Handle to a value in a recorded computation.
///
/// Constants carry no history. Tracked leaves (`Var::tracked`) are the
/// tensors gradients can be queried for; every op whose inputs include a
/// tracked value records a backward closure.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var tracked(Tensor value);

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  bool defined() const { return static_cast<bool>(node_); }

  const Node* node() const { return node_.get(); }

 private:
  explicit Var(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;

  friend Var make_op(Tensor, std::vector<Var>, std::function<void(const Node&, const Tensor&, std::span<Tensor* const>)>,
                     const char*);
};

/// Backward closure: given dL/d(output), accumulate into the parents'
/// gradient buffers. A null buffer means that parent is not tracked.
using BackwardFn = std::function<void(const Node& self, const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

struct Node {
  Tensor value;
  std::vector<Var> parents;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";

  const Tensor& input(std::size_t i) const { return parents[i].value(); }
};

/// Records an op. Throws NumericError if `value` is not finite. When no
/// parent is tracked the result is a constant and `fn` is dropped.
Var make_op(Tensor value, std::vector<Var> parents, BackwardFn fn, const char* op);

/// Gradients of a scalar with respect to every tracked leaf it depends on.
class Gradients {
 public:
  /// Gradient for a tracked leaf; zeros if the leaf did not influence the
  /// root. Throws std::invalid_argument for untracked values.
  Tensor of(const Var& v) const;
  bool reached(const Var& v) const { return grads_.count(v.node()) != 0; }

 private:
  std::unordered_map<const Node*, Tensor> grads_;
  friend Gradients backward(const Var& root, const Tensor& seed);
};

Gradients backward(const Var& root);
Gradients backward(const Var& root, const Tensor& seed);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// s (single element) times every entry of a.
Var mul_scalar(const Var& s, const Var& a);
Var square(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var tanh(const Var& a);

// ---- reductions ----
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);

// ---- shape ----
Var reshape(const Var& a, Shape shape);
/// Stack equal-shape values along a new leading axis.
Var stack(const std::vector<Var>& items);
/// Slice i of the leading axis.
Var select(const Var& a, std::size_t i);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// ---- normalisation / probability ----
/// Softmax over the last axis.
Var softmax(const Var& a);
/// Mean cross-entropy of rows of `logits` ([m, n]) against target columns.
Var cross_entropy(const Var& logits, const std::vector<std::size_t>& targets);
/// v / ||v||_2 over all entries.
Var l2_normalize(const Var& v);

}  // namespace mgad::ad

#include "mgad/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "mgad/error.hpp"

namespace mgad::ad {

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

Var Var::tracked(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->op = "leaf";
  return Var(std::move(node));
}

const Tensor& Var::value() const {
  if (!node_) throw std::logic_error("use of an undefined Var");
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

Var make_op(Tensor value, std::vector<Var> parents, BackwardFn fn, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from op '") + op + "'");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  const bool tracked = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (tracked) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

Tensor Gradients::of(const Var& v) const {
  if (!v.requires_grad()) throw std::invalid_argument("gradient requested for an untracked tensor");
  auto it = grads_.find(v.node());
  if (it == grads_.end()) return Tensor(v.shape(), 0.0);
  return it->second;
}

Gradients backward(const Var& root) {
  if (root.size() != 1) throw std::invalid_argument("backward() without a seed needs a scalar root");
  return backward(root, Tensor(root.shape(), 1.0));
}

Gradients backward(const Var& root, const Tensor& seed) {
  require_same_shape(root.value(), seed, "backward seed");
  Gradients result;
  if (!root.requires_grad()) return result;

  // Post-order DFS gives a topological order with parents before children.
  std::vector<const Node*> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<const Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Node* p = node->parents[next++].node();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Tensor> grads;
  grads.emplace(root.node(), seed);
  std::vector<Tensor*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    auto g = grads.find(node);
    if (g == grads.end()) continue;
    if (!node->backward) {
      result.grads_.emplace(node, std::move(g->second));
      grads.erase(g);
      continue;
    }
    parent_grads.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Node* p = node->parents[i].node();
      if (!p->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(p);
      if (inserted) slot->second = Tensor(p->value.shape(), 0.0);
      parent_grads[i] = &slot->second;
    }
    node->backward(*node, g->second, parent_grads);
    grads.erase(node);
  }
  return result;
}

namespace {

template <class F, class D>
Var unary(const Var& a, F f, D df, const char* op) {
  Tensor out = a.value();
  for (double& v : out.data()) v = f(v);
  return make_op(std::move(out), {a},
                 [df](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& x = self.input(0);
                   Tensor& ga = *pg[0];
                   for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i], self.value[i]);
                 },
                 op);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return make_op(a.value() + b.value(), {a, b},
                 [](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (Tensor* t : pg) {
                     if (!t) continue;
                     for (std::size_t i = 0; i < g.size(); ++i) (*t)[i] += g[i];
                   }
                 },
                 "add");
}

Var sub(const Var& a, const Var& b) {
  return make_op(a.value() - b.value(), {a, b},
                 [](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   if (pg[0]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                   if (pg[1]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
                 },
                 "sub");
}

Var mul(const Var& a, const Var& b) {
  return make_op(hadamard(a.value(), b.value()), {a, b},
                 [](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& x = self.input(0);
                   const Tensor& y = self.input(1);
                   if (pg[0]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * y[i];
                   if (pg[1]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * x[i];
                 },
                 "mul");
}

Var scale(const Var& a, double s) {
  return make_op(s * a.value(), {a},
                 [s](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += s * g[i];
                 },
                 "scale");
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v += s;
  return make_op(std::move(out), {a},
                 [](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                 },
                 "add_scalar");
}

Var mul_scalar(const Var& s, const Var& a) {
  const double k = s.value().item();
  return make_op(k * a.value(), {s, a},
                 [](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const double k = self.input(0).item();
                   const Tensor& x = self.input(1);
                   if (pg[0]) {
                     double acc = 0.0;
                     for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
                     (*pg[0])[0] += acc;
                   }
                   if (pg[1]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += k * g[i];
                 },
                 "mul_scalar");
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw NumericError("log of a non-positive value");
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

Var sigmoid(const Var& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var silu(const Var& a) {
  return unary(a, [](double x) { return x / (1.0 + std::exp(-x)); },
               [](double x, double) {
                 const double s = 1.0 / (1.0 + std::exp(-x));
                 return s * (1.0 + x * (1.0 - s));
               },
               "silu");
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Var sum(const Var& a) {
  return make_op(Tensor::scalar(mgad::sum(a.value())), {a},
                 [](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (double& v : pg[0]->data()) v += g[0];
                 },
                 "sum");
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.size());
  return make_op(Tensor::scalar(mgad::sum(a.value()) / n), {a},
                 [n](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (double& v : pg[0]->data()) v += g[0] / n;
                 },
                 "mean");
}

Var dot(const Var& a, const Var& b) {
  return make_op(Tensor::scalar(mgad::dot(a.value(), b.value())), {a, b},
                 [](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& x = self.input(0);
                   const Tensor& y = self.input(1);
                   if (pg[0]) for (std::size_t i = 0; i < x.size(); ++i) (*pg[0])[i] += g[0] * y[i];
                   if (pg[1]) for (std::size_t i = 0; i < x.size(); ++i) (*pg[1])[i] += g[0] * x[i];
                 },
                 "dot");
}

Var reshape(const Var& a, Shape shape) {
  return make_op(a.value().reshaped(std::move(shape)), {a},
                 [](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                 },
                 "reshape");
}

Var stack(const std::vector<Var>& items) {
  if (items.empty()) throw std::invalid_argument("stack of zero tensors");
  const Shape& inner = items.front().shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  const std::size_t n = shape_numel(inner);
  std::vector<double> data;
  data.reserve(n * items.size());
  for (const Var& v : items) {
    if (v.shape() != inner) throw std::invalid_argument("stack: shape mismatch");
    data.insert(data.end(), v.value().data().begin(), v.value().data().end());
  }
  return make_op(Tensor(std::move(shape), std::move(data)), items,
                 [n](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t k = 0; k < pg.size(); ++k) {
                     if (!pg[k]) continue;
                     for (std::size_t i = 0; i < n; ++i) (*pg[k])[i] += g[k * n + i];
                   }
                 },
                 "stack");
}

Var select(const Var& a, std::size_t i) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw std::invalid_argument("select needs rank >= 2");
  if (i >= s[0]) throw std::out_of_range("select index out of range");
  const Shape inner(s.begin() + 1, s.end());
  const std::size_t n = shape_numel(inner);
  std::vector<double> data(a.value().data().begin() + static_cast<std::ptrdiff_t>(i * n),
                           a.value().data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return make_op(Tensor(inner, std::move(data)), {a},
                 [i, n](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t k = 0; k < n; ++k) (*pg[0])[i * n + k] += g[k];
                 },
                 "select");
}

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_string(sa) + " x " + shape_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out({m, n});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * y[p * n + j];
    }
  }
  return make_op(std::move(out), {a, b},
                 [m, k, n](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& x = self.input(0);
                   const Tensor& y = self.input(1);
                   if (pg[0]) {
                     Tensor& gx = *pg[0];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
                         gx[i * k + p] += acc;
                       }
                   }
                   if (pg[1]) {
                     Tensor& gy = *pg[1];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const double xv = x[i * k + p];
                         for (std::size_t j = 0; j < n; ++j) gy[p * n + j] += xv * g[i * n + j];
                       }
                   }
                 },
                 "matmul");
}

Var transpose(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw std::invalid_argument("transpose needs a matrix");
  const std::size_t m = s[0], n = s[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
  return make_op(std::move(out), {a},
                 [m, n](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j) (*pg[0])[i * n + j] += g[j * m + i];
                 },
                 "transpose");
}

Var softmax(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t o = r * n;
    double mx = x[o];
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[o + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[o + j] = std::exp(x[o + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[o + j] /= z;
  }
  return make_op(std::move(out), {a},
                 [rows, n](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& y = self.value;
                   for (std::size_t r = 0; r < rows; ++r) {
                     const std::size_t o = r * n;
                     double gy = 0.0;
                     for (std::size_t j = 0; j < n; ++j) gy += g[o + j] * y[o + j];
                     for (std::size_t j = 0; j < n; ++j) (*pg[0])[o + j] += y[o + j] * (g[o + j] - gy);
                   }
                 },
                 "softmax");
}

Var cross_entropy(const Var& logits, const std::vector<std::size_t>& targets) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != targets.size()) throw std::invalid_argument("cross_entropy: shape/target mismatch");
  const std::size_t m = s[0], n = s[1];
  const Tensor& x = logits.value();
  Tensor probs({m, n});
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw std::out_of_range("cross_entropy: target out of range");
    double mx = x[i * n];
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (probs[i * n + j] = std::exp(x[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    loss += mx + std::log(z) - x[i * n + targets[i]];
  }
  loss /= static_cast<double>(m);
  return make_op(Tensor::scalar(loss), {logits},
                 [probs = std::move(probs), targets, m, n](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   const double w = g[0] / static_cast<double>(m);
                   for (std::size_t i = 0; i < m; ++i) {
                     for (std::size_t j = 0; j < n; ++j) {
                       const double onehot = (j == targets[i]) ? 1.0 : 0.0;
                       (*pg[0])[i * n + j] += w * (probs[i * n + j] - onehot);
                     }
                   }
                 },
                 "cross_entropy");
}

Var l2_normalize(const Var& v) {
  const double norm = l2_norm(v.value());
  if (!(norm > 0.0)) throw NumericError("l2_normalize of a zero vector");
  return make_op((1.0 / norm) * v.value(), {v},
                 [norm](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& y = self.value;
                   const double gy = mgad::dot(g, y);
                   for (std::size_t i = 0; i < y.size(); ++i) (*pg[0])[i] += (g[i] - gy * y[i]) / norm;
                 },
                 "l2_normalize");
}

}  // namespace mgad::ad

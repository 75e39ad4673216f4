#include "dream/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "dream/errors.hpp"
#include "dream/flops.hpp"

namespace dream {

namespace {

thread_local bool t_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

// Wraps freshly computed values in a node, wiring the tape when needed.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> bwd, const char* op) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  if (t_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr& n) { return n->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(bwd);
    }
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw StateError(std::string(op) + ": undefined tensor");
}

void require_2d(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Row-wise log-softmax into out; returns nothing, rows of width v.
void log_softmax_rows(std::span<const double> x, std::size_t n, std::size_t v,
                      std::span<double> out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * v;
    double mx = xi[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(xi[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) out[i * v + j] = xi[j] - lse;
  }
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

std::size_t Tensor::rows() const {
  const auto& s = node_->shape;
  if (s.size() == 2) return s[0];
  if (s.size() <= 1) return 1;
  throw DimensionError("rows(): tensor of rank " + std::to_string(s.size()));
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  if (s.size() == 2) return s[1];
  if (s.size() == 1) return s[0];
  if (s.empty()) return 1;
  throw DimensionError("cols(): tensor of rank " + std::to_string(s.size()));
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item(): tensor is not a scalar " + shape_str(shape()));
  return node_->value[0];
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t c = cols();
  return std::span<const double>(node_->value).subspan(i * c, c);
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (node_->backward) throw StateError("set_requires_grad: only leaf tensors can be toggled");
  node_->requires_grad = on;
  return *this;
}

Tensor Tensor::clone() const {
  Tensor t(node_->shape, node_->value);
  t.node_->requires_grad = node_->requires_grad && !node_->backward;
  return t;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw StateError("backward: undefined loss");
  if (loss.node()->consumed) throw StateError("backward: graph already consumed");
  if (loss.numel() != 1) throw DimensionError("backward: loss is not a scalar " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw StateError("backward: loss was not produced by a recorded computation");

  // Iterative post-order DFS over interior nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->backward && child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  Node* root = loss.node().get();
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    n->backward = nullptr;
    n->inputs.clear();
    n->consumed = true;
    n->requires_grad = false;  // consumed interiors behave as constants
    if (n != root) n->grad.clear();
  }
}

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * p);
  kernels::matmul_nn(a.values(), b.values(), out, m, k, p);
  return make_result(
      {m, p}, std::move(out), {a.node(), b.node()},
      [m, k, p](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (na.requires_grad) kernels::matmul_nt(self.grad, nb.value, na.ensure_grad(), m, p, k, true);
        if (nb.requires_grad) kernels::matmul_tn(na.value, self.grad, nb.ensure_grad(), k, m, p, true);
      },
      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  const std::size_t n = x.rows(), in = x.cols(), out_dim = w.cols();
  if (w.rows() != in) {
    throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " +
                         shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != out_dim) throw DimensionError("linear: bias width mismatch");
  std::vector<double> out(n * out_dim);
  kernels::matmul_nn(x.values(), w.values(), out, n, in, out_dim);
  if (has_bias) {
    const auto b = bias.values();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += b[j];
    }
    flops::add(n * out_dim);
  }
  std::vector<NodePtr> inputs{x.node(), w.node()};
  if (has_bias) inputs.push_back(bias.node());
  return make_result(
      {n, out_dim}, std::move(out), std::move(inputs),
      [n, in, out_dim, has_bias](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nw = *self.inputs[1];
        if (nx.requires_grad) kernels::matmul_nt(self.grad, nw.value, nx.ensure_grad(), n, out_dim, in, true);
        if (nw.requires_grad) kernels::matmul_tn(nx.value, self.grad, nw.ensure_grad(), in, n, out_dim, true);
        if (has_bias && self.inputs[2]->requires_grad) {
          auto gb = self.inputs[2]->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < out_dim; ++j) gb[j] += self.grad[i * out_dim + j];
          }
        }
      },
      "linear");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  add_into(out, b.values());
  flops::add(out.size());
  return make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](Node& self) {
        for (auto& in : self.inputs) {
          if (in->requires_grad) add_into(in->ensure_grad(), self.grad);
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  flops::add(out.size());
  return make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](Node& self) {
        if (self.inputs[0]->requires_grad) add_into(self.inputs[0]->ensure_grad(), self.grad);
        if (self.inputs[1]->requires_grad) {
          auto g = self.inputs[1]->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

Tensor scale(const Tensor& a, double s) {
  require_defined(a, "scale");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= s;
  flops::add(out.size());
  return make_result(
      a.shape(), std::move(out), {a.node()},
      [s](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
      },
      "scale");
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  flops::add(a.numel());
  return make_result(
      {}, {acc}, {a.node()},
      [](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (double& x : g) x += self.grad[0];
      },
      "sum");
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double u = xv[i];
    out[i] = 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
  }
  flops::add(out.size());
  return make_result(
      x.shape(), std::move(out), {x.node()},
      [](Node& self) {
        Node& nx = *self.inputs[0];
        auto g = nx.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double u = nx.value[i];
          const double inner = c * (u + 0.044715 * u * u * u);
          const double t = std::tanh(inner);
          const double dinner = c * (1.0 + 3.0 * 0.044715 * u * u);
          const double d = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner;
          g[i] += d * self.grad[i];
        }
      },
      "gelu");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  require_defined(gain, "layer_norm");
  require_defined(bias, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) throw DimensionError("layer_norm: gain/bias width mismatch");
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> out(n * d), xhat(n * d), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = xv.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xi[j] - mean) * r;
      xhat[i * d + j] = h;
      out[i * d + j] = gv[j] * h + bv[j];
    }
  }
  flops::add(n * d);
  return make_result(
      {n, d}, std::move(out), {x.node(), gain.node(), bias.node()},
      [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ng = *self.inputs[1];
        Node& nb = *self.inputs[2];
        const auto& g = self.grad;
        if (ng.requires_grad) {
          auto gg = ng.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
        }
        if (nb.requires_grad) {
          auto gb = nb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
        if (nx.requires_grad) {
          auto gx = nx.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[i * d + j] * ng.value[j];
              m1 += dh;
              m2 += dh * xhat[i * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[i * d + j] * ng.value[j];
              gx[i * d + j] += rstd[i] * (dh - m1 - xhat[i * d + j] * m2);
            }
          }
        }
      },
      "layer_norm");
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
      throw DimensionError("embedding: id " + std::to_string(idx[i]) + " outside table of " +
                           std::to_string(v));
    }
    const auto r = table.row(static_cast<std::size_t>(idx[i]));
    std::copy(r.begin(), r.end(), out.begin() + static_cast<long>(i * d));
  }
  Shape shape{idx.size(), d};
  return make_result(
      std::move(shape), std::move(out), {table.node()},
      [d, idx = std::move(idx)](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          double* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
        }
      },
      "embedding");
}

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  require_2d(x, "gather_rows");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range " +
                           std::to_string(n));
    }
    const auto r = x.row(static_cast<std::size_t>(idx[i]));
    std::copy(r.begin(), r.end(), out.begin() + static_cast<long>(i * d));
  }
  Shape shape{idx.size(), d};
  return make_result(
      std::move(shape), std::move(out), {x.node()},
      [d, idx = std::move(idx)](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          double* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
        }
      },
      "gather_rows");
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_rows");
  require_2d(b, "concat_rows");
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: width mismatch");
  const std::size_t na = a.numel();
  std::vector<double> out;
  out.reserve(na + b.numel());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return make_result(
      {a.rows() + b.rows(), a.cols()}, std::move(out), {a.node(), b.node()},
      [na](Node& self) {
        if (self.inputs[0]->requires_grad) {
          add_into(self.inputs[0]->ensure_grad(), std::span<const double>(self.grad).first(na));
        }
        if (self.inputs[1]->requires_grad) {
          add_into(self.inputs[1]->ensure_grad(), std::span<const double>(self.grad).subspan(na));
        }
      },
      "concat_rows");
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const kernels::AttentionMask& mask, std::vector<double>* probs_out) {
  require_2d(q, "attention");
  require_2d(k, "attention");
  require_2d(v, "attention");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: query/key/value widths differ");
  }
  const kernels::AttentionShape s{q.rows(), k.rows(), heads, d / heads};
  std::vector<double> out(s.rows * d);
  auto probs = std::make_shared<std::vector<double>>(heads * s.rows * s.keys);
  kernels::attention_forward(q.values(), k.values(), v.values(), mask, s, out, *probs);
  if (probs_out) *probs_out = *probs;
  return make_result(
      {s.rows, d}, std::move(out), {q.node(), k.node(), v.node()},
      [s, mask, probs](Node& self) {
        Node& nq = *self.inputs[0];
        Node& nk = *self.inputs[1];
        Node& nv = *self.inputs[2];
        // Scratch buffers for inputs that do not need gradients.
        std::vector<double> sq, sk, sv;
        auto target = [](Node& n, std::vector<double>& scratch) -> std::span<double> {
          if (n.requires_grad) return n.ensure_grad();
          scratch.assign(n.value.size(), 0.0);
          return scratch;
        };
        kernels::attention_backward(nq.value, nk.value, nv.value, *probs, mask, s, self.grad,
                                    target(nq, sq), target(nk, sk), target(nv, sv));
      },
      "attention");
}

Tensor softmax_rows(const Tensor& x, double temperature) {
  require_2d(x, "softmax_rows");
  if (!(temperature > 0.0)) throw ParameterError("softmax_rows: temperature must be > 0");
  const std::size_t n = x.rows(), v = x.cols();
  std::vector<double> out(n * v);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = xv.data() + i * v;
    double mx = xi[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp((xi[j] - mx) / temperature);
      out[i * v + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < v; ++j) out[i * v + j] /= s;
  }
  flops::add(n * v * flops::kSoftmaxPerElement);
  std::vector<double> y = out;
  return make_result(
      {n, v}, std::move(out), {x.node()},
      [n, v, temperature, y = std::move(y)](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < v; ++j) dot += y[i * v + j] * self.grad[i * v + j];
          for (std::size_t j = 0; j < v; ++j) {
            g[i * v + j] += y[i * v + j] * (self.grad[i * v + j] - dot) / temperature;
          }
        }
      },
      "softmax_rows");
}

Tensor smooth_l1(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "smooth_l1");
  const auto xv = x.values();
  const auto yv = y.values();
  const std::size_t n = xv.size();
  if (n == 0) throw DimensionError("smooth_l1: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = xv[i] - yv[i];
    const double a = std::abs(d);
    acc += a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  flops::add(n);
  return make_result(
      {}, {acc / static_cast<double>(n)}, {x.node(), y.node()},
      [n](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ny = *self.inputs[1];
        const double g = self.grad[0] / static_cast<double>(n);
        std::span<double> gx, gy;
        if (nx.requires_grad) gx = nx.ensure_grad();
        if (ny.requires_grad) gy = ny.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double d = nx.value[i] - ny.value[i];
          const double dd = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
          if (!gx.empty()) gx[i] += g * dd;
          if (!gy.empty()) gy[i] -= g * dd;
        }
      },
      "smooth_l1");
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  require_same_shape(p_logits, q_logits, "kl_divergence");
  require_2d(p_logits, "kl_divergence");
  const std::size_t n = p_logits.rows(), v = p_logits.cols();
  if (v < 2) throw DimensionError("kl_divergence: need at least 2 classes");
  if (n == 0) throw DimensionError("kl_divergence: empty input");
  std::vector<double> logp(n * v), logq(n * v), rowkl(n);
  log_softmax_rows(p_logits.values(), n, v, logp);
  log_softmax_rows(q_logits.values(), n, v, logq);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double lp = logp[i * v + j];
      r += std::exp(lp) * (lp - logq[i * v + j]);
    }
    rowkl[i] = r;
    acc += r;
  }
  flops::add(n * v * (2 * flops::kSoftmaxPerElement + 3));
  return make_result(
      {}, {acc / static_cast<double>(n)}, {p_logits.node(), q_logits.node()},
      [n, v, logp = std::move(logp), logq = std::move(logq), rowkl = std::move(rowkl)](Node& self) {
        Node& np = *self.inputs[0];
        Node& nq = *self.inputs[1];
        const double g = self.grad[0] / static_cast<double>(n);
        if (np.requires_grad) {
          auto gp = np.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < v; ++j) {
              const double p = std::exp(logp[i * v + j]);
              gp[i * v + j] += g * p * (logp[i * v + j] - logq[i * v + j] - rowkl[i]);
            }
          }
        }
        if (nq.requires_grad) {
          auto gq = nq.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < v; ++j) {
              gq[i * v + j] += g * (std::exp(logq[i * v + j]) - std::exp(logp[i * v + j]));
            }
          }
        }
      },
      "kl_divergence");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_2d(logits, "cross_entropy");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: one target per row required");
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> logp(n * v);
  log_softmax_rows(logits.values(), n, v, logp);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0) continue;
    if (static_cast<std::size_t>(tgt[i]) >= v) throw DimensionError("cross_entropy: target out of range");
    acc -= logp[i * v + static_cast<std::size_t>(tgt[i])];
    ++count;
  }
  if (count == 0) throw DimensionError("cross_entropy: no supervised rows");
  flops::add(n * v * flops::kSoftmaxPerElement);
  return make_result(
      {}, {acc / static_cast<double>(count)}, {logits.node()},
      [n, v, count, tgt = std::move(tgt), logp = std::move(logp)](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        const double s = self.grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < n; ++i) {
          if (tgt[i] < 0) continue;
          for (std::size_t j = 0; j < v; ++j) g[i * v + j] += s * std::exp(logp[i * v + j]);
          g[i * v + static_cast<std::size_t>(tgt[i])] -= s;
        }
      },
      "cross_entropy");
}

}  // namespace dream

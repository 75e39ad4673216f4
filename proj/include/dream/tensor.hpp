#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dream/kernels.hpp"

namespace dream {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::span<double> ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major float64 tensor with an optional reverse-mode tape.
//
// Tensor is a handle: copies share the underlying storage, like a
// shared_ptr. Use clone() for an independent copy. Ops record a backward
// closure only when grad mode is enabled and some input requires grad.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  // 2-D accessors. A rank-1 tensor reads as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }
  std::span<const double> row(std::size_t i) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void clear_grad() { node_->grad.clear(); }

  // Independent leaf copy of the values; keeps requires_grad.
  Tensor clone() const;
  // Leaf sharing no graph history, values copied.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse pass from a scalar loss. Gradients accumulate additively into
// every reachable leaf with requires_grad; the graph is then released and a
// second call on the same loss throws StateError.
void backward(const Tensor& loss);

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x[n x in] * w[in x out] (+ bias[out])
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor gather_rows(const Tensor& x, std::span<const int> rows);
Tensor concat_rows(const Tensor& a, const Tensor& b);

// Multi-head attention over q[n x d], k/v[m x d]. When probs_out is given it
// receives the [heads x n x m] attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const kernels::AttentionMask& mask, std::vector<double>* probs_out = nullptr);

// Row-wise softmax(x / temperature). Throws ParameterError for temperature <= 0.
Tensor softmax_rows(const Tensor& x, double temperature = 1.0);

// Mean over all elements of the piecewise smooth-L1 penalty:
//   0.5 d^2 if |d| < 1, |d| - 0.5 otherwise, d = x - y.
Tensor smooth_l1(const Tensor& x, const Tensor& y);

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);

// Mean next-token cross entropy over rows whose target is >= 0.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace dream

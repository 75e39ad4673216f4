#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dream/tensor.hpp"

namespace dream {

// Named parameters, iterated in lexicographic order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;
  void zero_grad();
  void set_requires_grad(bool on);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamState {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> u;
  };

  std::uint64_t step() const { return t_; }
  const Moments* moments(const std::string& name) const;

 private:
  friend void adamw_step(ParamStore&, AdamState&, const AdamHyper&);
  std::map<std::string, Moments> moments_;
  std::uint64_t t_ = 0;
};

// Decoupled-weight-decay Adam with bias correction. Every trainable
// parameter must carry a gradient (StateError otherwise); grads are cleared.
void adamw_step(ParamStore& params, AdamState& state, const AdamHyper& hp);

// Returns the pre-clip global L2 norm of all gradients and rescales them so
// the norm is at most max_norm.
double clip_global_norm(ParamStore& params, double max_norm);

}  // namespace dream

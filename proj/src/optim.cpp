#include "dream/optim.hpp"

#include <cmath>

#include "dream/errors.hpp"

namespace dream {

void ParamStore::add(const std::string& name, Tensor t) {
  if (!params_.emplace(name, std::move(t)).second) {
    throw ValidationError("duplicate parameter name: " + name);
  }
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.clear_grad();
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [_, t] : params_) t.set_requires_grad(on);
}

const AdamState::Moments* AdamState::moments(const std::string& name) const {
  auto it = moments_.find(name);
  return it == moments_.end() ? nullptr : &it->second;
}

void adamw_step(ParamStore& params, AdamState& state, const AdamHyper& hp) {
  for (auto& [name, p] : params) {
    if (p.requires_grad() && !p.has_grad()) {
      throw StateError("adamw_step: parameter '" + name + "' has no gradient");
    }
  }
  ++state.t_;
  const double t = static_cast<double>(state.t_);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto& mom = state.moments_[name];
    if (mom.m.empty()) {
      mom.m.assign(p.numel(), 0.0);
      mom.u.assign(p.numel(), 0.0);
    }
    auto w = p.mutable_values();
    const auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.m[i] = hp.beta1 * mom.m[i] + (1.0 - hp.beta1) * g[i];
      mom.u[i] = hp.beta2 * mom.u[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double uhat = mom.u[i] / bc2;
      w[i] *= 1.0 - hp.lr * hp.weight_decay;
      w[i] -= hp.lr * mhat / (std::sqrt(uhat) + hp.eps);
    }
    p.clear_grad();
  }
}

double clip_global_norm(ParamStore& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ParameterError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  for (auto& [_, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, p] : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace dream

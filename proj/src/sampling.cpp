#include "dream/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "dream/errors.hpp"

namespace dream {

Dist softmax_probs(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax_probs: temperature must be positive");
  if (logits.empty()) throw ValidationError("softmax_probs: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  Dist p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    s += p[i];
  }
  for (double& x : p) x /= s;
  return p;
}

double accept_probability(double p_target, double p_draft) {
  if (!(p_draft > 0.0)) throw ValidationError("accept_probability: drafted token has zero draft probability");
  if (p_target < 0.0) throw ValidationError("accept_probability: negative target probability");
  return std::min(1.0, p_target / p_draft);
}

Dist residual_distribution(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("residual_distribution: size mismatch");
  Dist r(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    r[i] = std::max(p[i] - q[i], 0.0);
    s += r[i];
  }
  if (s <= 0.0) return Dist(p.begin(), p.end());
  for (double& x : r) x /= s;
  return r;
}

int RandomSampler::categorical(std::span<const double> probs) {
  double total = 0.0;
  for (double x : probs) total += x;
  if (!(total > 0.0)) throw ValidationError("categorical: distribution has no mass");
  const double u = rng_.uniform() * total;
  double acc = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = static_cast<int>(i);
    if (u < acc) return last;
  }
  return last;
}

int EnumerationSampler::choose(std::vector<double> probs) {
  if (cursor_ < path_.size()) return path_[cursor_++].index;
  int first = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) {
      first = static_cast<int>(i);
      break;
    }
  }
  if (first < 0) throw ValidationError("categorical: distribution has no mass");
  path_.push_back({std::move(probs), first});
  ++cursor_;
  return first;
}

int EnumerationSampler::categorical(std::span<const double> probs) {
  double total = 0.0;
  for (double x : probs) total += x;
  if (!(total > 0.0)) throw ValidationError("categorical: distribution has no mass");
  std::vector<double> p(probs.begin(), probs.end());
  for (double& x : p) x /= total;
  return choose(std::move(p));
}

bool EnumerationSampler::bernoulli(double p) {
  p = std::clamp(p, 0.0, 1.0);
  return choose({p, 1.0 - p}) == 0;
}

bool EnumerationSampler::advance() {
  while (!path_.empty()) {
    Choice& c = path_.back();
    for (std::size_t i = static_cast<std::size_t>(c.index) + 1; i < c.probs.size(); ++i) {
      if (c.probs[i] > 0.0) {
        c.index = static_cast<int>(i);
        return true;
      }
    }
    path_.pop_back();
  }
  return false;
}

std::map<std::vector<int>, double> EnumerationSampler::enumerate(
    const std::function<std::vector<int>(Sampler&)>& run, std::size_t max_paths) {
  EnumerationSampler s;
  std::map<std::vector<int>, double> dist;
  std::size_t paths = 0;
  do {
    if (++paths > max_paths) throw ValidationError("enumerate: path budget exceeded");
    s.cursor_ = 0;
    const auto outcome = run(s);
    if (s.cursor_ != s.path_.size()) throw Error("enumerate: procedure is not deterministic given its choices");
    double w = 1.0;
    for (const auto& c : s.path_) w *= c.probs[static_cast<std::size_t>(c.index)];
    dist[outcome] += w;
  } while (s.advance());
  return dist;
}

double total_variation(const std::map<std::vector<int>, double>& p,
                       const std::map<std::vector<int>, double>& q) {
  double d = 0.0;
  for (const auto& [k, v] : p) {
    const auto it = q.find(k);
    d += std::abs(v - (it == q.end() ? 0.0 : it->second));
  }
  for (const auto& [k, v] : q) {
    if (!p.count(k)) d += std::abs(v);
  }
  return 0.5 * d;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("total_variation: size mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d += std::abs(p[i] - q[i]);
  return 0.5 * d;
}

}  // namespace dream

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "dream/rng.hpp"

namespace dream {

using Dist = std::vector<double>;

// softmax(logits / temperature); temperature must be > 0.
Dist softmax_probs(std::span<const double> logits, double temperature);

// min(1, p_target / p_draft). p_draft must be positive.
double accept_probability(double p_target, double p_draft);

// normalize(max(p - q, 0)); returns p when the positive part vanishes.
Dist residual_distribution(std::span<const double> p, std::span<const double> q);

// Source of every random decision taken while decoding.
class Sampler {
 public:
  virtual ~Sampler() = default;
  virtual int categorical(std::span<const double> probs) = 0;
  virtual bool bernoulli(double p) = 0;
};

class RandomSampler final : public Sampler {
 public:
  explicit RandomSampler(std::uint64_t seed) : rng_(seed) {}
  int categorical(std::span<const double> probs) override;
  bool bernoulli(double p) override { return rng_.uniform() < p; }

 private:
  SplitMix64 rng_;
};

// Walks every branch of a randomized procedure. Each call of `run` replays a
// fixed prefix of decisions and takes the first nonzero option past it; the
// product of the chosen branch probabilities weights the outcome.
class EnumerationSampler final : public Sampler {
 public:
  int categorical(std::span<const double> probs) override;
  bool bernoulli(double p) override;

  // Exact distribution of outcome(run(sampler)) over all decision paths.
  static std::map<std::vector<int>, double> enumerate(
      const std::function<std::vector<int>(Sampler&)>& run, std::size_t max_paths = 10'000'000);

 private:
  struct Choice {
    std::vector<double> probs;
    int index;
  };
  int choose(std::vector<double> probs);
  bool advance();

  std::vector<Choice> path_;
  std::size_t cursor_ = 0;
};

// 0.5 * sum |p - q| over the union of supports.
double total_variation(const std::map<std::vector<int>, double>& p,
                       const std::map<std::vector<int>, double>& q);
double total_variation(std::span<const double> p, std::span<const double> q);

}  // namespace dream

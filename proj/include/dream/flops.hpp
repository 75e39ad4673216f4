#pragma once

#include <cstdint>

// Forward/backward FLOP accounting. Counters are per thread so parallel
// decode sessions never contend; read them from the thread that did the work.
//
// Constants: matmul 2*m*k*p, elementwise 1 per element, attention softmax
// 5 per score element.
namespace dream::flops {

inline constexpr std::uint64_t kSoftmaxPerElement = 5;

std::uint64_t current();
void add(std::uint64_t n);
void reset();

// Measures FLOPs issued on this thread during its lifetime.
class Scope {
 public:
  Scope() : start_(current()) {}
  std::uint64_t elapsed() const { return current() - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace dream::flops

#include "dream/flops.hpp"

namespace dream::flops {

namespace {
thread_local std::uint64_t t_count = 0;
}

std::uint64_t current() { return t_count; }
void add(std::uint64_t n) { t_count += n; }
void reset() { t_count = 0; }

}  // namespace dream::flops

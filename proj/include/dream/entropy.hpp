#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dream/model.hpp"
#include "dream/task.hpp"

namespace dream::entropy {

struct EntropyProfile {
  std::uint64_t sample_id = 0;
  int tokens = 0;
  std::vector<double> ae;  // per layer, nats
  int layer = 0;           // argmin, 0-based block index
};

// Average attention entropy of one layer:
//   -(1/n) * sum_i sum_j A[i,j] log A[i,j], averaged over heads,
// with 0 log 0 = 0. probs is [heads x rows x keys]; only the first `rows`
// rows enter the sum. Rows must sum to 1 within 1e-6 (ValidationError).
double attention_entropy(std::span<const double> probs, int heads, int rows, int keys);
// Tensor form: A is [heads x n x n].
double attention_entropy(const Tensor& a);

// Per-layer entropy over rows [0, rows) of the trace and its argmin (ties to
// the lower layer). rows <= 0 means all rows.
EntropyProfile select_layer(const LayerTrace& trace, int rows = 0);

// Per-row variant: entry r is the argmin layer when only rows [0, r] count.
std::vector<int> select_layer_per_step(const LayerTrace& trace);

using CalibrationMap = std::map<std::uint64_t, int>;

// One traced target forward per sample over its teacher sequence. With a
// non-empty cache_path, a cache written for the same model fingerprint is
// read back instead of recomputing; otherwise the cache is (re)written.
CalibrationMap calibrate(const std::vector<task::TaskSample>& dataset, const TargetModel& target,
                         const std::string& cache_path = "");

std::uint64_t model_fingerprint(const TargetModel& target);

void write_cache(const std::string& path, const CalibrationMap& map, std::uint64_t fingerprint);
// Returns false if missing or written for another fingerprint.
bool read_cache(const std::string& path, std::uint64_t fingerprint, CalibrationMap& out);

}  // namespace dream::entropy

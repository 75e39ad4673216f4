#include "dream/entropy.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "dream/errors.hpp"

namespace dream::entropy {

namespace {

// Sum over rows [0, rows) of the per-row entropy, averaged over heads.
std::vector<double> row_entropies(std::span<const double> probs, int heads, int rows, int keys) {
  std::vector<double> h(static_cast<std::size_t>(rows), 0.0);
  for (int hd = 0; hd < heads; ++hd) {
    for (int i = 0; i < rows; ++i) {
      const double* row = probs.data() + (static_cast<std::size_t>(hd) * rows + i) * keys;
      double s = 0.0, e = 0.0;
      for (int j = 0; j < keys; ++j) {
        const double a = row[j];
        if (a < 0.0) throw ValidationError("attention_entropy: negative attention weight");
        s += a;
        if (a > 0.0) e -= a * std::log(a);
      }
      if (std::abs(s - 1.0) > 1e-6) throw ValidationError("attention_entropy: attention row is not stochastic");
      h[static_cast<std::size_t>(i)] += e / heads;
    }
  }
  return h;
}

// Views the first `rows` rows of each head inside a trace laid out with
// trace.rows rows per head.
std::vector<double> head_rows(const LayerTrace& t, int layer, int rows) {
  const auto& a = t.attn[static_cast<std::size_t>(layer)];
  if (rows == t.rows) return a;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(t.heads) * rows * t.keys);
  for (int h = 0; h < t.heads; ++h) {
    const auto* base = a.data() + static_cast<std::size_t>(h) * t.rows * t.keys;
    out.insert(out.end(), base, base + static_cast<std::size_t>(rows) * t.keys);
  }
  return out;
}

}  // namespace

double attention_entropy(std::span<const double> probs, int heads, int rows, int keys) {
  if (heads <= 0 || rows <= 0 || keys <= 0) throw ValidationError("attention_entropy: empty attention");
  if (probs.size() < static_cast<std::size_t>(heads) * rows * keys) {
    throw DimensionError("attention_entropy: buffer smaller than extents");
  }
  const auto h = row_entropies(probs, heads, rows, keys);
  double total = 0.0;
  for (double x : h) total += x;
  return total / rows;
}

double attention_entropy(const Tensor& a) {
  if (a.rank() != 3) throw DimensionError("attention_entropy: expected [heads x n x n]");
  const auto& s = a.shape();
  return attention_entropy(a.values(), static_cast<int>(s[0]), static_cast<int>(s[1]), static_cast<int>(s[2]));
}

EntropyProfile select_layer(const LayerTrace& trace, int rows) {
  if (trace.layers() == 0) throw ValidationError("select_layer: empty trace");
  const int n = rows > 0 ? std::min(rows, trace.rows) : trace.rows;
  EntropyProfile p;
  p.tokens = n;
  for (int l = 0; l < trace.layers(); ++l) {
    const auto probs = head_rows(trace, l, n);
    p.ae.push_back(attention_entropy(probs, trace.heads, n, trace.keys));
    if (p.ae.back() < p.ae[static_cast<std::size_t>(p.layer)]) p.layer = l;
  }
  return p;
}

std::vector<int> select_layer_per_step(const LayerTrace& trace) {
  if (trace.layers() == 0) throw ValidationError("select_layer: empty trace");
  const int n = trace.rows;
  std::vector<std::vector<double>> prefix(static_cast<std::size_t>(trace.layers()));
  for (int l = 0; l < trace.layers(); ++l) {
    const auto h = row_entropies(trace.attn[static_cast<std::size_t>(l)], trace.heads, n, trace.keys);
    double run = 0.0;
    for (int i = 0; i < n; ++i) {
      run += h[static_cast<std::size_t>(i)];
      prefix[static_cast<std::size_t>(l)].push_back(run / (i + 1));
    }
  }
  std::vector<int> out(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int l = 1; l < trace.layers(); ++l) {
      if (prefix[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] <
          prefix[static_cast<std::size_t>(best)][static_cast<std::size_t>(i)]) {
        best = l;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

std::uint64_t model_fingerprint(const TargetModel& target) {
  const auto bytes = encode_checkpoint(target.to_checkpoint());
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

void write_cache(const std::string& path, const CalibrationMap& map, std::uint64_t fingerprint) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f << "# model " << fingerprint << "\n";
  for (const auto& [id, layer] : map) f << id << '\t' << layer << '\n';
}

bool read_cache(const std::string& path, std::uint64_t fingerprint, CalibrationMap& out) {
  std::ifstream f(path);
  if (!f) return false;
  std::string line;
  if (!std::getline(f, line) || line != "# model " + std::to_string(fingerprint)) return false;
  CalibrationMap map;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::uint64_t id = 0;
    int layer = 0;
    if (!(in >> id >> layer)) throw ValidationError("calibration cache: malformed line '" + line + "'");
    map[id] = layer;
  }
  out = std::move(map);
  return true;
}

CalibrationMap calibrate(const std::vector<task::TaskSample>& dataset, const TargetModel& target,
                         const std::string& cache_path) {
  const std::uint64_t fp = cache_path.empty() ? 0 : model_fingerprint(target);
  if (!cache_path.empty()) {
    CalibrationMap cached;
    if (read_cache(cache_path, fp, cached)) {
      bool complete = true;
      for (const auto& s : dataset) complete = complete && cached.count(s.seed);
      if (complete) return cached;
    }
  }
  NoGradGuard ng;
  CalibrationMap map;
  for (const auto& s : dataset) {
    const TokenSequence seq = task::teacher_sequence(target, s);
    const auto out = target_forward(target, seq.ids, nullptr, true);
    map[s.seed] = select_layer(*out.trace).layer;
  }
  if (!cache_path.empty()) write_cache(cache_path, map, fp);
  return map;
}

}  // namespace dream::entropy

#include "dream/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "dream/errors.hpp"
#include "dream/flops.hpp"

namespace dream::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::kParallel};

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelThreshold = 1 << 15;

template <class F>
void for_each_visible(const AttentionMask& mask, int row, F&& f) {
  const int p = mask.prefix[static_cast<std::size_t>(row)];
  for (int j = 0; j < p; ++j) f(j);
  if (!mask.extra.empty()) {
    for (int j : mask.extra[static_cast<std::size_t>(row)]) f(j);
  }
}

void attention_row(const double* q, const double* k, const double* v, const AttentionMask& mask,
                   const AttentionShape& s, std::size_t h, std::size_t i, double* scores,
                   double* out, double* probs) {
  const std::size_t d = s.heads * s.head_dim;
  const std::size_t z = s.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(z));
  const double* qi = q + i * d + h * z;
  double* oi = out + i * d + h * z;
  double* prow = probs + (h * s.rows + i) * s.keys;
  std::fill(prow, prow + s.keys, 0.0);
  std::fill(oi, oi + z, 0.0);

  double mx = -std::numeric_limits<double>::infinity();
  int count = 0;
  for_each_visible(mask, static_cast<int>(i), [&](int j) {
    const double* kj = k + static_cast<std::size_t>(j) * d + h * z;
    double acc = 0.0;
    for (std::size_t t = 0; t < z; ++t) acc += qi[t] * kj[t];
    acc *= scale;
    scores[j] = acc;
    mx = std::max(mx, acc);
    ++count;
  });
  if (count == 0) return;

  double sum = 0.0;
  for_each_visible(mask, static_cast<int>(i), [&](int j) {
    const double e = std::exp(scores[j] - mx);
    scores[j] = e;
    sum += e;
  });
  const double inv = 1.0 / sum;
  for_each_visible(mask, static_cast<int>(i), [&](int j) {
    const double p = scores[j] * inv;
    prow[j] = p;
    const double* vj = v + static_cast<std::size_t>(j) * d + h * z;
    for (std::size_t t = 0; t < z; ++t) oi[t] += p * vj[t];
  });
}

void count_attention_flops(const AttentionMask& mask, const AttentionShape& s) {
  std::uint64_t visible = 0;
  for (int i = 0; i < mask.rows(); ++i) visible += static_cast<std::uint64_t>(mask.visible_count(i));
  flops::add(visible * s.heads * (4 * s.head_dim + flops::kSoftmaxPerElement));
}

void check_sizes(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t na, std::size_t nb, std::size_t nc) {
  if (a.size() < na || b.size() < nb || c.size() < nc) {
    throw DimensionError("matmul: buffer smaller than declared extents");
  }
}

}  // namespace

Backend backend() { return g_backend.load(std::memory_order_relaxed); }
void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }

AttentionMask AttentionMask::causal(int rows, int offset) {
  AttentionMask m;
  m.prefix.resize(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) m.prefix[static_cast<std::size_t>(i)] = offset + i + 1;
  return m;
}

AttentionMask AttentionMask::full(int rows, int keys) {
  AttentionMask m;
  m.prefix.assign(static_cast<std::size_t>(rows), keys);
  return m;
}

bool AttentionMask::visible(int row, int key) const {
  if (key < prefix[static_cast<std::size_t>(row)]) return true;
  if (extra.empty()) return false;
  const auto& e = extra[static_cast<std::size_t>(row)];
  return std::binary_search(e.begin(), e.end(), key);
}

int AttentionMask::visible_count(int row) const {
  int n = prefix[static_cast<std::size_t>(row)];
  if (!extra.empty()) n += static_cast<int>(extra[static_cast<std::size_t>(row)].size());
  return n;
}

void AttentionMask::validate(int n_rows, int keys) const {
  if (rows() != n_rows) {
    throw DimensionError("attention mask has " + std::to_string(rows()) + " rows, expected " +
                         std::to_string(n_rows));
  }
  if (!extra.empty() && static_cast<int>(extra.size()) != n_rows) {
    throw DimensionError("attention mask extra list count mismatch");
  }
  for (int i = 0; i < n_rows; ++i) {
    const int p = prefix[static_cast<std::size_t>(i)];
    if (p < 0 || p > keys) throw DimensionError("attention mask prefix out of range");
    if (extra.empty()) continue;
    int last = p - 1;
    for (int j : extra[static_cast<std::size_t>(i)]) {
      if (j <= last || j >= keys) throw ValidationError("attention mask extra indices must ascend");
      last = j;
    }
  }
}

void matmul_nn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a, b, c, m * k, k * n, m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      c[i * n + j] = acc;
    }
  }
}

void matmul_nn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a, b, c, m * k, k * n, m * n);
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (long i = 0; i < rows; ++i) {
    double* ci = pc + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = pa + static_cast<std::size_t>(i) * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double x = ai[t];
      const double* bt = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bt[j];
    }
  }
}

void matmul_nt_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a, b, c, m * k, n * k, m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[j * k + t];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

void matmul_nt_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a, b, c, m * k, n * k, m * n);
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (long i = 0; i < rows; ++i) {
    const double* ai = pa + static_cast<std::size_t>(i) * k;
    double* ci = pc + static_cast<std::size_t>(i) * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = pb + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += ai[t] * bj[t];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void matmul_tn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a, b, c, k * m, k * n, m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[t * m + i] * b[t * n + j];
      c[i * n + j] = acc;
    }
  }
}

void matmul_tn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a, b, c, k * m, k * n, m * n);
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (long i = 0; i < rows; ++i) {
    double* ci = pc + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double x = pa[t * m + static_cast<std::size_t>(i)];
      const double* bt = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bt[j];
    }
  }
}

void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  flops::add(2 * m * k * n);
  if (backend() == Backend::kSerial) {
    matmul_nn_serial(a, b, c, m, k, n, accumulate);
  } else {
    matmul_nn_parallel(a, b, c, m, k, n, accumulate);
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  flops::add(2 * m * k * n);
  if (backend() == Backend::kSerial) {
    matmul_nt_serial(a, b, c, m, k, n, accumulate);
  } else {
    matmul_nt_parallel(a, b, c, m, k, n, accumulate);
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  flops::add(2 * m * k * n);
  if (backend() == Backend::kSerial) {
    matmul_tn_serial(a, b, c, m, k, n, accumulate);
  } else {
    matmul_tn_parallel(a, b, c, m, k, n, accumulate);
  }
}

void attention_forward_serial(std::span<const double> q, std::span<const double> k,
                              std::span<const double> v, const AttentionMask& mask,
                              const AttentionShape& s, std::span<double> out,
                              std::span<double> probs) {
  std::vector<double> scores(std::max<std::size_t>(s.keys, 1));
  for (std::size_t h = 0; h < s.heads; ++h) {
    for (std::size_t i = 0; i < s.rows; ++i) {
      attention_row(q.data(), k.data(), v.data(), mask, s, h, i, scores.data(), out.data(),
                    probs.data());
    }
  }
}

void attention_forward_parallel(std::span<const double> q, std::span<const double> k,
                                std::span<const double> v, const AttentionMask& mask,
                                const AttentionShape& s, std::span<double> out,
                                std::span<double> probs) {
  const long total = static_cast<long>(s.heads * s.rows);
  const bool big = s.heads * s.rows * s.keys * s.head_dim > kParallelThreshold;
#pragma omp parallel if (big)
  {
    std::vector<double> scores(std::max<std::size_t>(s.keys, 1));
#pragma omp for schedule(static)
    for (long hi = 0; hi < total; ++hi) {
      const std::size_t h = static_cast<std::size_t>(hi) / s.rows;
      const std::size_t i = static_cast<std::size_t>(hi) % s.rows;
      attention_row(q.data(), k.data(), v.data(), mask, s, h, i, scores.data(), out.data(),
                    probs.data());
    }
  }
}

void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionShape& s, std::span<double> out, std::span<double> probs) {
  const std::size_t d = s.heads * s.head_dim;
  if (q.size() != s.rows * d || k.size() != s.keys * d || v.size() != s.keys * d ||
      out.size() != s.rows * d || probs.size() != s.heads * s.rows * s.keys) {
    throw DimensionError("attention: buffer extents do not match shape");
  }
  mask.validate(static_cast<int>(s.rows), static_cast<int>(s.keys));
  count_attention_flops(mask, s);
  if (backend() == Backend::kSerial) {
    attention_forward_serial(q, k, v, mask, s, out, probs);
  } else {
    attention_forward_parallel(q, k, v, mask, s, out, probs);
  }
}

void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs,
                        const AttentionMask& mask, const AttentionShape& s,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv) {
  const std::size_t d = s.heads * s.head_dim;
  const std::size_t z = s.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(z));
  count_attention_flops(mask, s);
  count_attention_flops(mask, s);
  const long heads = static_cast<long>(s.heads);
  const bool big = backend() == Backend::kParallel &&
                   s.heads * s.rows * s.keys * s.head_dim > kParallelThreshold;
#pragma omp parallel if (big)
  {
    std::vector<double> dp(std::max<std::size_t>(s.keys, 1));
#pragma omp for schedule(static)
    for (long hl = 0; hl < heads; ++hl) {
      const std::size_t h = static_cast<std::size_t>(hl);
      for (std::size_t i = 0; i < s.rows; ++i) {
        const double* prow = probs.data() + (h * s.rows + i) * s.keys;
        const double* go = dout.data() + i * d + h * z;
        const double* qi = q.data() + i * d + h * z;
        double* dqi = dq.data() + i * d + h * z;
        double dot = 0.0;
        for_each_visible(mask, static_cast<int>(i), [&](int j) {
          const double* vj = v.data() + static_cast<std::size_t>(j) * d + h * z;
          double acc = 0.0;
          for (std::size_t t = 0; t < z; ++t) acc += go[t] * vj[t];
          dp[static_cast<std::size_t>(j)] = acc;
          dot += prow[j] * acc;
        });
        for_each_visible(mask, static_cast<int>(i), [&](int j) {
          const double p = prow[j];
          const double ds = p * (dp[static_cast<std::size_t>(j)] - dot) * scale;
          const double* kj = k.data() + static_cast<std::size_t>(j) * d + h * z;
          double* dkj = dk.data() + static_cast<std::size_t>(j) * d + h * z;
          double* dvj = dv.data() + static_cast<std::size_t>(j) * d + h * z;
          for (std::size_t t = 0; t < z; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
            dvj[t] += p * go[t];
          }
        });
      }
    }
  }
}

}  // namespace dream::kernels

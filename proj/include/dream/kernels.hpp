#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Dense kernels behind the tensor ops. Every kernel has a serial reference
// implementation (kept for tests and the benchmark) and an OpenMP variant.
// Both compute each output row with the same summation order, so results do
// not depend on how many rows are processed in one call.
namespace dream::kernels {

enum class Backend { kSerial, kParallel };

Backend backend();
void set_backend(Backend b);

// RAII switch used by tests that compare the two backends end to end.
class BackendGuard {
 public:
  explicit BackendGuard(Backend b) : prev_(backend()) { set_backend(b); }
  ~BackendGuard() { set_backend(prev_); }
  BackendGuard(const BackendGuard&) = delete;
  BackendGuard& operator=(const BackendGuard&) = delete;

 private:
  Backend prev_;
};

// Which key rows each query row may attend to: [0, prefix[i]) followed by
// the ascending indices extra[i] (all >= prefix[i]). A row with no visible
// key produces a zero output.
struct AttentionMask {
  std::vector<int> prefix;
  std::vector<std::vector<int>> extra;  // empty, or one list per row

  static AttentionMask causal(int rows, int offset);
  static AttentionMask full(int rows, int keys);

  int rows() const { return static_cast<int>(prefix.size()); }
  bool visible(int row, int key) const;
  int visible_count(int row) const;
  // Throws DimensionError/ValidationError on out-of-range or unsorted entries.
  void validate(int rows, int keys) const;
};

// C[m x n] (+)= A[m x k] * B[k x n]
void matmul_nn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_nn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate);
// C[m x n] (+)= A[m x k] * B[n x k]^T
void matmul_nt_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_nt_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate);
// C[m x n] (+)= A[k x m]^T * B[k x n]
void matmul_tn_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_tn_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// Dispatch on backend(). These also charge 2*m*k*n FLOPs.
void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// Multi-head scaled dot-product attention.
//   q: [n x d], k, v: [m x d], d = heads * z, out: [n x d]
//   probs: [heads x n x m], dense, zero where masked.
struct AttentionShape {
  std::size_t rows;  // n
  std::size_t keys;  // m
  std::size_t heads;
  std::size_t head_dim;  // z
};

void attention_forward_serial(std::span<const double> q, std::span<const double> k,
                              std::span<const double> v, const AttentionMask& mask,
                              const AttentionShape& s, std::span<double> out,
                              std::span<double> probs);
void attention_forward_parallel(std::span<const double> q, std::span<const double> k,
                                std::span<const double> v, const AttentionMask& mask,
                                const AttentionShape& s, std::span<double> out,
                                std::span<double> probs);
void attention_forward(std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, const AttentionMask& mask,
                       const AttentionShape& s, std::span<double> out, std::span<double> probs);

// Accumulates into dq, dk, dv. Parallelized over heads (disjoint columns).
void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs,
                        const AttentionMask& mask, const AttentionShape& s,
                        std::span<const double> dout, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv);

}  // namespace dream::kernels

#pragma once

#include <cstddef>
#include <vector>

// Hot data-parallel kernels. Each has an OpenMP variant (the default) and a
// serial reference implementation used by tests and the benchmark target.
// All variants are bitwise deterministic regardless of thread count: work is
// partitioned so every output element is produced by exactly one thread with
// a fixed accumulation order.

namespace nlf::kernels {

// C = alpha*op(A)*op(B) + beta*C, row-major, op = optional transpose.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* A, std::size_t lda, const double* B,
          std::size_t ldb, double beta, double* C, std::size_t ldc);
void gemm_serial(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 double alpha, const double* A, std::size_t lda, const double* B,
                 std::size_t ldb, double beta, double* C, std::size_t ldc);

// Exact 3D nearest neighbor (squared L2, ties resolved to the lowest point
// index). pts/queries are packed xyz triples. Grid-accelerated.
void nn3(const double* pts, std::size_t n, const double* queries, std::size_t m,
         int* out_idx, double* out_d2);
void nn3_serial(const double* pts, std::size_t n, const double* queries,
                std::size_t m, int* out_idx, double* out_d2);

// Argmin over rows of B for each row of A under squared L2 in `dim`
// dimensions (feature matching). Ties resolved to the lowest index.
void feature_nn(const double* A, std::size_t n, const double* B, std::size_t m,
                std::size_t dim, int* out_idx);
void feature_nn_serial(const double* A, std::size_t n, const double* B,
                       std::size_t m, std::size_t dim, int* out_idx);

}  // namespace nlf::kernels

#include "nlf/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nlf::kernels {

namespace {

inline double at(const double* M, std::size_t ld, std::size_t r, std::size_t c) {
  return M[r * ld + c];
}

// Four-way unrolled dot product. Fixed summation order keeps results
// reproducible while still letting the compiler vectorize.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return ((s0 + s1) + (s2 + s3));
}

// One output row of C for the notrans/notrans case: axpy over k so the inner
// loop streams B rows contiguously.
inline void gemm_nn_row(std::size_t i, std::size_t n, std::size_t k, double alpha,
                        const double* A, std::size_t lda, const double* B,
                        std::size_t ldb, double beta, double* C, std::size_t ldc) {
  double* c = C + i * ldc;
  if (beta == 0.0) {
    std::fill(c, c + n, 0.0);
  } else if (beta != 1.0) {
    for (std::size_t j = 0; j < n; ++j) c[j] *= beta;
  }
  const double* a = A + i * lda;
  for (std::size_t kk = 0; kk < k; ++kk) {
    double av = alpha * a[kk];
    if (av == 0.0) continue;
    const double* b = B + kk * ldb;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
  }
}

// Row i of C for transposed A: axpy over k, walking A by column, so the inner
// loop still streams B rows contiguously.
inline void gemm_tn_row(std::size_t i, std::size_t n, std::size_t k, double alpha,
                        const double* A, std::size_t lda, const double* B,
                        std::size_t ldb, double beta, double* C, std::size_t ldc) {
  double* c = C + i * ldc;
  if (beta == 0.0) {
    std::fill(c, c + n, 0.0);
  } else if (beta != 1.0) {
    for (std::size_t j = 0; j < n; ++j) c[j] *= beta;
  }
  for (std::size_t kk = 0; kk < k; ++kk) {
    double av = alpha * at(A, lda, kk, i);
    if (av == 0.0) continue;
    const double* b = B + kk * ldb;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
  }
}

// One output row; shared by the serial and OpenMP entry points so both
// accumulate in the same order and agree bitwise.
inline void gemm_row(bool ta, bool tb, std::size_t i, std::size_t n, std::size_t k,
                     double alpha, const double* A, std::size_t lda, const double* B,
                     std::size_t ldb, double beta, double* C, std::size_t ldc) {
  if (!ta && !tb) {
    gemm_nn_row(i, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
    return;
  }
  if (ta && !tb) {
    gemm_tn_row(i, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
    return;
  }
  double* c = C + i * ldc;
  for (std::size_t j = 0; j < n; ++j) {
    double acc;
    if (!ta && tb) {
      // row i of A dot row j of B, both contiguous
      acc = dot(A + i * lda, B + j * ldb, k);
    } else {
      acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk)
        acc += at(A, lda, kk, i) * at(B, ldb, j, kk);
    }
    c[j] = alpha * acc + (beta == 0.0 ? 0.0 : beta * c[j]);
  }
}

// A^T * B with tall A (gradient-of-weights shape): accumulate outer products
// over fixed 2048-row chunks so A and B stream once. Chunk partials are
// merged in index order, which keeps the result independent of thread count.
void gemm_tn_chunked(bool parallel, std::size_t m, std::size_t n, std::size_t k,
                     double alpha, const double* A, std::size_t lda, const double* B,
                     std::size_t ldb, double beta, double* C, std::size_t ldc) {
  constexpr std::size_t kChunk = 2048;
  std::size_t nchunks = (k + kChunk - 1) / kChunk;
  std::vector<double> partials(nchunks * m * n, 0.0);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t ci = 0; ci < (std::int64_t)nchunks; ++ci) {
    double* P = partials.data() + (std::size_t)ci * m * n;
    std::size_t k0 = (std::size_t)ci * kChunk, k1 = std::min(k, k0 + kChunk);
    for (std::size_t kk = k0; kk < k1; ++kk) {
      const double* a = A + kk * lda;
      const double* b = B + kk * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        double av = a[i];
        if (av == 0.0) continue;
        double* p = P + i * n;
        for (std::size_t j = 0; j < n; ++j) p[j] += av * b[j];
      }
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t ci = 0; ci < nchunks; ++ci) s += partials[(ci * m + i) * n + j];
      double* c = C + i * ldc + j;
      *c = alpha * s + (beta == 0.0 ? 0.0 : beta * *c);
    }
}

void gemm_impl(bool parallel, bool ta, bool tb, std::size_t m, std::size_t n,
               std::size_t k, double alpha, const double* A, std::size_t lda,
               const double* B, std::size_t ldb, double beta, double* C,
               std::size_t ldc) {
  if (ta && !tb && m <= 160 && k >= 4096) {
    gemm_tn_chunked(parallel, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
    return;
  }
  if (!ta && tb && n <= 160 && m >= 64) {
    // gradient-of-input shape: B is a small weight matrix, so transpose it
    // once and run the fast streaming path.
    std::vector<double> BT(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t kk = 0; kk < k; ++kk) BT[kk * n + j] = B[j * ldb + kk];
#pragma omp parallel for schedule(static) if (parallel)
    for (std::int64_t i = 0; i < (std::int64_t)m; ++i)
      gemm_nn_row((std::size_t)i, n, k, alpha, A, lda, BT.data(), n, beta, C, ldc);
    return;
  }
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t i = 0; i < (std::int64_t)m; ++i)
    gemm_row(ta, tb, (std::size_t)i, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
}

}  // namespace

void gemm_serial(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 double alpha, const double* A, std::size_t lda, const double* B,
                 std::size_t ldb, double beta, double* C, std::size_t ldc) {
  gemm_impl(false, ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* A, std::size_t lda, const double* B,
          std::size_t ldb, double beta, double* C, std::size_t ldc) {
  gemm_impl(true, ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
}

namespace {

struct Grid {
  double x0, y0, z0, h;
  std::size_t nx, ny, nz;
  std::vector<int> cell_start;  // CSR over cells
  std::vector<int> order;       // point indices sorted by cell, index-stable

  std::size_t cell_of(double x, double y, double z) const {
    auto clampi = [](std::int64_t v, std::int64_t hi) {
      return (std::size_t)std::clamp<std::int64_t>(v, 0, hi);
    };
    std::size_t cx = clampi((std::int64_t)std::floor((x - x0) / h), (std::int64_t)nx - 1);
    std::size_t cy = clampi((std::int64_t)std::floor((y - y0) / h), (std::int64_t)ny - 1);
    std::size_t cz = clampi((std::int64_t)std::floor((z - z0) / h), (std::int64_t)nz - 1);
    return (cz * ny + cy) * nx + cx;
  }
};

Grid build_grid(const double* pts, std::size_t n) {
  Grid g;
  double lo[3] = {pts[0], pts[1], pts[2]};
  double hi[3] = {pts[0], pts[1], pts[2]};
  for (std::size_t i = 1; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], pts[3 * i + a]);
      hi[a] = std::max(hi[a], pts[3 * i + a]);
    }
  double ext = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2], 1e-12});
  // ~2 points per cell on average, capped so the table stays small
  double target_cells = std::min<double>((double)n / 2.0 + 1.0, 1 << 21);
  g.h = std::max(ext / std::cbrt(target_cells), ext * 1e-6);
  g.x0 = lo[0];
  g.y0 = lo[1];
  g.z0 = lo[2];
  g.nx = std::max<std::size_t>(1, (std::size_t)std::floor((hi[0] - lo[0]) / g.h) + 1);
  g.ny = std::max<std::size_t>(1, (std::size_t)std::floor((hi[1] - lo[1]) / g.h) + 1);
  g.nz = std::max<std::size_t>(1, (std::size_t)std::floor((hi[2] - lo[2]) / g.h) + 1);
  std::size_t ncell = g.nx * g.ny * g.nz;
  std::vector<int> count(ncell + 1, 0);
  std::vector<std::size_t> cid(n);
  for (std::size_t i = 0; i < n; ++i) {
    cid[i] = g.cell_of(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]);
    count[cid[i] + 1]++;
  }
  for (std::size_t c = 0; c < ncell; ++c) count[c + 1] += count[c];
  g.cell_start = count;
  g.order.resize(n);
  std::vector<int> fill(g.cell_start.begin(), g.cell_start.end());
  for (std::size_t i = 0; i < n; ++i) g.order[fill[cid[i]]++] = (int)i;
  return g;
}

inline void consider(const double* pts, int idx, double qx, double qy, double qz,
                     double& best_d2, int& best_i) {
  double dx = pts[3 * idx] - qx, dy = pts[3 * idx + 1] - qy, dz = pts[3 * idx + 2] - qz;
  // Explicit fma keeps the value independent of compiler contraction choices,
  // so an accumulation-style naive evaluation reproduces it bitwise.
  double d2 = std::fma(dz, dz, std::fma(dy, dy, dx * dx));
  if (d2 < best_d2 || (d2 == best_d2 && idx < best_i)) {
    best_d2 = d2;
    best_i = idx;
  }
}

void nn3_query(const Grid& g, const double* pts, double qx, double qy, double qz,
               int& out_i, double& out_d2) {
  auto cell_coord = [&](double v, double v0, std::size_t nc) {
    return std::clamp<std::int64_t>((std::int64_t)std::floor((v - v0) / g.h), 0,
                                    (std::int64_t)nc - 1);
  };
  std::int64_t cx = cell_coord(qx, g.x0, g.nx);
  std::int64_t cy = cell_coord(qy, g.y0, g.ny);
  std::int64_t cz = cell_coord(qz, g.z0, g.nz);
  double best_d2 = std::numeric_limits<double>::infinity();
  int best_i = std::numeric_limits<int>::max();
  std::int64_t max_ring = (std::int64_t)std::max({g.nx, g.ny, g.nz});
  for (std::int64_t r = 0;; ++r) {
    // Any point in a cell r rings away differs by >= (r-1)*h on some axis, so
    // once best <= ((r-1)*h)^2 no farther ring can win or tie.
    if (best_i != std::numeric_limits<int>::max() && r >= 2) {
      double safe = (double)(r - 1) * g.h;
      if (best_d2 < safe * safe) break;
    }
    if (r > max_ring) break;
    bool any_cell = false;
    for (std::int64_t dz = -r; dz <= r; ++dz) {
      std::int64_t z = cz + dz;
      if (z < 0 || z >= (std::int64_t)g.nz) continue;
      for (std::int64_t dy = -r; dy <= r; ++dy) {
        std::int64_t y = cy + dy;
        if (y < 0 || y >= (std::int64_t)g.ny) continue;
        bool face = (std::abs(dz) == r) || (std::abs(dy) == r);
        std::int64_t step = face ? 1 : (r == 0 ? 1 : 2 * r);
        for (std::int64_t dx = -r; dx <= r; dx += step) {
          std::int64_t x = cx + dx;
          if (x < 0 || x >= (std::int64_t)g.nx) continue;
          any_cell = true;
          std::size_t c = ((std::size_t)z * g.ny + (std::size_t)y) * g.nx + (std::size_t)x;
          for (int p = g.cell_start[c]; p < g.cell_start[c + 1]; ++p)
            consider(pts, g.order[p], qx, qy, qz, best_d2, best_i);
        }
      }
    }
    if (!any_cell && best_i != std::numeric_limits<int>::max()) break;
  }
  out_i = best_i;
  out_d2 = best_d2;
}

}  // namespace

void nn3_serial(const double* pts, std::size_t n, const double* queries,
                std::size_t m, int* out_idx, double* out_d2) {
  if (n == 0) throw std::invalid_argument("nn3: empty point set");
  for (std::size_t q = 0; q < m; ++q) {
    double best = std::numeric_limits<double>::infinity();
    int best_i = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i < n; ++i)
      consider(pts, (int)i, queries[3 * q], queries[3 * q + 1], queries[3 * q + 2],
               best, best_i);
    out_idx[q] = best_i;
    out_d2[q] = best;
  }
}

void nn3(const double* pts, std::size_t n, const double* queries, std::size_t m,
         int* out_idx, double* out_d2) {
  if (n == 0) throw std::invalid_argument("nn3: empty point set");
  if (n < 32) {
    nn3_serial(pts, n, queries, m, out_idx, out_d2);
    return;
  }
  Grid g = build_grid(pts, n);
#pragma omp parallel for schedule(static)
  for (std::int64_t q = 0; q < (std::int64_t)m; ++q)
    nn3_query(g, pts, queries[3 * q], queries[3 * q + 1], queries[3 * q + 2],
              out_idx[q], out_d2[q]);
}

void feature_nn_serial(const double* A, std::size_t n, const double* B,
                       std::size_t m, std::size_t dim, int* out_idx) {
  if (m == 0) throw std::invalid_argument("feature_nn: empty candidate set");
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = std::numeric_limits<int>::max();
    for (std::size_t j = 0; j < m; ++j) {
      double d2 = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        double diff = A[i * dim + d] - B[j * dim + d];
        d2 += diff * diff;
      }
      if (d2 < best || (d2 == best && (int)j < best_j)) {
        best = d2;
        best_j = (int)j;
      }
    }
    out_idx[i] = best_j;
  }
}

void feature_nn(const double* A, std::size_t n, const double* B, std::size_t m,
                std::size_t dim, int* out_idx) {
  if (m == 0) throw std::invalid_argument("feature_nn: empty candidate set");
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < (std::int64_t)n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = std::numeric_limits<int>::max();
    const double* a = A + (std::size_t)i * dim;
    for (std::size_t j = 0; j < m; ++j) {
      const double* b = B + j * dim;
      double d2 = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        double diff = a[d] - b[d];
        d2 += diff * diff;
      }
      if (d2 < best || (d2 == best && (int)j < best_j)) {
        best = d2;
        best_j = (int)j;
      }
    }
    out_idx[i] = best_j;
  }
}

}  // namespace nlf::kernels

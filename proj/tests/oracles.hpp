#pragma once

// Independent oracles used by the unit and acceptance suites. Everything here
// is deliberately naive: plain loops, series definitions, O(n^2) searches.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace oracle {

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> finite_diff(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = x[i];
    double hi = h * std::max(1.0, std::fabs(orig));
    x[i] = orig + hi;
    double fp = f(x);
    x[i] = orig - hi;
    double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * hi);
  }
  return g;
}

// Scaled error: behaves like relative error for large magnitudes, absolute
// near zero.
inline double grad_err(double analytic, double numeric) {
  return std::fabs(analytic - numeric) /
         std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
}

// Matrix exponential by truncated power series (square, row-major).
inline std::vector<double> expm_series(const std::vector<double>& A, std::size_t n,
                                       int terms) {
  std::vector<double> result(n * n, 0.0), term(n * n, 0.0), next(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    result[i * n + i] = 1.0;
    term[i * n + i] = 1.0;
  }
  for (int t = 1; t <= terms; ++t) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < n; ++k) s += term[i * n + k] * A[k * n + j];
        next[i * n + j] = s / (double)t;
      }
    term = next;
    for (std::size_t i = 0; i < n * n; ++i) result[i] += term[i];
  }
  return result;
}

// Brute-force nearest neighbor (squared L2, lowest index wins ties). The
// explicit fma matches the production kernels bitwise whatever contraction
// the compiler picks.
inline int brute_nn(const std::vector<double>& pts, std::size_t dim,
                    const double* query, double* d2_out = nullptr) {
  std::size_t n = pts.size() / dim;
  double best = INFINITY;
  int best_i = -1;
  for (std::size_t i = 0; i < n; ++i) {
    double d2 = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      double diff = pts[i * dim + d] - query[d];
      d2 = std::fma(diff, diff, d2);
    }
    if (d2 < best) {
      best = d2;
      best_i = (int)i;
    }
  }
  if (d2_out) *d2_out = best;
  return best_i;
}

// Brute-force mutual nearest neighbors over feature rows, pairs ordered by
// first index.
inline std::vector<std::pair<int, int>> brute_mnn(const std::vector<double>& A,
                                                  const std::vector<double>& B,
                                                  std::size_t dim) {
  std::size_t n = A.size() / dim, m = B.size() / dim;
  std::vector<int> a2b(n), b2a(m);
  for (std::size_t i = 0; i < n; ++i) a2b[i] = brute_nn(B, dim, A.data() + i * dim);
  for (std::size_t j = 0; j < m; ++j) b2a[j] = brute_nn(A, dim, B.data() + j * dim);
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < n; ++i)
    if (a2b[i] >= 0 && b2a[a2b[i]] == (int)i) out.emplace_back((int)i, a2b[i]);
  return out;
}

// Symmetric chamfer: mean of squared NN distances in both directions.
inline double brute_chamfer(const std::vector<double>& X, const std::vector<double>& Y) {
  double sx = 0, sy = 0;
  std::size_t nx = X.size() / 3, ny = Y.size() / 3;
  for (std::size_t i = 0; i < nx; ++i) {
    double d2;
    brute_nn(Y, 3, X.data() + i * 3, &d2);
    sx += d2;
  }
  for (std::size_t j = 0; j < ny; ++j) {
    double d2;
    brute_nn(X, 3, Y.data() + j * 3, &d2);
    sy += d2;
  }
  return sx / (double)nx + sy / (double)ny;
}

}  // namespace oracle

#include <doctest.h>

#include <vector>

#include "nlf/kernels.hpp"
#include "nlf/rng.hpp"
#include "oracles.hpp"

using namespace nlf;

namespace {

std::vector<double> naive_gemm(bool ta, bool tb, std::size_t m, std::size_t n,
                               std::size_t k, double alpha,
                               const std::vector<double>& A,
                               const std::vector<double>& B, double beta,
                               std::vector<double> C) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t kk = 0; kk < k; ++kk) {
        double av = ta ? A[kk * m + i] : A[i * k + kk];
        double bv = tb ? B[j * k + kk] : B[kk * n + j];
        acc += av * bv;
      }
      C[i * n + j] = alpha * acc + beta * C[i * n + j];
    }
  return C;
}

}  // namespace

TEST_CASE("gemm matches a naive triple loop in all transpose modes") {
  Rng rng(42);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb)
      for (int rep = 0; rep < 5; ++rep) {
        std::size_t m = 1 + rng.index(8), n = 1 + rng.index(8), k = 1 + rng.index(8);
        std::vector<double> A(m * k), B(k * n), C(m * n);
        for (auto& x : A) x = rng.uniform(-1, 1);
        for (auto& x : B) x = rng.uniform(-1, 1);
        for (auto& x : C) x = rng.uniform(-1, 1);
        double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
        auto want = naive_gemm(ta, tb, m, n, k, alpha, A, B, beta, C);
        std::vector<double> got = C;
        std::size_t lda = ta ? m : k, ldb = tb ? k : n;
        kernels::gemm(ta, tb, m, n, k, alpha, A.data(), lda, B.data(), ldb, beta,
                      got.data(), n);
        for (std::size_t i = 0; i < want.size(); ++i)
          CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
      }
}

TEST_CASE("gemm parallel and serial variants agree bitwise") {
  Rng rng(43);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      std::size_t m = 37, n = 29, k = 53;
      std::vector<double> A(m * k), B(k * n), C0(m * n, 0.5), C1(m * n, 0.5);
      for (auto& x : A) x = rng.uniform(-1, 1);
      for (auto& x : B) x = rng.uniform(-1, 1);
      std::size_t lda = ta ? m : k, ldb = tb ? k : n;
      kernels::gemm(ta, tb, m, n, k, 1.3, A.data(), lda, B.data(), ldb, 0.7, C0.data(), n);
      kernels::gemm_serial(ta, tb, m, n, k, 1.3, A.data(), lda, B.data(), ldb, 0.7,
                           C1.data(), n);
      for (std::size_t i = 0; i < C0.size(); ++i) CHECK(C0[i] == C1[i]);
    }
}

TEST_CASE("grid nearest neighbor is exact, including ties") {
  Rng rng(44);
  for (int rep = 0; rep < 30; ++rep) {
    std::size_t n = 3 + rng.index(300), m = 1 + rng.index(100);
    std::vector<double> pts(n * 3), q(m * 3);
    // quantized coordinates so exact distance ties actually occur
    for (auto& x : pts) x = std::round(rng.uniform(-3, 3) * 4) / 4.0;
    for (auto& x : q) x = std::round(rng.uniform(-4, 4) * 4) / 4.0;
    std::vector<int> gi(m), si(m);
    std::vector<double> gd(m), sd(m);
    kernels::nn3(pts.data(), n, q.data(), m, gi.data(), gd.data());
    kernels::nn3_serial(pts.data(), n, q.data(), m, si.data(), sd.data());
    for (std::size_t i = 0; i < m; ++i) {
      CHECK(gi[i] == si[i]);
      CHECK(gd[i] == sd[i]);
    }
  }
}

TEST_CASE("nearest neighbor with duplicated points keeps the lowest index") {
  std::vector<double> pts = {1, 1, 1, 0, 0, 0, 1, 1, 1};
  double q[3] = {1.1, 1, 1};
  int idx;
  double d2;
  kernels::nn3(pts.data(), 3, q, 1, &idx, &d2);
  CHECK(idx == 0);
  kernels::nn3_serial(pts.data(), 3, q, 1, &idx, &d2);
  CHECK(idx == 0);
}

TEST_CASE("feature argmin matches brute force") {
  Rng rng(45);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t n = 1 + rng.index(60), m = 1 + rng.index(60), dim = 1 + rng.index(12);
    std::vector<double> A(n * dim), B(m * dim);
    for (auto& x : A) x = std::round(rng.uniform(-2, 2) * 8) / 8.0;
    for (auto& x : B) x = std::round(rng.uniform(-2, 2) * 8) / 8.0;
    std::vector<int> gi(n), si(n);
    kernels::feature_nn(A.data(), n, B.data(), m, dim, gi.data());
    kernels::feature_nn_serial(A.data(), n, B.data(), m, dim, si.data());
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(gi[i] == si[i]);
      CHECK(si[i] == oracle::brute_nn(B, dim, A.data() + i * dim));
    }
  }
}

TEST_CASE("empty point sets are rejected") {
  double q[3] = {0, 0, 0};
  int idx;
  double d2;
  CHECK_THROWS(kernels::nn3(nullptr, 0, q, 1, &idx, &d2));
  CHECK_THROWS(kernels::feature_nn(nullptr, 1, nullptr, 0, 3, &idx));
}

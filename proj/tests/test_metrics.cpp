#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "nlf/graph.hpp"
#include "nlf/metrics.hpp"
#include "nlf/rng.hpp"
#include "nlf/se3.hpp"
#include "oracles.hpp"

using namespace nlf;

namespace {

lidar::PointCloud random_cloud(std::size_t n, Rng& rng, double extent = 1.0) {
  lidar::PointCloud c;
  c.xyz.resize(n * 3);
  for (auto& v : c.xyz) v = rng.uniform(-extent, extent);
  c.intensity.assign(n, 0.5);
  return c;
}

lidar::PointCloud apply_rigid(const se3::RigidTransform& T, const lidar::PointCloud& c) {
  lidar::PointCloud out = c;
  for (std::size_t i = 0; i < c.size(); ++i) {
    auto q = T.apply({c.xyz[i * 3], c.xyz[i * 3 + 1], c.xyz[i * 3 + 2]});
    std::copy(q.begin(), q.end(), out.xyz.begin() + i * 3);
  }
  return out;
}

se3::RigidTransform random_rigid(Rng& rng, double angle, double shift) {
  double axis[3];
  rng.unit_sphere(axis);
  se3::RigidTransform T;
  T.R = se3::rodrigues({axis[0] * angle, axis[1] * angle, axis[2] * angle});
  for (int d = 0; d < 3; ++d) T.t[d] = rng.uniform(-shift, shift);
  return T;
}

std::vector<se3::RigidTransform> line_trajectory(std::size_t n) {
  std::vector<se3::RigidTransform> traj(n);
  for (std::size_t i = 0; i < n; ++i) traj[i].t = {(double)i, 0.2 * (double)(i % 3), 0.0};
  return traj;
}

}  // namespace

TEST_CASE("fscore hand cases, symmetry, and rigid invariance") {
  Rng rng(211);
  auto a = random_cloud(50, rng);
  CHECK(metrics::fscore(a, a) == 1.0);

  lidar::PointCloud far_cloud = a;
  for (std::size_t i = 0; i < far_cloud.size(); ++i) far_cloud.xyz[i * 3] += 1.0;
  CHECK(metrics::fscore(a, far_cloud) == 0.0);

  lidar::PointCloud g{{0, 0, 0, 10, 0, 0}, {0, 0}};
  lidar::PointCloud p{{0, 0, 0, 10.1, 0, 0}, {0, 0}};
  CHECK(metrics::fscore(p, g) == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS(metrics::fscore({}, a));
  CHECK_THROWS(metrics::fscore(a, {}));

  for (int c = 0; c < 50; ++c) {
    auto x = random_cloud(30, rng);
    auto y = random_cloud(40, rng);
    CHECK(metrics::fscore(x, y) == metrics::fscore(y, x));
  }

  // Jitter below the threshold keeps F at 1 whichever frame both clouds share.
  for (int c = 0; c < 20; ++c) {
    auto x = random_cloud(30, rng);
    lidar::PointCloud y = x;
    for (auto& v : y.xyz) v += rng.uniform(-0.01, 0.01);
    double plain = metrics::fscore(x, y);
    CHECK(plain == 1.0);
    auto T = random_rigid(rng, 0.9, 2.0);
    CHECK(metrics::fscore(apply_rigid(T, x), apply_rigid(T, y)) == plain);
  }
}

TEST_CASE("chamfer and fscore stay symmetric on random clouds") {
  Rng rng(223);
  for (int c = 0; c < 20; ++c) {
    auto a = random_cloud(25, rng);
    auto b = random_cloud(35, rng);
    CHECK(graph::chamfer(a.xyz, b.xyz) == graph::chamfer(b.xyz, a.xyz));
    CHECK(metrics::fscore(a, b) == metrics::fscore(b, a));
  }
}

TEST_CASE("image metrics match hand built cases") {
  Rng rng(227);
  std::size_t h = 16, w = 16;
  std::vector<double> gt(h * w);
  for (auto& v : gt) v = (double)(2 + rng.index(11)) / 2.0;
  std::vector<std::uint8_t> keep(h * w, 0);

  auto same = metrics::image_metrics(gt, gt, keep, h, w);
  CHECK(same.rmse == 0.0);
  CHECK(same.medae == 0.0);
  CHECK(same.psnr == 99.0);
  CHECK(same.ssim == 1.0);

  std::vector<double> off(gt);
  for (auto& v : off) v += 1.0;
  auto o = metrics::image_metrics(off, gt, keep, h, w);
  CHECK(o.rmse == 1.0);
  CHECK(o.medae == 1.0);

  auto [rmse4, medae4] = metrics::masked_rmse_medae({1, 3, 6, 10}, {1, 2, 4, 7},
                                                    {0, 0, 0, 0});
  CHECK(rmse4 == doctest::Approx(std::sqrt(14.0 / 4.0)).epsilon(1e-12));
  CHECK(medae4 == 1.5);
  auto [rl, ml] = metrics::masked_rmse_medae({1, 3, 6, 10}, {1, 2, 4, 7}, {0, 0, 0, 0},
                                             metrics::MedianMode::lower);
  CHECK(rl == rmse4);
  CHECK(ml == 1.0);

  // Errors hiding behind dropped pixels do not count.
  std::vector<double> bad(gt);
  std::vector<std::uint8_t> drop(h * w, 0);
  for (std::size_t i = 0; i < h * w; i += 3) {
    bad[i] += 5.0;
    drop[i] = 1;
  }
  auto masked = metrics::image_metrics(bad, gt, drop, h, w);
  CHECK(masked.rmse == 0.0);
  CHECK(masked.medae == 0.0);

  CHECK_THROWS(metrics::image_metrics(gt, gt, std::vector<std::uint8_t>(h * w, 1), h, w));
  CHECK_THROWS(metrics::image_metrics(std::vector<double>(8, 0.0), gt, keep, h, w));
  CHECK_THROWS(metrics::ssim(std::vector<double>(64, 0.0), std::vector<double>(64, 0.0),
                             8, 8, 1.0));
}

TEST_CASE("psnr reporting follows the recorded rmse and range exactly") {
  Rng rng(229);
  std::size_t h = 16, w = 16;
  std::vector<std::uint8_t> keep(h * w, 0);
  for (int c = 0; c < 30; ++c) {
    std::vector<double> gt(h * w), pred(h * w);
    for (auto& v : gt) v = rng.uniform(0.5, 9.0);
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = gt[i] + rng.uniform(-1.0, 1.0);
    auto m = metrics::image_metrics(pred, gt, keep, h, w);
    double range = *std::max_element(gt.begin(), gt.end());
    CHECK(m.psnr == doctest::Approx(std::min(99.0, 20.0 * std::log10(range / m.rmse)))
                        .epsilon(1e-12));
    CHECK(m.ssim >= -1.0 - 1e-9);
    CHECK(m.ssim <= 1.0 + 1e-9);
  }
}

TEST_CASE("ssim matches the closed form on constant images") {
  std::size_t h = 16, w = 16;
  double a = 2.5, b = 4.0;
  std::vector<double> pa(h * w, a), pb(h * w, b);
  double c1 = (0.01 * b) * (0.01 * b);
  double want = (2.0 * a * b + c1) / (a * a + b * b + c1);
  CHECK(metrics::ssim(pa, pb, h, w, b) == doctest::Approx(want).epsilon(1e-9));
  CHECK(metrics::ssim(pb, pb, h, w, b) == 1.0);
}

TEST_CASE("ate absorbs global motion and stays minimal over rigid probes") {
  auto gt = line_trajectory(10);
  CHECK(metrics::ate(gt, gt) == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(233);
  auto shifted = gt;
  for (auto& T : shifted) T.t[0] += 1.0;
  CHECK(metrics::ate(shifted, gt) == doctest::Approx(0.0).epsilon(1e-9));

  auto est = gt;
  for (auto& T : est)
    for (int d = 0; d < 3; ++d) T.t[d] += rng.uniform(-0.3, 0.3);
  double base = metrics::ate(est, gt);
  CHECK(base > 0.0);

  // Invariance: a global transform of the estimate is absorbed by alignment.
  for (int c = 0; c < 20; ++c) {
    auto G = random_rigid(rng, 1.0, 3.0);
    auto moved = est;
    for (auto& T : moved) {
      auto q = G.apply(T.t);
      T.t = q;
      // rotation part of the pose is irrelevant to ate
    }
    CHECK(metrics::ate(moved, gt) == doctest::Approx(base).epsilon(1e-9));
  }

  // Alignment is the minimizer: no rigid probe of the estimate does better.
  auto rmse_of = [&](const std::vector<se3::RigidTransform>& traj) {
    double sq = 0;
    for (std::size_t i = 0; i < traj.size(); ++i) {
      double dx = traj[i].t[0] - gt[i].t[0], dy = traj[i].t[1] - gt[i].t[1],
             dz = traj[i].t[2] - gt[i].t[2];
      sq += dx * dx + dy * dy + dz * dz;
    }
    return std::sqrt(sq / (double)traj.size());
  };
  CHECK(base <= rmse_of(est) + 1e-12);
  for (int c = 0; c < 200; ++c) {
    auto G = random_rigid(rng, 0.5, 1.0);
    auto probe = est;
    for (auto& T : probe) T.t = G.apply(T.t);
    CHECK(base <= rmse_of(probe) + 1e-12);
  }

  CHECK_THROWS(metrics::ate(gt, line_trajectory(9)));
}

TEST_CASE("rpe matches hand built corruption cases") {
  Rng rng(239);
  std::vector<se3::RigidTransform> gt(10);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = random_rigid(rng, 0.3, 1.0);
    gt[i].t[0] += (double)i;
  }
  auto [r0, t0] = metrics::rpe(gt, gt);
  CHECK(r0 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(t0 == doctest::Approx(0.0).epsilon(1e-12));

  auto moved = gt;
  auto G = random_rigid(rng, 0.8, 4.0);
  for (auto& T : moved) T = G.compose(T);
  auto [rg, tg] = metrics::rpe(moved, gt);
  CHECK(rg == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(tg == doctest::Approx(0.0).epsilon(1e-10));

  // One corrupted relative rotation of 5 degrees inside a 10-pose chain.
  double ang = 5.0 * M_PI / 180.0;
  se3::RigidTransform bump;
  bump.R = se3::rodrigues({0.0, 0.0, ang});
  std::size_t k = 4;
  auto est = gt;
  for (std::size_t m = k; m < est.size(); ++m)
    est[m] = gt[k].compose(bump).compose(gt[k].inverse().compose(gt[m]));
  auto [rr, rt] = metrics::rpe(est, gt);
  CHECK(rr == doctest::Approx(5.0 / std::sqrt(9.0)).epsilon(1e-9));
  CHECK(rt == doctest::Approx(0.0).epsilon(1e-9));

  // One corrupted relative translation of 0.2 m.
  se3::RigidTransform nudge;
  nudge.t = {0.0, 0.2, 0.0};
  est = gt;
  for (std::size_t m = k; m < est.size(); ++m)
    est[m] = gt[k].compose(nudge).compose(gt[k].inverse().compose(gt[m]));
  auto [nr, nt] = metrics::rpe(est, gt);
  CHECK(nr == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(nt == doctest::Approx(20.0 / std::sqrt(9.0)).epsilon(1e-9));

  CHECK_THROWS(metrics::rpe(gt, line_trajectory(9)));
  CHECK_THROWS(metrics::rpe({gt[0]}, {gt[0]}));
}

TEST_CASE("metric reports serialize deterministically") {
  metrics::MetricReport r;
  r.cd = 0.001234;
  r.fscore = 0.875;
  r.depth_rmse = 0.5;
  r.depth_medae = 0.25;
  r.depth_psnr = 31.7;
  r.depth_ssim = 0.91;
  r.int_rmse = 0.1;
  r.int_medae = 0.05;
  r.int_psnr = 22.0;
  r.int_ssim = 0.83;
  r.ate_m = 0.02;
  r.rpe_r_deg = 1.5;
  r.rpe_t_cm = 3.25;

  std::string header = metrics::csv_header();
  std::string row = metrics::csv_row(r);
  CHECK(row == metrics::csv_row(r));
  CHECK(std::count(header.begin(), header.end(), ',') == 12);
  CHECK(std::count(row.begin(), row.end(), ',') == 12);

  std::string path = "metrics_test.csv";
  metrics::write_csv(path, r);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  bool more = (bool)std::getline(in, l3);
  CHECK(l1 == header);
  CHECK(l2 == row);
  CHECK_FALSE(more);
  in.close();
  std::remove(path.c_str());

  std::istringstream ss(row);
  std::string field;
  int count = 0;
  while (std::getline(ss, field, ',')) {
    CHECK_NOTHROW((void)std::stod(field));
    ++count;
  }
  CHECK(count == 13);

  std::string table = metrics::format_table(r);
  CHECK(table.find("ate_m") != std::string::npos);
  CHECK(table.find("depth_ssim") != std::string::npos);
}

#include "nlf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "nlf/kernels.hpp"

namespace nlf::metrics {

double fscore(const lidar::PointCloud& pred, const lidar::PointCloud& gt, double thresh) {
  if (pred.size() == 0 || gt.size() == 0)
    throw std::invalid_argument("fscore: empty point cloud");
  double t2 = thresh * thresh;
  auto near_fraction = [t2](const lidar::PointCloud& q, const lidar::PointCloud& data) {
    std::vector<int> idx(q.size());
    std::vector<double> d2(q.size());
    kernels::nn3(data.xyz.data(), data.size(), q.xyz.data(), q.size(), idx.data(),
                 d2.data());
    std::size_t hits = 0;
    for (double d : d2) hits += d <= t2 ? 1 : 0;
    return (double)hits / (double)q.size();
  };
  double precision = near_fraction(pred, gt);
  double recall = near_fraction(gt, pred);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

std::pair<double, double> masked_rmse_medae(const std::vector<double>& pred,
                                            const std::vector<double>& gt,
                                            const std::vector<std::uint8_t>& gt_drop,
                                            MedianMode mode) {
  if (pred.size() != gt.size() || gt.size() != gt_drop.size())
    throw std::invalid_argument("masked_rmse_medae: size mismatch");
  std::vector<double> err;
  err.reserve(gt.size());
  double sq = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt_drop[i]) continue;
    double e = std::fabs(pred[i] - gt[i]);
    err.push_back(e);
    sq += e * e;
  }
  if (err.empty()) throw std::invalid_argument("masked_rmse_medae: every pixel dropped");
  std::sort(err.begin(), err.end());
  std::size_t n = err.size();
  double med;
  if (n % 2 == 1)
    med = err[n / 2];
  else
    med = mode == MedianMode::midpoint ? 0.5 * (err[n / 2 - 1] + err[n / 2])
                                       : err[n / 2 - 1];
  return {std::sqrt(sq / (double)n), med};
}

double psnr_from_rmse(double rmse, double range) {
  if (rmse == 0.0) return 99.0;
  return std::min(99.0, 20.0 * std::log10(range / rmse));
}

double ssim(const std::vector<double>& pred, const std::vector<double>& gt, std::size_t h,
            std::size_t w, double range) {
  if (pred.size() != h * w || gt.size() != h * w)
    throw std::invalid_argument("ssim: size mismatch");
  if (h < 11 || w < 11)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  double kern[11];
  double ksum = 0;
  for (int k = 0; k < 11; ++k) {
    double d = (double)(k - 5);
    kern[k] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    ksum += kern[k];
  }
  for (double& v : kern) v /= ksum;
  // The all-zero channel keeps the ratio defined: both stabilizers stay
  // positive and identical images still score exactly 1.
  double L = std::max(range, 1e-12);
  double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t cy = 5; cy + 5 < h; ++cy)
    for (std::size_t cx = 5; cx + 5 < w; ++cx) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int ky = 0; ky < 11; ++ky)
        for (int kx = 0; kx < 11; ++kx) {
          double wgt = kern[ky] * kern[kx];
          double p = pred[(cy + ky - 5) * w + (cx + kx - 5)];
          double g = gt[(cy + ky - 5) * w + (cx + kx - 5)];
          mx += wgt * p;
          my += wgt * g;
          sxx += wgt * p * p;
          syy += wgt * g * g;
          sxy += wgt * p * g;
        }
      double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / (double)count;
}

ImageMetrics image_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<std::uint8_t>& gt_drop, std::size_t h,
                           std::size_t w, MedianMode mode) {
  if (pred.size() != h * w || gt.size() != h * w || gt_drop.size() != h * w)
    throw std::invalid_argument("image_metrics: size mismatch");
  ImageMetrics out;
  auto [rmse, medae] = masked_rmse_medae(pred, gt, gt_drop, mode);
  out.rmse = rmse;
  out.medae = medae;
  double range = 0;
  for (double v : gt) range = std::max(range, v);
  out.psnr = psnr_from_rmse(rmse, range);
  out.ssim = ssim(pred, gt, h, w, range);
  return out;
}

double ate(const std::vector<se3::RigidTransform>& est,
           const std::vector<se3::RigidTransform>& gt) {
  if (est.size() != gt.size()) throw std::invalid_argument("ate: trajectory length mismatch");
  std::vector<se3::Vec3> from, to;
  from.reserve(est.size());
  to.reserve(gt.size());
  for (auto& T : est) from.push_back(T.t);
  for (auto& T : gt) to.push_back(T.t);
  se3::RigidTransform A = se3::align_rigid(from, to);
  double sq = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    auto p = A.apply(from[i]);
    double dx = p[0] - to[i][0], dy = p[1] - to[i][1], dz = p[2] - to[i][2];
    sq += dx * dx + dy * dy + dz * dz;
  }
  return std::sqrt(sq / (double)est.size());
}

std::pair<double, double> rpe(const std::vector<se3::RigidTransform>& est,
                              const std::vector<se3::RigidTransform>& gt) {
  if (est.size() != gt.size()) throw std::invalid_argument("rpe: trajectory length mismatch");
  if (est.size() < 2) throw std::invalid_argument("rpe: need at least 2 poses");
  double r2 = 0, t2 = 0;
  std::size_t n = est.size() - 1;
  for (std::size_t i = 0; i < n; ++i) {
    auto qrel = gt[i].inverse().compose(gt[i + 1]);
    auto prel = est[i].inverse().compose(est[i + 1]);
    auto err = qrel.inverse().compose(prel);
    double ang = se3::rotation_angle(err.R) * 180.0 / M_PI;
    r2 += ang * ang;
    t2 += err.t[0] * err.t[0] + err.t[1] * err.t[1] + err.t[2] * err.t[2];
  }
  return {std::sqrt(r2 / (double)n), 100.0 * std::sqrt(t2 / (double)n)};
}

std::string csv_header() {
  return "cd,fscore,depth_rmse,depth_medae,depth_psnr,depth_ssim,"
         "int_rmse,int_medae,int_psnr,int_ssim,ate_m,rpe_r_deg,rpe_t_cm";
}

std::string csv_row(const MetricReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,"
                "%.10g",
                r.cd, r.fscore, r.depth_rmse, r.depth_medae, r.depth_psnr, r.depth_ssim,
                r.int_rmse, r.int_medae, r.int_psnr, r.int_ssim, r.ate_m, r.rpe_r_deg,
                r.rpe_t_cm);
  return buf;
}

void write_csv(const std::string& path, const MetricReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metrics file: " + path);
  out << csv_header() << "\n" << csv_row(r) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string format_table(const MetricReport& r) {
  const char* names[13] = {"cd",         "fscore",     "depth_rmse", "depth_medae",
                           "depth_psnr", "depth_ssim", "int_rmse",   "int_medae",
                           "int_psnr",   "int_ssim",   "ate_m",      "rpe_r_deg",
                           "rpe_t_cm"};
  double vals[13] = {r.cd,         r.fscore,     r.depth_rmse, r.depth_medae,
                     r.depth_psnr, r.depth_ssim, r.int_rmse,   r.int_medae,
                     r.int_psnr,   r.int_ssim,   r.ate_m,      r.rpe_r_deg,
                     r.rpe_t_cm};
  std::string out;
  char line[64];
  for (int i = 0; i < 13; ++i) {
    std::snprintf(line, sizeof line, "%-12s %14.6g\n", names[i], vals[i]);
    out += line;
  }
  return out;
}

}  // namespace nlf::metrics

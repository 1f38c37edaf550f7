#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nlf/lidar.hpp"
#include "nlf/se3.hpp"

namespace nlf::metrics {

struct MetricReport {
  double cd = 0, fscore = 0;
  double depth_rmse = 0, depth_medae = 0, depth_psnr = 0, depth_ssim = 0;
  double int_rmse = 0, int_medae = 0, int_psnr = 0, int_ssim = 0;
  double ate_m = 0, rpe_r_deg = 0, rpe_t_cm = 0;
};

// Even-count median: midpoint averages the two middle values, lower picks the
// smaller one.
enum class MedianMode { midpoint, lower };

// Harmonic mean of precision (fraction of pred within thresh of gt) and
// recall (the reverse); 0 when both vanish. Throws on empty clouds.
double fscore(const lidar::PointCloud& pred, const lidar::PointCloud& gt,
              double thresh = 0.05);

// RMSE and median absolute error over pixels the ground truth kept
// (gt_drop == 0). Throws when every pixel is dropped or sizes differ.
std::pair<double, double> masked_rmse_medae(const std::vector<double>& pred,
                                            const std::vector<double>& gt,
                                            const std::vector<std::uint8_t>& gt_drop,
                                            MedianMode mode = MedianMode::midpoint);

// 20*log10(range/rmse), capped at 99 (also the value reported for rmse 0).
double psnr_from_rmse(double rmse, double range);

// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), standard stabilizers
// C1=(0.01 range)^2, C2=(0.03 range)^2, evaluated where the window fits.
// Needs h, w >= 11.
double ssim(const std::vector<double>& pred, const std::vector<double>& gt, std::size_t h,
            std::size_t w, double range);

struct ImageMetrics {
  double rmse = 0, medae = 0, psnr = 0, ssim = 0;
};

// All four image metrics for one channel; range is the gt channel maximum.
ImageMetrics image_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<std::uint8_t>& gt_drop, std::size_t h,
                           std::size_t w, MedianMode mode = MedianMode::midpoint);

// RMSE of translation differences after rigid alignment of the estimated
// trajectory onto the ground truth. Needs >= 3 poses of equal count.
double ate(const std::vector<se3::RigidTransform>& est,
           const std::vector<se3::RigidTransform>& gt);

// Per consecutive-pair error transform E = (Qi^-1 Qi+1)^-1 (Pi^-1 Pi+1) with
// P the estimate and Q the truth; returns (rotation RMSE in degrees,
// translation RMSE in centimeters). Needs >= 2 poses of equal count.
std::pair<double, double> rpe(const std::vector<se3::RigidTransform>& est,
                              const std::vector<se3::RigidTransform>& gt);

std::string csv_header();
std::string csv_row(const MetricReport& r);
void write_csv(const std::string& path, const MetricReport& r);
std::string format_table(const MetricReport& r);

}  // namespace nlf::metrics

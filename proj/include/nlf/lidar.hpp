#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nlf/se3.hpp"

namespace nlf::lidar {

using se3::RigidTransform;
using se3::Vec3;

struct PointCloud {
  std::vector<double> xyz;  // flat x,y,z triples
  std::vector<double> intensity;
  std::size_t size() const { return intensity.size(); }
};

struct RangeImage {
  std::size_t height = 0, width = 0;
  std::vector<double> depth;      // 0 where dropped
  std::vector<double> intensity;  // 0 where dropped
  std::vector<std::uint8_t> drop;  // 1 = no return
};

// Row 0 is the top beam (elevation vfov_offset_deg); beams are spaced evenly
// over vfov_deg. Column c sits at azimuth -pi + c * 2pi/width, measured
// counterclockwise from +x, so the +x axis lands on column width/2.
struct SensorModel {
  std::size_t beams = 32, width = 256;
  double vfov_deg = 26.4, vfov_offset_deg = 2.0, max_range = 80.0;

  double elev_of_row(std::size_t r) const;
  double az_of_col(std::size_t c) const;
  Vec3 dir(std::size_t r, std::size_t c) const;  // unit, sensor frame
  // Nearest bin; returns false when outside the vertical field of view.
  bool bin(const double p[3], std::size_t& row, std::size_t& col, double& depth) const;
};

struct Ray {
  Vec3 origin, dir;
  std::size_t row = 0, col = 0;
};

RangeImage project(const PointCloud& cloud, const SensorModel& sensor,
                   std::size_t* out_of_fov = nullptr);
PointCloud unproject(const RangeImage& img, const SensorModel& sensor);
std::vector<Ray> make_rays(const SensorModel& sensor, const RigidTransform& pose,
                           const std::vector<std::pair<std::size_t, std::size_t>>& pixels);

// Maps the union bounding box into the unit cube, longest axis spanning
// [0.05, 0.95]. A zero-extent box keeps scale 1 and is centered.
struct NormRecord {
  double scale = 1.0;
  Vec3 center{0, 0, 0};
  Vec3 apply(const Vec3& p) const;
  Vec3 invert(const Vec3& p) const;
  RigidTransform pose_to_norm(const RigidTransform& T) const;    // same R, mapped t
  RigidTransform pose_from_norm(const RigidTransform& T) const;
};
std::pair<std::vector<PointCloud>, NormRecord> normalize_scene(
    const std::vector<PointCloud>& clouds);

// Little-endian float32 quadruples (x, y, z, intensity). Intensity is clamped
// to [0,1] on read.
PointCloud read_scan_bin(const std::string& path);
void write_scan_bin(const std::string& path, const PointCloud& cloud);

// 16-bit binary PGM (maxval 65535, big-endian samples).
void write_pgm16(const std::string& path, const std::vector<double>& values,
                 std::size_t height, std::size_t width, double scale);
void write_depth_pgm(const std::string& path, const RangeImage& img,
                     const SensorModel& sensor);  // scale 256/max_range
void write_intensity_pgm(const std::string& path, const RangeImage& img);  // scale 65535

}  // namespace nlf::lidar

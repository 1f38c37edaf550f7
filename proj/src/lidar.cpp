#include "nlf/lidar.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace nlf::lidar {

namespace {
constexpr double kDeg = M_PI / 180.0;
}

double SensorModel::elev_of_row(std::size_t r) const {
  double dv = beams > 1 ? vfov_deg * kDeg / (double)(beams - 1) : 0.0;
  return vfov_offset_deg * kDeg - (double)r * dv;
}

double SensorModel::az_of_col(std::size_t c) const {
  return -M_PI + (double)c * (2.0 * M_PI / (double)width);
}

Vec3 SensorModel::dir(std::size_t r, std::size_t c) const {
  double e = elev_of_row(r), a = az_of_col(c);
  return {std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e)};
}

bool SensorModel::bin(const double p[3], std::size_t& row, std::size_t& col,
                      double& depth) const {
  depth = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  if (depth <= 0) return false;
  double elev = std::asin(p[2] / depth);
  double top = vfov_offset_deg * kDeg;
  long r;
  if (beams > 1) {
    double dv = vfov_deg * kDeg / (double)(beams - 1);
    r = std::lround((top - elev) / dv);
  } else {
    r = std::fabs(elev - top) < 1e-12 ? 0 : -1;
  }
  if (r < 0 || r >= (long)beams) return false;
  double az = std::atan2(p[1], p[0]);
  long c = std::lround((az + M_PI) / (2.0 * M_PI / (double)width));
  if (c >= (long)width) c -= (long)width;
  if (c < 0) c = 0;
  row = (std::size_t)r;
  col = (std::size_t)c;
  return true;
}

RangeImage project(const PointCloud& cloud, const SensorModel& sensor,
                   std::size_t* out_of_fov) {
  RangeImage img;
  img.height = sensor.beams;
  img.width = sensor.width;
  std::size_t n = img.height * img.width;
  img.depth.assign(n, 0.0);
  img.intensity.assign(n, 0.0);
  img.drop.assign(n, 1);
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    std::size_t r, c;
    double d;
    if (!sensor.bin(cloud.xyz.data() + i * 3, r, c, d)) {
      ++dropped;
      continue;
    }
    std::size_t px = r * img.width + c;
    if (img.drop[px] || d < img.depth[px]) {
      img.drop[px] = 0;
      img.depth[px] = d;
      img.intensity[px] = cloud.intensity[i];
    }
  }
  if (out_of_fov) *out_of_fov = dropped;
  return img;
}

PointCloud unproject(const RangeImage& img, const SensorModel& sensor) {
  PointCloud out;
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c) {
      std::size_t px = r * img.width + c;
      if (img.drop[px]) continue;
      Vec3 d = sensor.dir(r, c);
      out.xyz.push_back(d[0] * img.depth[px]);
      out.xyz.push_back(d[1] * img.depth[px]);
      out.xyz.push_back(d[2] * img.depth[px]);
      out.intensity.push_back(img.intensity[px]);
    }
  return out;
}

std::vector<Ray> make_rays(const SensorModel& sensor, const RigidTransform& pose,
                           const std::vector<std::pair<std::size_t, std::size_t>>& pixels) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (auto [r, c] : pixels) {
    if (r >= sensor.beams || c >= sensor.width)
      throw std::out_of_range("make_rays: pixel (" + std::to_string(r) + "," +
                              std::to_string(c) + ") outside " +
                              std::to_string(sensor.beams) + "x" +
                              std::to_string(sensor.width));
    Vec3 d = sensor.dir(r, c);
    Ray ray;
    ray.origin = pose.t;
    ray.dir = {pose.R[0] * d[0] + pose.R[1] * d[1] + pose.R[2] * d[2],
               pose.R[3] * d[0] + pose.R[4] * d[1] + pose.R[5] * d[2],
               pose.R[6] * d[0] + pose.R[7] * d[1] + pose.R[8] * d[2]};
    ray.row = r;
    ray.col = c;
    rays.push_back(ray);
  }
  return rays;
}

Vec3 NormRecord::apply(const Vec3& p) const {
  return {0.5 + scale * (p[0] - center[0]), 0.5 + scale * (p[1] - center[1]),
          0.5 + scale * (p[2] - center[2])};
}

Vec3 NormRecord::invert(const Vec3& p) const {
  return {center[0] + (p[0] - 0.5) / scale, center[1] + (p[1] - 0.5) / scale,
          center[2] + (p[2] - 0.5) / scale};
}

RigidTransform NormRecord::pose_to_norm(const RigidTransform& T) const {
  RigidTransform out;
  out.R = T.R;
  out.t = apply(T.t);
  return out;
}

RigidTransform NormRecord::pose_from_norm(const RigidTransform& T) const {
  RigidTransform out;
  out.R = T.R;
  out.t = invert(T.t);
  return out;
}

std::pair<std::vector<PointCloud>, NormRecord> normalize_scene(
    const std::vector<PointCloud>& clouds) {
  double lo[3], hi[3];
  std::fill(lo, lo + 3, std::numeric_limits<double>::infinity());
  std::fill(hi, hi + 3, -std::numeric_limits<double>::infinity());
  std::size_t total = 0;
  for (const auto& c : clouds) {
    total += c.size();
    for (std::size_t i = 0; i < c.size(); ++i)
      for (int d = 0; d < 3; ++d) {
        lo[d] = std::min(lo[d], c.xyz[i * 3 + d]);
        hi[d] = std::max(hi[d], c.xyz[i * 3 + d]);
      }
  }
  if (total == 0) throw std::invalid_argument("normalize_scene: no points");
  NormRecord rec;
  rec.center = {(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2};
  double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  rec.scale = extent > 0 ? 0.9 / extent : 1.0;
  std::vector<PointCloud> out = clouds;
  for (auto& c : out)
    for (std::size_t i = 0; i < c.size(); ++i) {
      Vec3 p = rec.apply({c.xyz[i * 3], c.xyz[i * 3 + 1], c.xyz[i * 3 + 2]});
      for (int d = 0; d < 3; ++d) c.xyz[i * 3 + d] = p[d];
    }
  return {std::move(out), rec};
}

PointCloud read_scan_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open scan file: " + path);
  std::streamsize len = in.tellg();
  if (len % 16 != 0)
    throw std::runtime_error(path + ": scan file truncated at byte " +
                             std::to_string(len - len % 16) + " (length " +
                             std::to_string(len) + " not a multiple of 16)");
  in.seekg(0);
  std::vector<char> buf((std::size_t)len);
  in.read(buf.data(), len);
  if (!in) throw std::runtime_error("read failed: " + path);
  PointCloud out;
  std::size_t n = (std::size_t)len / 16;
  out.xyz.resize(n * 3);
  out.intensity.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    float v[4];
    std::memcpy(v, buf.data() + i * 16, 16);
    for (int d = 0; d < 3; ++d) out.xyz[i * 3 + d] = v[d];
    out.intensity[i] = std::clamp((double)v[3], 0.0, 1.0);
  }
  return out;
}

void write_scan_bin(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write scan file: " + path);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    float v[4] = {(float)cloud.xyz[i * 3], (float)cloud.xyz[i * 3 + 1],
                  (float)cloud.xyz[i * 3 + 2], (float)cloud.intensity[i]};
    out.write(reinterpret_cast<const char*>(v), 16);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_pgm16(const std::string& path, const std::vector<double>& values,
                 std::size_t height, std::size_t width, double scale) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write pgm file: " + path);
  out << "P5\n" << width << " " << height << "\n65535\n";
  for (double v : values) {
    long s = std::lround(v * scale);
    unsigned u = (unsigned)std::clamp(s, 0L, 65535L);
    char b[2] = {(char)(u >> 8), (char)(u & 0xff)};
    out.write(b, 2);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_depth_pgm(const std::string& path, const RangeImage& img,
                     const SensorModel& sensor) {
  write_pgm16(path, img.depth, img.height, img.width, 256.0 / sensor.max_range);
}

void write_intensity_pgm(const std::string& path, const RangeImage& img) {
  write_pgm16(path, img.intensity, img.height, img.width, 65535.0);
}

}  // namespace nlf::lidar

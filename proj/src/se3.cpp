#include "nlf/se3.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

namespace nlf::se3 {

Vec3 RigidTransform::apply(const Vec3& p) const {
  return {R[0] * p[0] + R[1] * p[1] + R[2] * p[2] + t[0],
          R[3] * p[0] + R[4] * p[1] + R[5] * p[2] + t[1],
          R[6] * p[0] + R[7] * p[1] + R[8] * p[2] + t[2]};
}

RigidTransform RigidTransform::compose(const RigidTransform& o) const {
  RigidTransform out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      out.R[i * 3 + j] =
          R[i * 3] * o.R[j] + R[i * 3 + 1] * o.R[3 + j] + R[i * 3 + 2] * o.R[6 + j];
  out.t = apply(o.t);
  return out;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.R[i * 3 + j] = R[j * 3 + i];
  out.t = {-(out.R[0] * t[0] + out.R[1] * t[1] + out.R[2] * t[2]),
           -(out.R[3] * t[0] + out.R[4] * t[1] + out.R[5] * t[2]),
           -(out.R[6] * t[0] + out.R[7] * t[1] + out.R[8] * t[2])};
  return out;
}

Mat3 rodrigues(const Vec3& w) {
  double th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  double a, b;
  if (th2 < 1e-16) {
    a = 1.0 - th2 / 6.0;
    b = 0.5 - th2 / 24.0;
  } else {
    double th = std::sqrt(th2);
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  }
  Mat3 K{0, -w[2], w[1], w[2], 0, -w[0], -w[1], w[0], 0};
  Mat3 R;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double k2 = K[i * 3] * K[j] + K[i * 3 + 1] * K[3 + j] + K[i * 3 + 2] * K[6 + j];
      R[i * 3 + j] = (i == j ? 1.0 : 0.0) + a * K[i * 3 + j] + b * k2;
    }
  return R;
}

double rotation_angle(const Mat3& R) {
  // atan2 of the skew norm stays well conditioned near the identity, where
  // acos of the trace loses half the digits.
  double c = (R[0] + R[4] + R[8] - 1.0) / 2.0;
  double vx = R[7] - R[5], vy = R[2] - R[6], vz = R[3] - R[1];
  double s = 0.5 * std::sqrt(vx * vx + vy * vy + vz * vz);
  return std::atan2(s, c);
}

Vec3 log_rotation(const Mat3& R) {
  double th = rotation_angle(R);
  Vec3 v{R[7] - R[5], R[2] - R[6], R[3] - R[1]};  // 2 sin(th) * axis
  if (th < 1e-8) return {0.5 * v[0], 0.5 * v[1], 0.5 * v[2]};
  if (th < M_PI - 1e-4) {
    double s = th / (2.0 * std::sin(th));
    return {s * v[0], s * v[1], s * v[2]};
  }
  // Near a half-turn the skew part vanishes; recover the axis from the
  // symmetric part R = cos I + (1-cos) aa^T (+ tiny skew).
  double c = std::cos(th), oc = 1.0 - c;
  int i = 0;
  if (R[4] > R[0]) i = 1;
  if (R[8] > R[i * 3 + i]) i = 2;
  Vec3 a{};
  a[i] = std::sqrt(std::max(0.0, (R[i * 3 + i] - c) / oc));
  for (int j = 0; j < 3; ++j)
    if (j != i) a[j] = (R[i * 3 + j] + R[j * 3 + i]) / (2.0 * oc * a[i]);
  double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  double sgn = (v[0] * a[0] + v[1] * a[1] + v[2] * a[2]) < 0 ? -1.0 : 1.0;
  double s = sgn * th / n;
  return {s * a[0], s * a[1], s * a[2]};
}

RigidTransform from_xi(const std::array<double, 6>& xi) {
  RigidTransform T;
  T.t = {xi[0], xi[1], xi[2]};
  T.R = rodrigues({xi[3], xi[4], xi[5]});
  return T;
}

std::array<double, 6> to_xi(const RigidTransform& T) {
  Vec3 w = log_rotation(T.R);
  return {T.t[0], T.t[1], T.t[2], w[0], w[1], w[2]};
}

ad::Tensor exp_map(const ad::Tensor& xi) {
  using namespace ad;
  if (xi.size() != 6)
    throw std::invalid_argument("exp_map: need 6 elements, got " + std::to_string(xi.size()));
  Tensor rho = slice(xi, 0, 0, 3);
  Tensor w = slice(xi, 0, 3, 3);
  Tensor th2 = sum(square(w));
  Tensor a, b;
  if (th2.item() < 1e-16) {
    a = add_const(scale(th2, -1.0 / 6.0), 1.0);
    b = add_const(scale(th2, -1.0 / 24.0), 0.5);
  } else {
    Tensor th = sqrt(th2);
    a = div(sin(th), th);
    b = div(add_const(neg(cos(th)), 1.0), th2);
  }
  Tensor K = skew3(w);
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor R = add(eye, add(mul(K, a), mul(matmul(K, K), b)));
  return concat(R, reshape(rho, {3, 1}), 1);
}

RigidTransform align_rigid(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  if (from.size() != to.size() || from.size() < 3)
    throw std::invalid_argument("align_rigid: need >= 3 point pairs of equal count");
  std::size_t n = from.size();
  Eigen::Vector3d mf = Eigen::Vector3d::Zero(), mt = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mf += Eigen::Vector3d(from[i][0], from[i][1], from[i][2]);
    mt += Eigen::Vector3d(to[i][0], to[i][1], to[i][2]);
  }
  mf /= (double)n;
  mt /= (double)n;
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector3d f(from[i][0], from[i][1], from[i][2]);
    Eigen::Vector3d t(to[i][0], to[i][1], to[i][2]);
    H += (t - mt) * (f - mf).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
  if ((U * V.transpose()).determinant() < 0) D(2, 2) = -1;
  Eigen::Matrix3d R = U * D * V.transpose();
  Eigen::Vector3d t = mt - R * mf;
  RigidTransform out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.R[i * 3 + j] = R(i, j);
  out.t = {t(0), t(1), t(2)};
  return out;
}

std::vector<RigidTransform> read_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trajectory file: " + path);
  std::vector<RigidTransform> poses;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    double v[12];
    for (int i = 0; i < 12; ++i)
      if (!(ss >> v[i]))
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": expected 12 numbers per pose line");
    RigidTransform T;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) T.R[i * 3 + j] = v[i * 4 + j];
      T.t[i] = v[i * 4 + 3];
    }
    poses.push_back(T);
  }
  return poses;
}

void write_trajectory(const std::string& path, const std::vector<RigidTransform>& poses) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trajectory file: " + path);
  char buf[32];
  for (const auto& T : poses) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) {
        double v = j < 3 ? T.R[i * 3 + j] : T.t[i];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << buf << (i == 2 && j == 3 ? "\n" : " ");
      }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<RigidTransform> perturb_poses(const std::vector<RigidTransform>& poses,
                                          double rot_sigma, double trans_sigma, Rng& rng) {
  std::vector<RigidTransform> out = poses;
  for (std::size_t i = 1; i < out.size(); ++i) {
    double axis[3];
    rng.unit_sphere(axis);
    double ang = rng.normal(0.0, rot_sigma);
    RigidTransform d;
    d.R = rodrigues({axis[0] * ang, axis[1] * ang, axis[2] * ang});
    d.t = {rng.normal(0.0, trans_sigma), rng.normal(0.0, trans_sigma),
           rng.normal(0.0, trans_sigma)};
    out[i] = poses[i].compose(d);
  }
  return out;
}

}  // namespace nlf::se3

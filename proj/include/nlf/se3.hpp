#pragma once

#include <array>
#include <string>
#include <vector>

#include "nlf/rng.hpp"
#include "nlf/tensor.hpp"

namespace nlf::se3 {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

struct RigidTransform {
  Mat3 R{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 t{0, 0, 0};

  Vec3 apply(const Vec3& p) const;
  RigidTransform compose(const RigidTransform& other) const;  // this after other
  RigidTransform inverse() const;
};

Mat3 rodrigues(const Vec3& axis_angle);
double rotation_angle(const Mat3& R);
Vec3 log_rotation(const Mat3& R);

// Pose parameters are xi = (t, w): translation plus rotation axis-angle.
// The translation is used directly, not pushed through the rotation Jacobian.
RigidTransform from_xi(const std::array<double, 6>& xi);
std::array<double, 6> to_xi(const RigidTransform& T);

// Differentiable version: xi {6} -> [3,4] row-major [R | t].
ad::Tensor exp_map(const ad::Tensor& xi);

// Least-squares rigid alignment (rotation + translation, unit scale)
// mapping `from` onto `to`.
RigidTransform align_rigid(const std::vector<Vec3>& from, const std::vector<Vec3>& to);

// One pose per line: 12 numbers, the [R | t] rows in reading order.
std::vector<RigidTransform> read_trajectory(const std::string& path);
void write_trajectory(const std::string& path, const std::vector<RigidTransform>& poses);

// Right-composes each pose except the first with a random offset: rotation
// about a uniform axis by an angle ~ N(0, rot_sigma), translation components
// ~ N(0, trans_sigma).
std::vector<RigidTransform> perturb_poses(const std::vector<RigidTransform>& poses,
                                          double rot_sigma, double trans_sigma, Rng& rng);

}  // namespace nlf::se3

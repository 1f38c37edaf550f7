#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nlf/field.hpp"
#include "nlf/lidar.hpp"
#include "nlf/rng.hpp"
#include "nlf/se3.hpp"
#include "nlf/tensor.hpp"

namespace nlf::adv {

using ad::Tensor;

// Two stacked depth images: row 0 is frame i cross-projected into frame j's
// view, row 1 is frame j's own depth. Pixels without a return are 0 in both
// channels.
struct DepthPair {
  Tensor chans;  // [2, H, W]
  bool real = false;
};

// Projects points (frame j sensor coordinates) into a depth image with the
// same binning and nearest-wins rule as lidar::project. The pixel assignment
// is frozen from current values; gradients flow through the winning ranges.
// Throws if any point sits exactly at the sensor origin.
Tensor splat_depth(const Tensor& pts, const lidar::SensorModel& sensor);

// Applies Tj^-1 Ti to points given in frame i coordinates; differentiable
// into both pose parameters and the points.
Tensor relative_points(const Tensor& xi_i, const Tensor& xi_j, const Tensor& pts);

// Ground-truth pair: frame i's measured cloud moved by the true relative pose,
// splatted over frame j's measured depth. Entirely constant.
DepthPair make_real(const lidar::PointCloud& cloud_i, const se3::RigidTransform& pose_i,
                    const se3::RigidTransform& pose_j, const std::vector<double>& depth_j,
                    const lidar::SensorModel& sensor);

// Rendered pair: depth_i holds frame i's rendered per-pixel depths [H*W, 1]
// (row-major over the sensor grid); the rendered cloud is unprojected along
// the sensor directions, moved by the estimated relative pose, and splatted.
// Gradients reach depth_i and both pose parameters.
DepthPair make_fake(const Tensor& depth_i, const Tensor& xi_i, const Tensor& xi_j,
                    const std::vector<double>& depth_j, const lidar::SensorModel& sensor);

// Renders frame i's full view through the field, then assembles both pairs.
// Frames must be temporally adjacent. depth_j comes from projecting clouds[j].
std::pair<DepthPair, DepthPair> make_pairs(
    std::size_t i, std::size_t j, const std::vector<lidar::PointCloud>& clouds,
    const std::vector<Tensor>& xis_est, const std::vector<se3::RigidTransform>& poses_gt,
    const field::Field& f, const lidar::SensorModel& sensor,
    const field::RayMarchConfig& rm, const field::SpectralFn& spectral,
    double fusion_weight);

// Four stride-2 convolutions, 2 -> 64 -> 128 -> 256 -> 1, kernel 4, padding 1,
// LeakyReLU 0.2 between layers. Input spatial dims must be multiples of 16;
// the output is the patch score map [1, H/16, W/16].
struct Discriminator {
  std::vector<Tensor> w, b;
  explicit Discriminator(Rng& rng);
  Tensor forward(const Tensor& chans) const;
  std::vector<Tensor> params() const;
};

// Hinge losses over patch score maps: the discriminator pushes real scores
// above 1 and fake scores below -1, the generator raises fake scores.
Tensor disc_loss(const Tensor& score_real, const Tensor& score_fake);
Tensor gen_loss(const Tensor& score_fake);

// Both scales share the discriminator weights; each loss is the mean of the
// full and half resolution evaluations. The discriminator loss detaches the
// pairs so it never backpropagates into the generator.
Tensor disc_loss_multiscale(const Discriminator& d, const DepthPair& real,
                            const DepthPair& fake);
Tensor gen_loss_multiscale(const Discriminator& d, const DepthPair& fake);

// Debug dump: one PGM, the four channels side by side in the order
// real cross | real target | fake cross | fake target.
void dump_pair(const std::string& path, const DepthPair& real, const DepthPair& fake,
               const lidar::SensorModel& sensor);

}  // namespace nlf::adv

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nlf/lidar.hpp"
#include "nlf/rng.hpp"
#include "nlf/se3.hpp"
#include "nlf/tensor.hpp"

namespace nlf::field {

using ad::Tensor;

struct HashGridConfig {
  std::size_t levels = 20;
  std::size_t feats_per_level = 2;
  int table_size_log2 = 19;
  std::size_t base_resolution = 16;
  std::size_t finest_resolution = 2048;  // sets the geometric growth factor

  std::size_t resolution(std::size_t level) const;
  double growth_factor() const;
  std::size_t out_dim() const { return levels * feats_per_level; }
};

// Trilinear multi-resolution grid lookup. Levels whose full vertex lattice
// fits in the table are stored densely; larger ones hash the vertex index.
// Differentiable into both the tables and the query points.
Tensor hash_encode(const Tensor& pts, const std::vector<Tensor>& tables,
                   const HashGridConfig& cfg);

// 12-band sin/cos frequency features per component: [n,3] -> [n, 6*bands].
Tensor view_encode(const Tensor& dirs, std::size_t bands);

using SpectralFn = std::function<Tensor(const Tensor&)>;  // [n,3] -> [n,8]

struct RayMarchConfig {
  std::size_t samples_per_ray = 768;
  double near = 0.02, far = 1.8;  // unit-cube coordinates
  bool stratified = false;
  std::uint64_t jitter_seed = 0;
};

struct LossWeights {
  double depth = 20.0, intensity = 0.5, raydrop = 1.0;
};

struct RenderOut {
  Tensor depth, intensity, drop, opacity;  // all [rays,1]
};

struct FieldConfig {
  HashGridConfig grid;
  std::size_t spectral_dim = 8;
  std::size_t trunk_width = 64;
  std::size_t head_width = 64;
  std::size_t intrinsic_dim = 20;
  std::size_t view_bands = 12;
};

class Field {
 public:
  Field(const FieldConfig& cfg, Rng& rng);

  // f_hyb = concat(f_geo, fusion_weight * f_spe); a missing spectral provider
  // or zero weight contributes zeros.
  Tensor hybrid_query(const Tensor& pts, const SpectralFn& spectral,
                      double fusion_weight) const;

  // Trunk over hybrid features: intrinsic feature rows plus densities.
  std::pair<Tensor, Tensor> trunk(const Tensor& fhyb) const;  // ([n,20], [n,1])

  Tensor intensity_head(const Tensor& feat_view) const;  // [n, 20+6*bands] -> [n,1]
  Tensor raydrop_head(const Tensor& feat_view) const;

  // Differentiable render of a ray bundle. pose is the [3,4] map from sensor
  // to normalized scene coordinates; dirs are unit directions in the sensor
  // frame, one row per ray.
  RenderOut render_rays(const Tensor& pose, const Tensor& dirs, const RayMarchConfig& rm,
                        const SpectralFn& spectral, double fusion_weight) const;

  std::vector<std::pair<std::string, Tensor>> params() const;
  const FieldConfig& config() const { return cfg_; }

 private:
  FieldConfig cfg_;
  std::vector<Tensor> tables_;
  std::vector<Tensor> trunk_w_, trunk_b_;
  std::vector<Tensor> int_w_, int_b_;
  std::vector<Tensor> drop_w_, drop_b_;
};

// Depth L1 over pixels the ground truth kept, intensity squared error over the
// same mask, ray-drop squared error everywhere; each term is a mean over its
// own pixel count.
Tensor range_loss(const RenderOut& pred, const Tensor& gt_depth, const Tensor& gt_intensity,
                  const Tensor& gt_drop, const LossWeights& w);

struct RenderedView {
  lidar::RangeImage img;               // depth zeroed where dropped
  std::vector<double> raw_depth;       // before the drop mask is applied
  std::vector<double> drop_prob;
  std::vector<double> opacity;
};

// Full-frame inference render (no gradients), chunked to bound memory.
// Pixels with drop probability > 0.5 are marked dropped.
RenderedView render_view(const Field& f, const se3::RigidTransform& pose,
                         const lidar::SensorModel& sensor, const RayMarchConfig& rm,
                         const SpectralFn& spectral, double fusion_weight);

// Writes <prefix>_depth.pgm, <prefix>_intensity.pgm, <prefix>_drop.pgm and
// <prefix>_meta.json.
void dump_view(const std::string& prefix, const RenderedView& view,
               const lidar::SensorModel& sensor, const se3::RigidTransform& pose,
               const RayMarchConfig& rm);

}  // namespace nlf::field

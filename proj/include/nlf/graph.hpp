#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "nlf/lidar.hpp"
#include "nlf/tensor.hpp"

namespace nlf::graph {

using ad::Tensor;

// Mutual-nearest-neighbor pairs: a partial bijection between two point sets.
struct Correspondences {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

// feats_* are row-major [n, dim]. A pair (m, n) is kept iff n is m's nearest
// row of feats_j and m is n's nearest row of feats_i under L2; ties go to the
// lowest index.
Correspondences mnn_match(const std::vector<double>& feats_i, const std::vector<double>& feats_j,
                          std::size_t dim);

// MNN recomputed with the given features restricted to the point subsets the
// coarse stage matched. Pairs keep original indices.
Correspondences refine_match(const Correspondences& coarse, const std::vector<double>& feats_i,
                             const std::vector<double>& feats_j, std::size_t dim);

// Mean cosine similarity over pairs; zero-norm features skip their pair. An
// empty set (or one with no valid pair) scores -1 so the edge is never
// admitted.
double edge_compatibility(const Correspondences& fine, const std::vector<double>& feats_i,
                          const std::vector<double>& feats_j, std::size_t dim);

// Per-pair fraction of other pairs whose within-cloud distances agree to
// tau_d, and the average over pairs. Fewer than two pairs gives zeros.
std::pair<std::vector<double>, double> spatial_consistency(const Correspondences& fine,
                                                           const std::vector<double>& cloud_i,
                                                           const std::vector<double>& cloud_j,
                                                           double tau_d);

// Both thresholds ramp linearly over training progress in [0,1] (clamped).
struct ThresholdSchedule {
  double edge_lo = 0.5, edge_hi = 0.9;
  double tau_lo = 0.1, tau_hi = 0.2;

  double edge_threshold(double progress) const;
  double tau_d(double progress) const;
};

struct GraphEdge {
  std::size_t i = 0, j = 0;
  double compatibility = 0.0;
  double alpha = 0.0;
  bool loop = false;
  std::size_t n_pairs = 0;
};

struct PoseGraph {
  std::size_t n_frames = 0;
  std::vector<GraphEdge> edges;
};

// First point wins inside each occupied voxel; a cap keeps every k-th
// survivor. Returns packed xyz.
std::vector<double> voxel_downsample(const std::vector<double>& xyz, double voxel,
                                     std::size_t cap);

// Sequential edges are always present; every non-adjacent pair becomes a loop
// edge iff its fine-stage compatibility exceeds the threshold. All edges are
// weighted by average spatial consistency.
PoseGraph build_graph(const std::vector<std::vector<double>>& clouds,
                      const std::vector<std::vector<double>>& feats, std::size_t dim,
                      double edge_threshold, double tau_d);

// Symmetric mean of squared nearest-neighbor distances, both directions.
double chamfer(const std::vector<double>& a, const std::vector<double>& b);

// Differentiable chamfer between [n,3] point tensors. The assignment is
// frozen at the current values; gradients flow through the squared distances
// of the matched pairs into both clouds.
Tensor chamfer_loss(const Tensor& a, const Tensor& b);

// Applies exp(xi) to [n,3] points: pts * R^T + t.
Tensor transform_points(const Tensor& xi, const Tensor& pts);

// Sum over edges of alpha * chamfer(T_i S_i, T_j S_j). Gradients reach only
// the pose parameters; clouds are packed xyz per frame.
Tensor graph_loss(const PoseGraph& g, const std::vector<std::vector<double>>& clouds,
                  const std::vector<Tensor>& xis);

// One edge per line: {"i":..,"j":..,"kind":"sequential"|"loop",
// "compatibility":..,"alpha":..,"n_pairs":..}.
void dump_graph(const std::string& path, const PoseGraph& g);

}  // namespace nlf::graph

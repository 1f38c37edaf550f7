#include "nlf/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "nlf/kernels.hpp"
#include "nlf/se3.hpp"

namespace nlf::graph {

namespace {

std::size_t check_feats(const std::vector<double>& feats, std::size_t dim, const char* who) {
  if (dim == 0) throw std::invalid_argument(std::string(who) + ": zero feature dim");
  if (feats.empty() || feats.size() % dim != 0)
    throw std::invalid_argument(std::string(who) + ": feature buffer not a multiple of dim");
  return feats.size() / dim;
}

double dist3(const double* a, const double* b) {
  double s = 0;
  for (int d = 0; d < 3; ++d) {
    double v = a[d] - b[d];
    s += v * v;
  }
  return std::sqrt(s);
}

}  // namespace

Correspondences mnn_match(const std::vector<double>& feats_i, const std::vector<double>& feats_j,
                          std::size_t dim) {
  std::size_t ni = check_feats(feats_i, dim, "mnn_match");
  std::size_t nj = check_feats(feats_j, dim, "mnn_match");
  std::vector<int> ij(ni), ji(nj);
  kernels::feature_nn(feats_i.data(), ni, feats_j.data(), nj, dim, ij.data());
  kernels::feature_nn(feats_j.data(), nj, feats_i.data(), ni, dim, ji.data());
  Correspondences out;
  for (std::size_t m = 0; m < ni; ++m) {
    std::size_t n = (std::size_t)ij[m];
    if ((std::size_t)ji[n] == m) out.pairs.emplace_back(m, n);
  }
  return out;
}

Correspondences refine_match(const Correspondences& coarse, const std::vector<double>& feats_i,
                             const std::vector<double>& feats_j, std::size_t dim) {
  if (coarse.pairs.empty()) return {};
  check_feats(feats_i, dim, "refine_match");
  check_feats(feats_j, dim, "refine_match");
  std::vector<std::size_t> mi, mj;
  for (auto& [m, n] : coarse.pairs) {
    mi.push_back(m);
    mj.push_back(n);
  }
  std::sort(mi.begin(), mi.end());
  std::sort(mj.begin(), mj.end());
  std::vector<double> sub_i(mi.size() * dim), sub_j(mj.size() * dim);
  for (std::size_t k = 0; k < mi.size(); ++k)
    std::copy_n(feats_i.begin() + mi[k] * dim, dim, sub_i.begin() + k * dim);
  for (std::size_t k = 0; k < mj.size(); ++k)
    std::copy_n(feats_j.begin() + mj[k] * dim, dim, sub_j.begin() + k * dim);
  Correspondences local = mnn_match(sub_i, sub_j, dim);
  Correspondences out;
  for (auto& [a, b] : local.pairs) out.pairs.emplace_back(mi[a], mj[b]);
  return out;
}

double edge_compatibility(const Correspondences& fine, const std::vector<double>& feats_i,
                          const std::vector<double>& feats_j, std::size_t dim) {
  if (fine.pairs.empty()) return -1.0;
  check_feats(feats_i, dim, "edge_compatibility");
  check_feats(feats_j, dim, "edge_compatibility");
  double acc = 0;
  std::size_t valid = 0;
  for (auto& [m, n] : fine.pairs) {
    const double* fi = feats_i.data() + m * dim;
    const double* fj = feats_j.data() + n * dim;
    double dot = 0, ni = 0, nj = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      dot += fi[d] * fj[d];
      ni += fi[d] * fi[d];
      nj += fj[d] * fj[d];
    }
    if (ni <= 0 || nj <= 0) continue;
    acc += dot / std::sqrt(ni * nj);
    ++valid;
  }
  if (valid == 0) return -1.0;
  return acc / (double)valid;
}

std::pair<std::vector<double>, double> spatial_consistency(const Correspondences& fine,
                                                           const std::vector<double>& cloud_i,
                                                           const std::vector<double>& cloud_j,
                                                           double tau_d) {
  std::size_t np = fine.pairs.size();
  if (np < 2) return {std::vector<double>(np, 0.0), 0.0};
  std::vector<double> P(np, 0.0);
#pragma omp parallel for schedule(static)
  for (std::int64_t k = 0; k < (std::int64_t)np; ++k) {
    auto [m, n] = fine.pairs[(std::size_t)k];
    std::size_t hits = 0;
    for (std::size_t l = 0; l < np; ++l) {
      if (l == (std::size_t)k) continue;
      auto [m2, n2] = fine.pairs[l];
      double di = dist3(cloud_i.data() + m * 3, cloud_i.data() + m2 * 3);
      double dj = dist3(cloud_j.data() + n * 3, cloud_j.data() + n2 * 3);
      if (std::fabs(di - dj) < tau_d) ++hits;
    }
    P[(std::size_t)k] = (double)hits / (double)(np - 1);
  }
  double alpha = 0;
  for (double p : P) alpha += p;
  return {std::move(P), alpha / (double)np};
}

double ThresholdSchedule::edge_threshold(double progress) const {
  double p = std::clamp(progress, 0.0, 1.0);
  return edge_lo + (edge_hi - edge_lo) * p;
}

double ThresholdSchedule::tau_d(double progress) const {
  double p = std::clamp(progress, 0.0, 1.0);
  return tau_lo + (tau_hi - tau_lo) * p;
}

std::vector<double> voxel_downsample(const std::vector<double>& xyz, double voxel,
                                     std::size_t cap) {
  if (voxel <= 0) throw std::invalid_argument("voxel_downsample: voxel must be positive");
  std::size_t n = xyz.size() / 3;
  std::unordered_set<std::uint64_t> seen;
  std::vector<double> kept;
  kept.reserve(std::min(n, cap) * 3);
  for (std::size_t i = 0; i < n; ++i) {
    std::int64_t cx = (std::int64_t)std::floor(xyz[i * 3] / voxel);
    std::int64_t cy = (std::int64_t)std::floor(xyz[i * 3 + 1] / voxel);
    std::int64_t cz = (std::int64_t)std::floor(xyz[i * 3 + 2] / voxel);
    std::uint64_t key = ((std::uint64_t)(cx & 0x1fffff) << 42) |
                        ((std::uint64_t)(cy & 0x1fffff) << 21) | (std::uint64_t)(cz & 0x1fffff);
    if (!seen.insert(key).second) continue;
    kept.insert(kept.end(), xyz.begin() + i * 3, xyz.begin() + (i + 1) * 3);
  }
  std::size_t nk = kept.size() / 3;
  if (cap == 0 || nk <= cap) return kept;
  std::size_t stride = (nk + cap - 1) / cap;
  std::vector<double> capped;
  capped.reserve(cap * 3);
  for (std::size_t i = 0; i < nk; i += stride)
    capped.insert(capped.end(), kept.begin() + i * 3, kept.begin() + (i + 1) * 3);
  return capped;
}

PoseGraph build_graph(const std::vector<std::vector<double>>& clouds,
                      const std::vector<std::vector<double>>& feats, std::size_t dim,
                      double edge_threshold, double tau_d) {
  if (clouds.size() < 2) throw std::invalid_argument("build_graph: need at least 2 frames");
  if (feats.size() != clouds.size())
    throw std::invalid_argument("build_graph: clouds/features count mismatch");
  PoseGraph g;
  g.n_frames = clouds.size();
  for (std::size_t i = 0; i < clouds.size(); ++i)
    for (std::size_t j = i + 1; j < clouds.size(); ++j) {
      bool sequential = (j == i + 1);
      Correspondences coarse = mnn_match(feats[i], feats[j], dim);
      Correspondences fine = refine_match(coarse, feats[i], feats[j], dim);
      double compat = edge_compatibility(fine, feats[i], feats[j], dim);
      if (!sequential && !(compat > edge_threshold)) continue;
      auto [P, alpha] = spatial_consistency(fine, clouds[i], clouds[j], tau_d);
      g.edges.push_back({i, j, compat, alpha, !sequential, fine.pairs.size()});
    }
  return g;
}

double chamfer(const std::vector<double>& a, const std::vector<double>& b) {
  std::size_t na = a.size() / 3, nb = b.size() / 3;
  if (na == 0 || nb == 0) throw std::invalid_argument("chamfer: empty cloud");
  std::vector<int> idx(std::max(na, nb));
  std::vector<double> d2(std::max(na, nb));
  double sa = 0, sb = 0;
  kernels::nn3(b.data(), nb, a.data(), na, idx.data(), d2.data());
  for (std::size_t i = 0; i < na; ++i) sa += d2[i];
  kernels::nn3(a.data(), na, b.data(), nb, idx.data(), d2.data());
  for (std::size_t i = 0; i < nb; ++i) sb += d2[i];
  return sa / (double)na + sb / (double)nb;
}

Tensor chamfer_loss(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || a.cols() != 3 || b.shape().size() != 2 || b.cols() != 3)
    throw std::invalid_argument("chamfer_loss: need [n,3] clouds");
  std::size_t na = a.rows(), nb = b.rows();
  if (na == 0 || nb == 0) throw std::invalid_argument("chamfer_loss: empty cloud");
  std::vector<int> iab(na), iba(nb);
  std::vector<double> d2(std::max(na, nb));
  kernels::nn3(b.val().data(), nb, a.val().data(), na, iab.data(), d2.data());
  kernels::nn3(a.val().data(), na, b.val().data(), nb, iba.data(), d2.data());
  std::vector<std::size_t> rab(iab.begin(), iab.end()), rba(iba.begin(), iba.end());
  Tensor da = ad::mean(ad::sum_axis(ad::square(ad::sub(a, ad::gather_rows(b, rab))), 1));
  Tensor db = ad::mean(ad::sum_axis(ad::square(ad::sub(b, ad::gather_rows(a, rba))), 1));
  return ad::add(da, db);
}

Tensor transform_points(const Tensor& xi, const Tensor& pts) {
  Tensor T = se3::exp_map(xi);
  Tensor R = ad::slice(T, 1, 0, 3);
  Tensor t = ad::slice(T, 1, 3, 1);
  return ad::add(ad::matmul(pts, ad::transpose(R)), ad::transpose(t));
}

Tensor graph_loss(const PoseGraph& g, const std::vector<std::vector<double>>& clouds,
                  const std::vector<Tensor>& xis) {
  if (g.edges.empty()) throw std::invalid_argument("graph_loss: empty graph");
  if (clouds.size() != xis.size() || clouds.size() < g.n_frames)
    throw std::invalid_argument("graph_loss: clouds/poses mismatch");
  std::vector<Tensor> world(clouds.size());
  auto transformed = [&](std::size_t f) {
    if (!world[f].defined()) {
      Tensor pts = Tensor::from({clouds[f].size() / 3, 3},
                                std::vector<double>(clouds[f].begin(), clouds[f].end()));
      world[f] = transform_points(xis[f], pts);
    }
    return world[f];
  };
  Tensor loss = Tensor::scalar(0.0);
  for (auto& e : g.edges) {
    if (e.alpha == 0.0) continue;
    Tensor c = chamfer_loss(transformed(e.i), transformed(e.j));
    loss = ad::add(loss, ad::scale(c, e.alpha));
  }
  return loss;
}

void dump_graph(const std::string& path, const PoseGraph& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dump_graph: cannot open " + path);
  for (auto& e : g.edges) {
    nlohmann::json j;
    j["i"] = e.i;
    j["j"] = e.j;
    j["kind"] = e.loop ? "loop" : "sequential";
    j["compatibility"] = e.compatibility;
    j["alpha"] = e.alpha;
    j["n_pairs"] = e.n_pairs;
    out << j.dump() << "\n";
  }
}

}  // namespace nlf::graph

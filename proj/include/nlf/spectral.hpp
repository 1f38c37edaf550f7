#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nlf/rng.hpp"
#include "nlf/se3.hpp"
#include "nlf/tensor.hpp"

namespace nlf::spectral {

using ad::Tensor;
using se3::Vec3;

// Plain helpers mirroring the differentiable path, used directly on sample
// data and as cross-checks.
double area_element(const Vec3& t1, const Vec3& t2);      // sqrt(EG - F^2)
Vec3 surface_gradient(const Vec3& grad3d, const Vec3& n);  // tangent projection
double rayleigh_quotient(const std::vector<double>& psi,
                         const std::vector<Vec3>& surface_grads,
                         const std::vector<double>& dA);
double ortho_loss(const std::vector<double>& psi_matrix, std::size_t m, std::size_t k,
                  const std::vector<double>& dA);
double norm_loss(const std::vector<double>& psi_matrix, std::size_t m, std::size_t k,
                 const std::vector<double>& dA);

struct SurfaceSample {
  Vec3 x, t1, t2, n;
  double dA;
};

// Points, unit normals and area elements for one Monte Carlo draw, as tensors
// so losses can differentiate back into whatever produced them.
struct SampleBatch {
  Tensor x;   // [m,3]
  Tensor n;   // [m,3]
  Tensor dA;  // [m,1]
};

// Identity unit sphere: x = n = u, dA = 1.
SampleBatch sphere_batch(std::size_t m, std::uint64_t seed);

// Smooth (softplus) 3-layer MLP from unit-sphere parameters to 3D points.
class NeuralSurface {
 public:
  NeuralSurface(std::size_t width, Rng& rng);

  Tensor map(const Tensor& u) const;  // [n,3] -> [n,3]
  // Forward pass carrying two directional-derivative streams, all in
  // primitive ops so the tangents stay differentiable in the parameters.
  void map_with_tangents(const Tensor& u, const Tensor& v1, const Tensor& v2,
                         Tensor& x, Tensor& t1, Tensor& t2) const;

  // Area-uniform rejection draw (plain values; dA_max from a pilot draw).
  std::vector<SurfaceSample> sample_surface(std::size_t m, std::uint64_t seed) const;
  // Same draw, re-evaluated differentiably.
  SampleBatch sample_batch(std::size_t m, std::uint64_t seed) const;
  // Differentiable batch at given sphere parameters (flat xyz triples).
  SampleBatch batch_at(const std::vector<double>& us) const;

  double area_estimate(std::size_t n, std::uint64_t seed) const;

  // One-sided Chamfer pre-fit: surface samples pulled onto the cloud.
  void fit(const std::vector<double>& cloud_xyz, std::size_t steps, double lr, Rng& rng);

  std::vector<std::pair<std::string, Tensor>> params() const;

 private:
  std::vector<Tensor> w_, b_;
};

struct SpectralConfig {
  std::size_t monte_carlo = 4096;  // M
  double lambda_n = 0.1;
  double lambda_o = 10.0;
  // Route each pair's orthogonality gradient into the later function only
  // (deflation). The loss value is unchanged. With the symmetric gradient,
  // remixing an orthonormal set within its span leaves the quotient sum flat
  // and training freezes on mixed bands; the ordered routing settles each
  // function onto the lowest band still available to it.
  bool deflation = false;
};

struct SpectralTerms {
  Tensor total;      // scalar
  Tensor quotients;  // [1,k]
  Tensor norm_term;  // scalar
  Tensor ortho_term; // scalar
};

class EigenfunctionSet {
 public:
  EigenfunctionSet(std::size_t k, std::size_t width, Rng& rng);

  std::size_t k() const { return k_; }
  Tensor embed(const Tensor& x) const;  // [n,3] -> [n,k]
  // psi plus its three spatial partial derivatives, each [n,k].
  void psi_and_grads(const Tensor& x, Tensor& psi, Tensor grad[3]) const;
  // Mix the output layer so the weighted Gram over the batch is identity,
  // combining each function only with earlier ones (ordered Gram-Schmidt).
  // Run at init and periodically during training: it projects the set onto
  // the penalty-free manifold, where quotient descent plus this projection
  // is orthogonal iteration and separates the spectral bands. Plain penalty
  // gradients alone stall: remixing an orthonormal set within its span
  // leaves the quotient sum flat.
  void orthonormalize(const SampleBatch& batch);
  // Relabel functions (permute output columns); order[i] is the old index
  // that becomes function i. Keeping index order aligned with quotient order
  // stops band crossings during the iteration above.
  void permute(const std::vector<std::size_t>& order);

  std::vector<std::pair<std::string, Tensor>> params() const;

 private:
  std::size_t k_;
  std::vector<Tensor> w_, b_;
};

// Sum of Rayleigh quotients plus weighted norm and orthogonality penalties
// over one sample batch.
SpectralTerms spectral_terms(const SampleBatch& batch, const EigenfunctionSet& eigs,
                             const SpectralConfig& cfg);
Tensor spectral_loss(const NeuralSurface& surface, const EigenfunctionSet& eigs,
                     const SpectralConfig& cfg, std::uint64_t seed);

// Fraction of each function's weighted second moment explained by its mean;
// 1 means constant. Used to exclude collapsed-constant functions.
std::vector<double> constancy(const SampleBatch& batch, const EigenfunctionSet& eigs);

double psi0(double total_area);  // 1/sqrt(area)

// Lat-long sampling of each eigenfunction over the surface, min-max
// normalized to <prefix>_psiK.pgm plus <prefix>_psi_meta.json.
void dump_eigenfunctions(const std::string& prefix, const NeuralSurface& surface,
                         const EigenfunctionSet& eigs, std::size_t rows, std::size_t cols);

}  // namespace nlf::spectral

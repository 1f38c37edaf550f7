#include "nlf/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <json.hpp>

#include "nlf/kernels.hpp"
#include "nlf/lidar.hpp"
#include "nlf/optim.hpp"

namespace nlf::spectral {

double area_element(const Vec3& t1, const Vec3& t2) {
  double E = t1[0] * t1[0] + t1[1] * t1[1] + t1[2] * t1[2];
  double G = t2[0] * t2[0] + t2[1] * t2[1] + t2[2] * t2[2];
  double F = t1[0] * t2[0] + t1[1] * t2[1] + t1[2] * t2[2];
  return std::sqrt(std::max(0.0, E * G - F * F));
}

Vec3 surface_gradient(const Vec3& g, const Vec3& n) {
  double d = g[0] * n[0] + g[1] * n[1] + g[2] * n[2];
  return {g[0] - d * n[0], g[1] - d * n[1], g[2] - d * n[2]};
}

double rayleigh_quotient(const std::vector<double>& psi,
                         const std::vector<Vec3>& grads,
                         const std::vector<double>& dA) {
  if (psi.size() != grads.size() || psi.size() != dA.size())
    throw std::invalid_argument("rayleigh_quotient: mismatched lengths");
  double num = 0, den = 0;
  for (std::size_t j = 0; j < psi.size(); ++j) {
    const Vec3& g = grads[j];
    num += (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]) * dA[j];
    den += psi[j] * psi[j] * dA[j];
  }
  if (den <= 0)
    throw std::invalid_argument("rayleigh_quotient: zero denominator");
  return num / den;
}

double ortho_loss(const std::vector<double>& psi, std::size_t m, std::size_t k,
                  const std::vector<double>& dA) {
  double loss = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      if (i == l) continue;
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += psi[j * k + i] * psi[j * k + l] * dA[j];
      loss += s * s;
    }
  return loss;
}

double norm_loss(const std::vector<double>& psi, std::size_t m, std::size_t k,
                 const std::vector<double>& dA) {
  double loss = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < m; ++j) s += psi[j * k + i] * psi[j * k + i] * dA[j];
    loss += (s - 1) * (s - 1);
  }
  return loss;
}

namespace {

// Orthonormal tangent frame of the parameter sphere at u.
void tangent_frame(const double u[3], double v1[3], double v2[3]) {
  int least = 0;
  for (int d = 1; d < 3; ++d)
    if (std::fabs(u[d]) < std::fabs(u[least])) least = d;
  double e[3] = {0, 0, 0};
  e[least] = 1;
  v1[0] = u[1] * e[2] - u[2] * e[1];
  v1[1] = u[2] * e[0] - u[0] * e[2];
  v1[2] = u[0] * e[1] - u[1] * e[0];
  double n = std::sqrt(v1[0] * v1[0] + v1[1] * v1[1] + v1[2] * v1[2]);
  for (int d = 0; d < 3; ++d) v1[d] /= n;
  v2[0] = u[1] * v1[2] - u[2] * v1[1];
  v2[1] = u[2] * v1[0] - u[0] * v1[2];
  v2[2] = u[0] * v1[1] - u[1] * v1[0];
}

Tensor xavier(std::size_t fin, std::size_t fout, Rng& rng) {
  double s = std::sqrt(6.0 / (double)(fin + fout));
  std::vector<double> w(fin * fout);
  for (auto& v : w) v = rng.uniform(-s, s);
  return Tensor::from({fin, fout}, std::move(w), true);
}

Tensor col(const Tensor& m, std::size_t c) { return ad::slice(m, 1, c, 1); }

Tensor cross_cols(const Tensor& a, const Tensor& b, int d) {
  int i = (d + 1) % 3, j = (d + 2) % 3;
  return ad::sub(ad::mul(col(a, i), col(b, j)), ad::mul(col(a, j), col(b, i)));
}

}  // namespace

SampleBatch sphere_batch(std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> us(m * 3);
  for (std::size_t i = 0; i < m; ++i) rng.unit_sphere(us.data() + i * 3);
  SampleBatch b;
  b.x = Tensor::from({m, 3}, us);
  b.n = Tensor::from({m, 3}, std::move(us));
  b.dA = Tensor::full({m, 1}, 1.0);
  return b;
}

NeuralSurface::NeuralSurface(std::size_t width, Rng& rng) {
  w_ = {xavier(3, width, rng), xavier(width, width, rng), xavier(width, 3, rng)};
  b_ = {Tensor::zeros({1, width}, true), Tensor::zeros({1, width}, true),
        Tensor::zeros({1, 3}, true)};
}

Tensor NeuralSurface::map(const Tensor& u) const {
  Tensor h = ad::softplus(ad::add(ad::matmul(u, w_[0]), b_[0]));
  h = ad::softplus(ad::add(ad::matmul(h, w_[1]), b_[1]));
  return ad::add(ad::matmul(h, w_[2]), b_[2]);
}

void NeuralSurface::map_with_tangents(const Tensor& u, const Tensor& v1, const Tensor& v2,
                                      Tensor& x, Tensor& t1, Tensor& t2) const {
  Tensor h = u, d1 = v1, d2 = v2;
  for (int layer = 0; layer < 2; ++layer) {
    Tensor z = ad::add(ad::matmul(h, w_[layer]), b_[layer]);
    Tensor s = ad::sigmoid(z);
    d1 = ad::mul(s, ad::matmul(d1, w_[layer]));
    d2 = ad::mul(s, ad::matmul(d2, w_[layer]));
    h = ad::softplus(z);
  }
  x = ad::add(ad::matmul(h, w_[2]), b_[2]);
  t1 = ad::matmul(d1, w_[2]);
  t2 = ad::matmul(d2, w_[2]);
}

namespace {

// Batched plain evaluation of tangents and area elements for candidate
// parameters (no gradients).
void eval_dA(const NeuralSurface& surf, const std::vector<double>& us,
             std::vector<double>* xs, std::vector<double>* t1s,
             std::vector<double>* t2s, std::vector<double>& dAs) {
  ad::NoGradGuard ng;
  std::size_t n = us.size() / 3;
  std::vector<double> v1(n * 3), v2(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    tangent_frame(us.data() + i * 3, v1.data() + i * 3, v2.data() + i * 3);
  Tensor x, t1, t2;
  surf.map_with_tangents(Tensor::from({n, 3}, us), Tensor::from({n, 3}, v1),
                         Tensor::from({n, 3}, v2), x, t1, t2);
  dAs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 a{t1.val()[i * 3], t1.val()[i * 3 + 1], t1.val()[i * 3 + 2]};
    Vec3 b{t2.val()[i * 3], t2.val()[i * 3 + 1], t2.val()[i * 3 + 2]};
    dAs[i] = area_element(a, b);
  }
  if (xs) xs->assign(x.val().begin(), x.val().end());
  if (t1s) t1s->assign(t1.val().begin(), t1.val().end());
  if (t2s) t2s->assign(t2.val().begin(), t2.val().end());
}

std::vector<double> draw_accepted_params(const NeuralSurface& surf, std::size_t m,
                                         std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> pilot(1024 * 3);
  for (std::size_t i = 0; i < 1024; ++i) rng.unit_sphere(pilot.data() + i * 3);
  std::vector<double> dAs;
  eval_dA(surf, pilot, nullptr, nullptr, nullptr, dAs);
  double dA_max = *std::max_element(dAs.begin(), dAs.end());
  if (dA_max <= 1e-12)
    throw std::runtime_error("sample_surface: surface has zero area");

  std::vector<double> accepted;
  accepted.reserve(m * 3);
  for (int round = 0; round < 4096 && accepted.size() < m * 3; ++round) {
    std::size_t batch = 1024;
    std::vector<double> cand(batch * 3), coins(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      rng.unit_sphere(cand.data() + i * 3);
      coins[i] = rng.uniform();
    }
    eval_dA(surf, cand, nullptr, nullptr, nullptr, dAs);
    for (std::size_t i = 0; i < batch && accepted.size() < m * 3; ++i)
      if (coins[i] < dAs[i] / dA_max)
        accepted.insert(accepted.end(), cand.begin() + i * 3, cand.begin() + i * 3 + 3);
  }
  if (accepted.size() < m * 3)
    throw std::runtime_error("sample_surface: rejection sampling stalled");
  return accepted;
}

}  // namespace

std::vector<SurfaceSample> NeuralSurface::sample_surface(std::size_t m,
                                                         std::uint64_t seed) const {
  if (m < 1) throw std::invalid_argument("sample_surface: m must be >= 1");
  auto us = draw_accepted_params(*this, m, seed);
  std::vector<double> xs, t1s, t2s, dAs;
  eval_dA(*this, us, &xs, &t1s, &t2s, dAs);
  std::vector<SurfaceSample> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    SurfaceSample& s = out[i];
    for (int d = 0; d < 3; ++d) {
      s.x[d] = xs[i * 3 + d];
      s.t1[d] = t1s[i * 3 + d];
      s.t2[d] = t2s[i * 3 + d];
    }
    s.dA = dAs[i];
    Vec3 c{s.t1[1] * s.t2[2] - s.t1[2] * s.t2[1], s.t1[2] * s.t2[0] - s.t1[0] * s.t2[2],
           s.t1[0] * s.t2[1] - s.t1[1] * s.t2[0]};
    double cn = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
    s.n = cn > 1e-15 ? Vec3{c[0] / cn, c[1] / cn, c[2] / cn} : Vec3{0, 0, 1};
  }
  return out;
}

SampleBatch NeuralSurface::sample_batch(std::size_t m, std::uint64_t seed) const {
  return batch_at(draw_accepted_params(*this, m, seed));
}

SampleBatch NeuralSurface::batch_at(const std::vector<double>& us) const {
  std::size_t m = us.size() / 3;
  std::vector<double> v1(m * 3), v2(m * 3);
  for (std::size_t i = 0; i < m; ++i)
    tangent_frame(us.data() + i * 3, v1.data() + i * 3, v2.data() + i * 3);
  Tensor x, t1, t2;
  map_with_tangents(Tensor::from({m, 3}, us), Tensor::from({m, 3}, std::move(v1)),
                    Tensor::from({m, 3}, std::move(v2)), x, t1, t2);
  Tensor E = ad::sum_axis(ad::square(t1), 1);
  Tensor G = ad::sum_axis(ad::square(t2), 1);
  Tensor F = ad::sum_axis(ad::mul(t1, t2), 1);
  SampleBatch b;
  b.x = x;
  b.dA = ad::sqrt(ad::add_const(ad::relu(ad::sub(ad::mul(E, G), ad::square(F))), 1e-18));
  Tensor cx = cross_cols(t1, t2, 0), cy = cross_cols(t1, t2, 1), cz = cross_cols(t1, t2, 2);
  Tensor cn = ad::sqrt(
      ad::add_const(ad::add(ad::add(ad::square(cx), ad::square(cy)), ad::square(cz)), 1e-18));
  b.n = ad::concat(ad::concat(ad::div(cx, cn), ad::div(cy, cn), 1), ad::div(cz, cn), 1);
  return b;
}

double NeuralSurface::area_estimate(std::size_t n, std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<double> us(n * 3), dAs;
  for (std::size_t i = 0; i < n; ++i) rng.unit_sphere(us.data() + i * 3);
  eval_dA(*this, us, nullptr, nullptr, nullptr, dAs);
  double s = 0;
  for (double v : dAs) s += v;
  return 4.0 * M_PI * s / (double)n;
}

void NeuralSurface::fit(const std::vector<double>& cloud_xyz, std::size_t steps, double lr,
                        Rng& rng) {
  if (cloud_xyz.size() < 3) throw std::invalid_argument("fit: empty cloud");
  std::size_t ncloud = cloud_xyz.size() / 3;
  double ctr[3] = {0, 0, 0};
  for (std::size_t i = 0; i < ncloud; ++i)
    for (int d = 0; d < 3; ++d) ctr[d] += cloud_xyz[i * 3 + d];
  for (int d = 0; d < 3; ++d) ctr[d] /= (double)ncloud;
  double rcloud = 0;
  for (std::size_t i = 0; i < ncloud; ++i)
    for (int d = 0; d < 3; ++d) {
      double dd = cloud_xyz[i * 3 + d] - ctr[d];
      rcloud += dd * dd;
    }
  rcloud = std::sqrt(rcloud / (double)ncloud);
  {
    // Rescale the output layer so the initial surface spans the cloud. A map
    // much smaller than the cloud shares one nearest target across all
    // samples and the chamfer pull collapses it to that point.
    ad::NoGradGuard ng;
    std::vector<double> pilot(512 * 3);
    for (std::size_t i = 0; i < 512; ++i) rng.unit_sphere(pilot.data() + i * 3);
    Tensor px = map(Tensor::from({512, 3}, std::move(pilot)));
    double m0[3] = {0, 0, 0}, s0 = 0;
    for (std::size_t i = 0; i < 512; ++i)
      for (int d = 0; d < 3; ++d) m0[d] += px.val()[i * 3 + d];
    for (int d = 0; d < 3; ++d) m0[d] /= 512.0;
    for (std::size_t i = 0; i < 512; ++i)
      for (int d = 0; d < 3; ++d) {
        double dd = px.val()[i * 3 + d] - m0[d];
        s0 += dd * dd;
      }
    s0 = std::sqrt(s0 / 512.0);
    double alpha = rcloud / std::max(s0, 1e-9);
    for (auto& v : w_[2].val_mut()) v *= alpha;
    auto b = b_[2].val_mut();
    for (int d = 0; d < 3; ++d) b[d] = alpha * b[d] + ctr[d] - alpha * m0[d];
  }
  auto ps = params();
  std::vector<Tensor> tensors;
  for (auto& [name, t] : ps) tensors.push_back(t);
  ad::Adam opt;
  std::size_t batch = 512, nc = cloud_xyz.size() / 3;
  std::vector<int> idx(batch);
  std::vector<double> d2(batch);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<double> us(batch * 3);
    for (std::size_t i = 0; i < batch; ++i) rng.unit_sphere(us.data() + i * 3);
    Tensor x = map(Tensor::from({batch, 3}, std::move(us)));
    kernels::nn3(cloud_xyz.data(), nc, x.val().data(), batch, idx.data(), d2.data());
    std::vector<double> target(batch * 3);
    for (std::size_t i = 0; i < batch; ++i)
      for (int d = 0; d < 3; ++d) target[i * 3 + d] = cloud_xyz[(std::size_t)idx[i] * 3 + d];
    Tensor pull = ad::mean(ad::sum_axis(ad::square(ad::sub(x, Tensor::from({batch, 3}, target))), 1));
    // The reverse direction rewards coverage; without it the map can settle
    // on a small patch of the cloud. Nearest surface samples are gathered
    // through a constant selection matrix so the gradient reaches the map.
    std::vector<double> probe(batch * 3), sel(batch * batch, 0.0);
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t j = rng.index(nc);
      for (int d = 0; d < 3; ++d) probe[i * 3 + d] = cloud_xyz[j * 3 + d];
    }
    kernels::nn3(x.val().data(), batch, probe.data(), batch, idx.data(), d2.data());
    for (std::size_t i = 0; i < batch; ++i) sel[i * batch + (std::size_t)idx[i]] = 1.0;
    Tensor picked = ad::matmul(Tensor::from({batch, batch}, std::move(sel)), x);
    Tensor cover = ad::mean(
        ad::sum_axis(ad::square(ad::sub(picked, Tensor::from({batch, 3}, std::move(probe)))), 1));
    Tensor loss = ad::add(pull, cover);
    ad::tape().backward(loss);
    opt.step(tensors, ad::poly_lr(lr, step, steps, 1.0));
  }
}

std::vector<std::pair<std::string, Tensor>> NeuralSurface::params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < w_.size(); ++i) {
    out.emplace_back("surf_w" + std::to_string(i), w_[i]);
    out.emplace_back("surf_b" + std::to_string(i), b_[i]);
  }
  return out;
}

EigenfunctionSet::EigenfunctionSet(std::size_t k, std::size_t width, Rng& rng) : k_(k) {
  w_ = {xavier(3, width, rng), xavier(width, width, rng), xavier(width, k, rng)};
  b_ = {Tensor::zeros({1, width}, true), Tensor::zeros({1, width}, true),
        Tensor::zeros({1, k}, true)};
}

Tensor EigenfunctionSet::embed(const Tensor& x) const {
  Tensor h = ad::softplus(ad::add(ad::matmul(x, w_[0]), b_[0]));
  h = ad::softplus(ad::add(ad::matmul(h, w_[1]), b_[1]));
  return ad::add(ad::matmul(h, w_[2]), b_[2]);
}

void EigenfunctionSet::psi_and_grads(const Tensor& x, Tensor& psi, Tensor grad[3]) const {
  std::size_t n = x.shape()[0];
  Tensor h = x;
  Tensor d[3];
  for (int c = 0; c < 3; ++c) d[c] = ad::broadcast(ad::slice(w_[0], 0, c, 1), {n, (std::size_t)w_[0].shape()[1]});
  Tensor z0 = ad::add(ad::matmul(x, w_[0]), b_[0]);
  Tensor s0 = ad::sigmoid(z0);
  for (int c = 0; c < 3; ++c) d[c] = ad::mul(s0, d[c]);
  h = ad::softplus(z0);
  Tensor z1 = ad::add(ad::matmul(h, w_[1]), b_[1]);
  Tensor s1 = ad::sigmoid(z1);
  for (int c = 0; c < 3; ++c) d[c] = ad::mul(s1, ad::matmul(d[c], w_[1]));
  h = ad::softplus(z1);
  psi = ad::add(ad::matmul(h, w_[2]), b_[2]);
  for (int c = 0; c < 3; ++c) grad[c] = ad::matmul(d[c], w_[2]);
}

void EigenfunctionSet::orthonormalize(const SampleBatch& batch) {
  ad::NoGradGuard ng;
  Tensor psi = embed(batch.x);
  std::size_t m = batch.x.shape()[0];
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(k_, k_);
  for (std::size_t j = 0; j < m; ++j) {
    double w = batch.dA.val()[j];
    for (std::size_t a = 0; a < k_; ++a)
      for (std::size_t b = 0; b < k_; ++b)
        gram(a, b) += psi.val()[j * k_ + a] * psi.val()[j * k_ + b] * w;
  }
  gram += 1e-12 * Eigen::MatrixXd::Identity(k_, k_);
  Eigen::MatrixXd L = gram.llt().matrixL();
  Eigen::MatrixXd T =
      L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(k_, k_)).transpose();
  std::size_t width = w_[2].shape()[0];
  auto mix_rows = [&](std::span<double> vals, std::size_t nrows) {
    std::vector<double> row(k_);
    for (std::size_t r = 0; r < nrows; ++r) {
      for (std::size_t c = 0; c < k_; ++c) {
        row[c] = 0;
        for (std::size_t a = 0; a < k_; ++a) row[c] += vals[r * k_ + a] * T(a, c);
      }
      std::copy(row.begin(), row.end(), vals.begin() + r * k_);
    }
  };
  mix_rows(w_[2].val_mut(), width);
  mix_rows(b_[2].val_mut(), 1);
}

void EigenfunctionSet::permute(const std::vector<std::size_t>& order) {
  if (order.size() != k_) throw std::invalid_argument("permute: order size mismatch");
  std::size_t width = w_[2].shape()[0];
  auto reorder_rows = [&](std::span<double> vals, std::size_t nrows) {
    std::vector<double> row(k_);
    for (std::size_t r = 0; r < nrows; ++r) {
      for (std::size_t c = 0; c < k_; ++c) row[c] = vals[r * k_ + order[c]];
      std::copy(row.begin(), row.end(), vals.begin() + r * k_);
    }
  };
  reorder_rows(w_[2].val_mut(), width);
  reorder_rows(b_[2].val_mut(), 1);
}

std::vector<std::pair<std::string, Tensor>> EigenfunctionSet::params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < w_.size(); ++i) {
    out.emplace_back("eig_w" + std::to_string(i), w_[i]);
    out.emplace_back("eig_b" + std::to_string(i), b_[i]);
  }
  return out;
}

SpectralTerms spectral_terms(const SampleBatch& batch, const EigenfunctionSet& eigs,
                             const SpectralConfig& cfg) {
  std::size_t m = batch.x.shape()[0], k = eigs.k();
  Tensor psi, g[3];
  eigs.psi_and_grads(batch.x, psi, g);
  Tensor nd[3];
  for (int c = 0; c < 3; ++c) nd[c] = ad::broadcast(col(batch.n, c), {m, k});
  Tensor gdotn = ad::add(ad::add(ad::mul(g[0], nd[0]), ad::mul(g[1], nd[1])),
                         ad::mul(g[2], nd[2]));
  Tensor ss;
  for (int c = 0; c < 3; ++c) {
    Tensor pg = ad::square(ad::sub(g[c], ad::mul(gdotn, nd[c])));
    ss = c == 0 ? pg : ad::add(ss, pg);
  }
  Tensor dAb = ad::broadcast(batch.dA, {m, k});
  Tensor num = ad::sum_axis(ad::mul(ss, dAb), 0);
  Tensor den = ad::sum_axis(ad::mul(ad::square(psi), dAb), 0);
  for (std::size_t i = 0; i < k; ++i)
    if (den.val()[i] <= 0)
      throw std::runtime_error("spectral_terms: zero-norm eigenfunction");
  SpectralTerms t;
  t.quotients = ad::div(num, den);
  t.norm_term = ad::sum(ad::square(ad::add_const(den, -1.0)));
  if (cfg.deflation) {
    Tensor gram = ad::matmul(ad::transpose(ad::detach(psi)), ad::mul(psi, dAb));
    std::vector<double> upper(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) upper[i * k + j] = 2.0;
    t.ortho_term = ad::sum(ad::mul(ad::square(gram), Tensor::from({k, k}, std::move(upper))));
  } else {
    Tensor gram = ad::matmul(ad::transpose(psi), ad::mul(psi, dAb));
    std::vector<double> eye(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
    Tensor mask = Tensor::from({k, k}, std::move(eye));
    Tensor g2 = ad::square(gram);
    t.ortho_term = ad::sub(ad::sum(g2), ad::sum(ad::mul(g2, mask)));
  }
  t.total = ad::add(ad::add(ad::sum(t.quotients), ad::scale(t.norm_term, cfg.lambda_n)),
                    ad::scale(t.ortho_term, cfg.lambda_o));
  return t;
}

Tensor spectral_loss(const NeuralSurface& surface, const EigenfunctionSet& eigs,
                     const SpectralConfig& cfg, std::uint64_t seed) {
  return spectral_terms(surface.sample_batch(cfg.monte_carlo, seed), eigs, cfg).total;
}

std::vector<double> constancy(const SampleBatch& batch, const EigenfunctionSet& eigs) {
  ad::NoGradGuard ng;
  Tensor psi = eigs.embed(batch.x);
  std::size_t m = batch.x.shape()[0], k = eigs.k();
  std::vector<double> out(k);
  double sw = 0;
  for (std::size_t j = 0; j < m; ++j) sw += batch.dA.val()[j];
  for (std::size_t i = 0; i < k; ++i) {
    double s1 = 0, s2 = 0;
    for (std::size_t j = 0; j < m; ++j) {
      double v = psi.val()[j * k + i], w = batch.dA.val()[j];
      s1 += v * w;
      s2 += v * v * w;
    }
    out[i] = s2 > 1e-12 ? s1 * s1 / (sw * s2) : 1.0;
  }
  return out;
}

double psi0(double total_area) {
  if (total_area <= 0) throw std::invalid_argument("psi0: nonpositive area");
  return 1.0 / std::sqrt(total_area);
}

void dump_eigenfunctions(const std::string& prefix, const NeuralSurface& surface,
                         const EigenfunctionSet& eigs, std::size_t rows, std::size_t cols) {
  ad::NoGradGuard ng;
  std::size_t n = rows * cols, k = eigs.k();
  std::vector<double> us(n * 3);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double elev = M_PI / 2 - M_PI * ((double)r + 0.5) / (double)rows;
      double az = -M_PI + 2 * M_PI * (double)c / (double)cols;
      double* u = us.data() + (r * cols + c) * 3;
      u[0] = std::cos(elev) * std::cos(az);
      u[1] = std::cos(elev) * std::sin(az);
      u[2] = std::sin(elev);
    }
  Tensor psi = eigs.embed(surface.map(Tensor::from({n, 3}, std::move(us))));
  nlohmann::json meta;
  for (std::size_t i = 0; i < k; ++i) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      lo = std::min(lo, psi.val()[j * k + i]);
      hi = std::max(hi, psi.val()[j * k + i]);
    }
    double span = hi > lo ? hi - lo : 1.0;
    std::vector<double> img(n);
    for (std::size_t j = 0; j < n; ++j) img[j] = (psi.val()[j * k + i] - lo) / span;
    lidar::write_pgm16(prefix + "_psi" + std::to_string(i + 1) + ".pgm", img, rows, cols,
                       65535.0);
    meta["psi" + std::to_string(i + 1)] = {{"min", lo}, {"max", hi}};
  }
  std::ofstream out(prefix + "_psi_meta.json");
  out << meta.dump(2) << "\n";
}

}  // namespace nlf::spectral

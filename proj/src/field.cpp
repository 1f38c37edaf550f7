#include "nlf/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace nlf::field {

std::size_t HashGridConfig::resolution(std::size_t level) const {
  if (levels <= 1) return base_resolution;
  double g = growth_factor();
  return (std::size_t)std::lround((double)base_resolution * std::pow(g, (double)level));
}

double HashGridConfig::growth_factor() const {
  if (levels <= 1) return 1.0;
  return std::pow((double)finest_resolution / (double)base_resolution,
                  1.0 / (double)(levels - 1));
}

namespace {

struct LevelMeta {
  std::size_t res, tsize;
  bool dense;
};

LevelMeta level_meta(const HashGridConfig& cfg, std::size_t level) {
  std::size_t res = cfg.resolution(level);
  std::size_t cap = (std::size_t)1 << cfg.table_size_log2;
  std::size_t verts = (res + 1) * (res + 1) * (res + 1);
  bool dense = verts <= cap;
  return {res, dense ? verts : cap, dense};
}

inline std::size_t vertex_index(const LevelMeta& m, std::size_t ix, std::size_t iy,
                                std::size_t iz) {
  if (m.dense) return (ix * (m.res + 1) + iy) * (m.res + 1) + iz;
  std::uint64_t h = (std::uint64_t)ix ^ ((std::uint64_t)iy * 2654435761ull) ^
                    ((std::uint64_t)iz * 805459861ull);
  return (std::size_t)(h & (std::uint64_t)(m.tsize - 1));
}

// Cell coordinates and interpolation weights for one point at one level.
struct CellRef {
  std::size_t i0[3];
  double f[3];
  bool inside[3];  // clamped dims get zero positional gradient
};

inline CellRef locate(const double* p, std::size_t res) {
  CellRef c;
  for (int d = 0; d < 3; ++d) {
    double v = p[d];
    c.inside[d] = v >= 0.0 && v <= 1.0;
    v = std::clamp(v, 0.0, 1.0) * (double)res;
    double fl = std::floor(v);
    if (fl > (double)res - 1) fl = (double)res - 1;
    if (fl < 0) fl = 0;
    c.i0[d] = (std::size_t)fl;
    c.f[d] = v - fl;
  }
  return c;
}

}  // namespace

Tensor hash_encode(const Tensor& pts, const std::vector<Tensor>& tables,
                   const HashGridConfig& cfg) {
  if (pts.shape().size() != 2 || pts.shape()[1] != 3)
    throw std::invalid_argument("hash_encode: points must be [n,3]");
  if (tables.size() != cfg.levels)
    throw std::invalid_argument("hash_encode: expected " + std::to_string(cfg.levels) +
                                " tables, got " + std::to_string(tables.size()));
  std::size_t n = pts.shape()[0], F = cfg.feats_per_level, D = cfg.out_dim();
  std::vector<LevelMeta> metas(cfg.levels);
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    metas[l] = level_meta(cfg, l);
    if (tables[l].shape() != ad::Shape{metas[l].tsize, F})
      throw std::invalid_argument("hash_encode: table " + std::to_string(l) +
                                  " has wrong shape");
  }
  std::vector<Tensor> inputs{pts};
  inputs.insert(inputs.end(), tables.begin(), tables.end());
  bool rg = ad::grad_wanted(inputs);
  Tensor out = ad::op_output({n, D}, rg);
  auto pv = pts.val();
  auto ov = out.val_mut();
#pragma omp parallel for schedule(static)
  for (std::int64_t pi = 0; pi < (std::int64_t)n; ++pi) {
    const double* p = pv.data() + pi * 3;
    double* o = ov.data() + pi * D;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
      const LevelMeta& m = metas[l];
      CellRef c = locate(p, m.res);
      auto tv = tables[l].val();
      double acc0 = 0, acc1 = 0;
      for (int corner = 0; corner < 8; ++corner) {
        int dx = corner & 1, dy = (corner >> 1) & 1, dz = corner >> 2;
        double w = (dx ? c.f[0] : 1 - c.f[0]) * (dy ? c.f[1] : 1 - c.f[1]) *
                   (dz ? c.f[2] : 1 - c.f[2]);
        std::size_t idx = vertex_index(m, c.i0[0] + dx, c.i0[1] + dy, c.i0[2] + dz);
        acc0 += w * tv[idx * F];
        if (F > 1) acc1 += w * tv[idx * F + 1];
      }
      o[l * F] = acc0;
      if (F > 1) o[l * F + 1] = acc1;
    }
  }
  if (rg) {
    ad::tape().push({inputs, out, [pts, tables, out, cfg, metas, n, F, D]() {
      auto g = out.grad();
      auto pv2 = pts.val();
#pragma omp parallel for schedule(static)
      for (std::int64_t l = 0; l < (std::int64_t)cfg.levels; ++l) {
        if (!tables[l].requires_grad()) continue;
        auto gt = tables[l].grad_mut();
        const LevelMeta& m = metas[l];
        for (std::size_t pi = 0; pi < n; ++pi) {
          CellRef c = locate(pv2.data() + pi * 3, m.res);
          for (int corner = 0; corner < 8; ++corner) {
            int dx = corner & 1, dy = (corner >> 1) & 1, dz = corner >> 2;
            double w = (dx ? c.f[0] : 1 - c.f[0]) * (dy ? c.f[1] : 1 - c.f[1]) *
                       (dz ? c.f[2] : 1 - c.f[2]);
            std::size_t idx = vertex_index(m, c.i0[0] + dx, c.i0[1] + dy, c.i0[2] + dz);
            gt[idx * F] += w * g[pi * D + l * F];
            if (F > 1) gt[idx * F + 1] += w * g[pi * D + l * F + 1];
          }
        }
      }
      if (pts.requires_grad()) {
        auto gp = pts.grad_mut();
#pragma omp parallel for schedule(static)
        for (std::int64_t pi = 0; pi < (std::int64_t)n; ++pi) {
          double acc[3] = {0, 0, 0};
          for (std::size_t l = 0; l < cfg.levels; ++l) {
            const LevelMeta& m = metas[l];
            CellRef c = locate(pv2.data() + pi * 3, m.res);
            auto tv = tables[l].val();
            for (int corner = 0; corner < 8; ++corner) {
              int dd[3] = {corner & 1, (corner >> 1) & 1, corner >> 2};
              double wc[3];
              for (int d = 0; d < 3; ++d) wc[d] = dd[d] ? c.f[d] : 1 - c.f[d];
              std::size_t idx =
                  vertex_index(m, c.i0[0] + dd[0], c.i0[1] + dd[1], c.i0[2] + dd[2]);
              double gdot = g[pi * D + l * F] * tv[idx * F];
              if (F > 1) gdot += g[pi * D + l * F + 1] * tv[idx * F + 1];
              for (int d = 0; d < 3; ++d) {
                if (!c.inside[d]) continue;
                double dw = (dd[d] ? 1.0 : -1.0) * wc[(d + 1) % 3] * wc[(d + 2) % 3];
                acc[d] += gdot * dw * (double)m.res;
              }
            }
          }
          for (int d = 0; d < 3; ++d) gp[pi * 3 + d] += acc[d];
        }
      }
    }});
  }
  return out;
}

Tensor view_encode(const Tensor& dirs, std::size_t bands) {
  if (dirs.shape().size() != 2 || dirs.shape()[1] != 3)
    throw std::invalid_argument("view_encode: directions must be [n,3]");
  Tensor out;
  for (std::size_t k = 0; k < bands; ++k) {
    Tensor s = ad::sin(ad::scale(dirs, (double)(1u << k)));
    Tensor c = ad::cos(ad::scale(dirs, (double)(1u << k)));
    Tensor band = ad::concat(s, c, 1);
    out = k == 0 ? band : ad::concat(out, band, 1);
  }
  return out;
}

namespace {

Tensor xavier(std::size_t fin, std::size_t fout, Rng& rng) {
  double s = std::sqrt(6.0 / (double)(fin + fout));
  std::vector<double> w(fin * fout);
  for (auto& v : w) v = rng.uniform(-s, s);
  return Tensor::from({fin, fout}, std::move(w), true);
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  return ad::add(ad::matmul(x, W), b);
}

}  // namespace

Field::Field(const FieldConfig& cfg, Rng& rng) : cfg_(cfg) {
  for (std::size_t l = 0; l < cfg.grid.levels; ++l) {
    LevelMeta m = level_meta(cfg.grid, l);
    std::vector<double> t(m.tsize * cfg.grid.feats_per_level);
    for (auto& v : t) v = rng.uniform(-1e-4, 1e-4);
    tables_.push_back(Tensor::from({m.tsize, cfg.grid.feats_per_level}, std::move(t), true));
  }
  std::size_t hyb = cfg.grid.out_dim() + cfg.spectral_dim;
  std::size_t tw = cfg.trunk_width, id = cfg.intrinsic_dim;
  trunk_w_ = {xavier(hyb, tw, rng), xavier(tw, id + 1, rng)};
  trunk_b_ = {Tensor::zeros({1, tw}, true), Tensor::zeros({1, id + 1}, true)};
  // start the field near-transparent: bias the raw density channel low
  trunk_b_[1].val_mut()[id] = -3.0;
  std::size_t hin = id + 6 * cfg.view_bands, hw = cfg.head_width;
  int_w_ = {xavier(hin, hw, rng), xavier(hw, hw, rng), xavier(hw, 1, rng)};
  int_b_ = {Tensor::zeros({1, hw}, true), Tensor::zeros({1, hw}, true),
            Tensor::zeros({1, 1}, true)};
  drop_w_ = {xavier(hin, hw, rng), xavier(hw, hw, rng), xavier(hw, 1, rng)};
  drop_b_ = {Tensor::zeros({1, hw}, true), Tensor::zeros({1, hw}, true),
             Tensor::zeros({1, 1}, true)};
}

Tensor Field::hybrid_query(const Tensor& pts, const SpectralFn& spectral,
                           double fusion_weight) const {
  Tensor geo = hash_encode(pts, tables_, cfg_.grid);
  std::size_t n = pts.shape()[0];
  Tensor spe;
  if (fusion_weight > 0.0 && spectral) {
    spe = ad::scale(spectral(pts), fusion_weight);
    if (spe.shape() != ad::Shape{n, cfg_.spectral_dim})
      throw std::invalid_argument("hybrid_query: spectral features have wrong shape");
  } else {
    spe = Tensor::zeros({n, cfg_.spectral_dim});
  }
  return ad::concat(geo, spe, 1);
}

std::pair<Tensor, Tensor> Field::trunk(const Tensor& fhyb) const {
  Tensor h = ad::relu(linear(fhyb, trunk_w_[0], trunk_b_[0]));
  Tensor o = linear(h, trunk_w_[1], trunk_b_[1]);
  Tensor feat = ad::slice(o, 1, 0, cfg_.intrinsic_dim);
  Tensor sigma = ad::softplus(ad::slice(o, 1, cfg_.intrinsic_dim, 1));
  return {feat, sigma};
}

Tensor Field::intensity_head(const Tensor& fv) const {
  Tensor h = ad::relu(linear(fv, int_w_[0], int_b_[0]));
  h = ad::relu(linear(h, int_w_[1], int_b_[1]));
  return ad::sigmoid(linear(h, int_w_[2], int_b_[2]));
}

Tensor Field::raydrop_head(const Tensor& fv) const {
  Tensor h = ad::relu(linear(fv, drop_w_[0], drop_b_[0]));
  h = ad::relu(linear(h, drop_w_[1], drop_b_[1]));
  return ad::sigmoid(linear(h, drop_w_[2], drop_b_[2]));
}

RenderOut Field::render_rays(const Tensor& pose, const Tensor& dirs,
                             const RayMarchConfig& rm, const SpectralFn& spectral,
                             double fusion_weight) const {
  if (pose.shape() != ad::Shape{3, 4})
    throw std::invalid_argument("render_rays: pose must be [3,4]");
  if (dirs.shape().size() != 2 || dirs.shape()[1] != 3)
    throw std::invalid_argument("render_rays: dirs must be [n,3]");
  if (rm.samples_per_ray < 2) throw std::invalid_argument("render_rays: need >= 2 samples");
  std::size_t B = dirs.shape()[0], S = rm.samples_per_ray, BS = B * S;

  std::vector<double> zs(BS);
  double dz;
  if (rm.stratified) {
    dz = (rm.far - rm.near) / (double)S;
    Rng jr(rm.jitter_seed);
    for (std::size_t i = 0; i < BS; ++i)
      zs[i] = rm.near + ((double)(i % S) + jr.uniform()) * dz;
  } else {
    dz = (rm.far - rm.near) / (double)(S - 1);
    for (std::size_t i = 0; i < BS; ++i) zs[i] = rm.near + (double)(i % S) * dz;
  }
  Tensor zcol = Tensor::from({BS, 1}, zs);
  Tensor zmat = ad::reshape(zcol, {B, S});
  Tensor delta = Tensor::full({B, 1}, dz);

  Tensor R = ad::slice(pose, 1, 0, 3);
  Tensor t_row = ad::transpose(ad::slice(pose, 1, 3, 1));
  Tensor dirs_w = ad::matmul(dirs, ad::transpose(R));
  Tensor pts = ad::add(ad::broadcast(t_row, {BS, 3}),
                       ad::mul(ad::repeat_rows(dirs_w, S), ad::broadcast(zcol, {BS, 3})));

  Tensor fhyb = hybrid_query(pts, spectral, fusion_weight);
  auto [feat, sigma] = trunk(fhyb);
  Tensor w = ad::volume_weights(ad::reshape(sigma, {B, S}), delta);

  Tensor fv = ad::concat(feat, ad::repeat_rows(view_encode(dirs_w, cfg_.view_bands), S), 1);
  Tensor isamp = ad::reshape(intensity_head(fv), {B, S});
  Tensor dsamp = ad::reshape(raydrop_head(fv), {B, S});

  RenderOut out;
  out.depth = ad::sum_axis(ad::mul(w, zmat), 1);
  out.intensity = ad::sum_axis(ad::mul(w, isamp), 1);
  out.drop = ad::sum_axis(ad::mul(w, dsamp), 1);
  out.opacity = ad::sum_axis(w, 1);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Field::params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < tables_.size(); ++l)
    out.emplace_back("table" + std::to_string(l), tables_[l]);
  for (std::size_t i = 0; i < trunk_w_.size(); ++i) {
    out.emplace_back("trunk_w" + std::to_string(i), trunk_w_[i]);
    out.emplace_back("trunk_b" + std::to_string(i), trunk_b_[i]);
  }
  for (std::size_t i = 0; i < int_w_.size(); ++i) {
    out.emplace_back("int_w" + std::to_string(i), int_w_[i]);
    out.emplace_back("int_b" + std::to_string(i), int_b_[i]);
  }
  for (std::size_t i = 0; i < drop_w_.size(); ++i) {
    out.emplace_back("drop_w" + std::to_string(i), drop_w_[i]);
    out.emplace_back("drop_b" + std::to_string(i), drop_b_[i]);
  }
  return out;
}

Tensor range_loss(const RenderOut& pred, const Tensor& gt_depth, const Tensor& gt_intensity,
                  const Tensor& gt_drop, const LossWeights& w) {
  const ad::Shape& s = gt_depth.shape();
  if (pred.depth.shape() != s || gt_intensity.shape() != s || gt_drop.shape() != s ||
      pred.intensity.shape() != s || pred.drop.shape() != s)
    throw std::invalid_argument("range_loss: mismatched shapes");
  std::size_t n = gt_drop.size();
  std::vector<double> keep(n);
  double cnt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    keep[i] = 1.0 - gt_drop.val()[i];
    cnt += keep[i];
  }
  Tensor mask = Tensor::from(s, std::move(keep));
  double inv = 1.0 / std::max(1.0, cnt);
  Tensor ld = ad::scale(ad::sum(ad::mul(ad::abs(ad::sub(pred.depth, gt_depth)), mask)), inv);
  Tensor li = ad::scale(
      ad::sum(ad::mul(ad::square(ad::sub(pred.intensity, gt_intensity)), mask)), inv);
  Tensor lp = ad::mean(ad::square(ad::sub(pred.drop, gt_drop)));
  return ad::add(ad::add(ad::scale(ld, w.depth), ad::scale(li, w.intensity)),
                 ad::scale(lp, w.raydrop));
}

RenderedView render_view(const Field& f, const se3::RigidTransform& pose,
                         const lidar::SensorModel& sensor, const RayMarchConfig& rm,
                         const SpectralFn& spectral, double fusion_weight) {
  ad::NoGradGuard ng;
  std::size_t H = sensor.beams, W = sensor.width, total = H * W;
  RenderedView view;
  view.img.height = H;
  view.img.width = W;
  view.img.depth.assign(total, 0.0);
  view.img.intensity.assign(total, 0.0);
  view.img.drop.assign(total, 1);
  view.raw_depth.assign(total, 0.0);
  view.drop_prob.assign(total, 0.0);
  view.opacity.assign(total, 0.0);

  std::vector<double> pm(12);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) pm[i * 4 + j] = pose.R[i * 3 + j];
    pm[i * 4 + 3] = pose.t[i];
  }
  Tensor pose_t = Tensor::from({3, 4}, pm);

  const std::size_t chunk = 4096;
  for (std::size_t base = 0; base < total; base += chunk) {
    std::size_t nb = std::min(chunk, total - base);
    std::vector<double> dd(nb * 3);
    for (std::size_t i = 0; i < nb; ++i) {
      std::size_t px = base + i;
      auto d = sensor.dir(px / W, px % W);
      dd[i * 3] = d[0];
      dd[i * 3 + 1] = d[1];
      dd[i * 3 + 2] = d[2];
    }
    auto out = f.render_rays(pose_t, Tensor::from({nb, 3}, std::move(dd)), rm, spectral,
                             fusion_weight);
    for (std::size_t i = 0; i < nb; ++i) {
      std::size_t px = base + i;
      view.raw_depth[px] = out.depth.val()[i];
      view.drop_prob[px] = out.drop.val()[i];
      view.opacity[px] = out.opacity.val()[i];
      if (out.drop.val()[i] <= 0.5) {
        view.img.drop[px] = 0;
        view.img.depth[px] = out.depth.val()[i];
        view.img.intensity[px] = out.intensity.val()[i];
      }
    }
  }
  return view;
}

void dump_view(const std::string& prefix, const RenderedView& view,
               const lidar::SensorModel& sensor, const se3::RigidTransform& pose,
               const RayMarchConfig& rm) {
  lidar::write_depth_pgm(prefix + "_depth.pgm", view.img, sensor);
  lidar::write_intensity_pgm(prefix + "_intensity.pgm", view.img);
  lidar::write_pgm16(prefix + "_drop.pgm", view.drop_prob, view.img.height,
                     view.img.width, 65535.0);
  nlohmann::json meta;
  meta["height"] = view.img.height;
  meta["width"] = view.img.width;
  meta["samples_per_ray"] = rm.samples_per_ray;
  meta["near"] = rm.near;
  meta["far"] = rm.far;
  std::vector<double> pm(12);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) pm[i * 4 + j] = pose.R[i * 3 + j];
    pm[i * 4 + 3] = pose.t[i];
  }
  meta["pose"] = pm;
  std::ofstream out(prefix + "_meta.json");
  out << meta.dump(2) << "\n";
}

}  // namespace nlf::field

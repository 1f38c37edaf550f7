#include "nlf/adversarial.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace nlf::adv {

namespace {

std::string shape_str(const ad::Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

Tensor stack_channels(const Tensor& cross, const std::vector<double>& target,
                      const lidar::SensorModel& sensor) {
  std::size_t h = sensor.beams, w = sensor.width;
  if (target.size() != h * w)
    throw std::invalid_argument("depth channel size " + std::to_string(target.size()) +
                                " does not match sensor " + std::to_string(h) + "x" +
                                std::to_string(w));
  Tensor c0 = ad::reshape(cross, {1, h * w});
  Tensor c1 = Tensor::from({1, h * w}, std::vector<double>(target));
  return ad::reshape(ad::concat(c0, c1, 0), {2, h, w});
}

Tensor sensor_dirs(const lidar::SensorModel& sensor) {
  std::vector<double> d(sensor.beams * sensor.width * 3);
  for (std::size_t r = 0; r < sensor.beams; ++r)
    for (std::size_t c = 0; c < sensor.width; ++c) {
      auto v = sensor.dir(r, c);
      double* p = d.data() + (r * sensor.width + c) * 3;
      p[0] = v[0];
      p[1] = v[1];
      p[2] = v[2];
    }
  return Tensor::from({sensor.beams * sensor.width, 3}, std::move(d));
}

}  // namespace

Tensor splat_depth(const Tensor& pts, const lidar::SensorModel& sensor) {
  if (pts.shape().size() != 2 || pts.shape()[1] != 3)
    throw std::invalid_argument("splat_depth: need [n,3] points, got " +
                                shape_str(pts.shape()));
  std::size_t n = pts.shape()[0];
  std::size_t hw = sensor.beams * sensor.width;
  auto pv = pts.val();
  std::vector<std::size_t> win(hw, n);
  std::vector<double> best(hw, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = pv.data() + i * 3;
    if (p[0] == 0.0 && p[1] == 0.0 && p[2] == 0.0)
      throw std::invalid_argument("splat_depth: point at the sensor origin");
    std::size_t r, c;
    double d;
    if (!sensor.bin(p, r, c, d)) continue;
    std::size_t px = r * sensor.width + c;
    if (win[px] == n || d < best[px]) {
      win[px] = i;
      best[px] = d;
    }
  }
  Tensor ranges = ad::sqrt(ad::sum_axis(ad::square(pts), 1));
  Tensor ext = ad::concat(ranges, Tensor::from({1, 1}, {0.0}), 0);
  return ad::reshape(ad::gather_rows(ext, win), {1, sensor.beams, sensor.width});
}

Tensor relative_points(const Tensor& xi_i, const Tensor& xi_j, const Tensor& pts) {
  Tensor Ti = se3::exp_map(xi_i), Tj = se3::exp_map(xi_j);
  Tensor Ri = ad::slice(Ti, 1, 0, 3), ti = ad::slice(Ti, 1, 3, 1);
  Tensor Rj = ad::slice(Tj, 1, 0, 3), tj = ad::slice(Tj, 1, 3, 1);
  Tensor RjT = ad::transpose(Rj);
  Tensor Rrel = ad::matmul(RjT, Ri);
  Tensor trel = ad::matmul(RjT, ad::sub(ti, tj));
  return ad::add(ad::matmul(pts, ad::transpose(Rrel)), ad::transpose(trel));
}

DepthPair make_real(const lidar::PointCloud& cloud_i, const se3::RigidTransform& pose_i,
                    const se3::RigidTransform& pose_j, const std::vector<double>& depth_j,
                    const lidar::SensorModel& sensor) {
  se3::RigidTransform rel = pose_j.inverse().compose(pose_i);
  std::size_t n = cloud_i.size();
  std::vector<double> moved(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    se3::Vec3 p{cloud_i.xyz[i * 3], cloud_i.xyz[i * 3 + 1], cloud_i.xyz[i * 3 + 2]};
    auto q = rel.apply(p);
    moved[i * 3] = q[0];
    moved[i * 3 + 1] = q[1];
    moved[i * 3 + 2] = q[2];
  }
  Tensor cross = splat_depth(Tensor::from({n, 3}, std::move(moved)), sensor);
  return {stack_channels(cross, depth_j, sensor), true};
}

DepthPair make_fake(const Tensor& depth_i, const Tensor& xi_i, const Tensor& xi_j,
                    const std::vector<double>& depth_j, const lidar::SensorModel& sensor) {
  std::size_t hw = sensor.beams * sensor.width;
  if (depth_i.shape() != ad::Shape{hw, 1})
    throw std::invalid_argument("make_fake: rendered depth must be [" + std::to_string(hw) +
                                ",1], got " + shape_str(depth_i.shape()));
  Tensor pts_i = ad::mul(ad::broadcast(depth_i, {hw, 3}), sensor_dirs(sensor));
  Tensor cross = splat_depth(relative_points(xi_i, xi_j, pts_i), sensor);
  return {stack_channels(cross, depth_j, sensor), false};
}

std::pair<DepthPair, DepthPair> make_pairs(
    std::size_t i, std::size_t j, const std::vector<lidar::PointCloud>& clouds,
    const std::vector<Tensor>& xis_est, const std::vector<se3::RigidTransform>& poses_gt,
    const field::Field& f, const lidar::SensorModel& sensor,
    const field::RayMarchConfig& rm, const field::SpectralFn& spectral,
    double fusion_weight) {
  if (i + 1 != j && j + 1 != i)
    throw std::invalid_argument("make_pairs: frames " + std::to_string(i) + " and " +
                                std::to_string(j) + " are not adjacent");
  if (i >= clouds.size() || j >= clouds.size() || clouds.size() != xis_est.size() ||
      clouds.size() != poses_gt.size())
    throw std::invalid_argument("make_pairs: frame index out of range");
  lidar::RangeImage dj = lidar::project(clouds[j], sensor);
  DepthPair real = make_real(clouds[i], poses_gt[i], poses_gt[j], dj.depth, sensor);
  field::RenderOut ro =
      f.render_rays(se3::exp_map(xis_est[i]), sensor_dirs(sensor), rm, spectral, fusion_weight);
  DepthPair fake = make_fake(ro.depth, xis_est[i], xis_est[j], dj.depth, sensor);
  return {real, fake};
}

Discriminator::Discriminator(Rng& rng) {
  std::size_t chans[5] = {2, 64, 128, 256, 1};
  for (int l = 0; l < 4; ++l) {
    std::size_t cin = chans[l], cout = chans[l + 1];
    std::vector<double> wv(cout * cin * 16);
    for (auto& x : wv) x = rng.normal(0.0, 0.02);
    w.push_back(Tensor::from({cout, cin, 4, 4}, std::move(wv), true));
    b.push_back(Tensor::from({cout}, std::vector<double>(cout, 0.0), true));
  }
}

Tensor Discriminator::forward(const Tensor& chans) const {
  if (chans.shape().size() != 3 || chans.shape()[0] != 2)
    throw std::invalid_argument("discriminator: need [2,H,W] input, got " +
                                shape_str(chans.shape()));
  std::size_t h = chans.shape()[1], wd = chans.shape()[2];
  if (h < 16 || wd < 16 || h % 16 || wd % 16)
    throw std::invalid_argument("discriminator: spatial dims must be multiples of 16, got " +
                                shape_str(chans.shape()));
  Tensor x = chans;
  for (int l = 0; l < 4; ++l) {
    x = ad::conv4s2(x, w[l], b[l]);
    if (l < 3) x = ad::leaky_relu(x, 0.2);
  }
  return x;
}

std::vector<Tensor> Discriminator::params() const {
  std::vector<Tensor> out;
  for (auto& t : w) out.push_back(t);
  for (auto& t : b) out.push_back(t);
  return out;
}

Tensor disc_loss(const Tensor& score_real, const Tensor& score_fake) {
  Tensor real_term = ad::mean(ad::relu(ad::add_const(ad::neg(score_real), 1.0)));
  Tensor fake_term = ad::mean(ad::relu(ad::add_const(score_fake, 1.0)));
  return ad::add(real_term, fake_term);
}

Tensor gen_loss(const Tensor& score_fake) { return ad::neg(ad::mean(score_fake)); }

Tensor disc_loss_multiscale(const Discriminator& d, const DepthPair& real,
                            const DepthPair& fake) {
  Tensor r = ad::detach(real.chans), f = ad::detach(fake.chans);
  Tensor full = disc_loss(d.forward(r), d.forward(f));
  Tensor half = disc_loss(d.forward(ad::avg_pool2(r)), d.forward(ad::avg_pool2(f)));
  return ad::scale(ad::add(full, half), 0.5);
}

Tensor gen_loss_multiscale(const Discriminator& d, const DepthPair& fake) {
  Tensor full = gen_loss(d.forward(fake.chans));
  Tensor half = gen_loss(d.forward(ad::avg_pool2(fake.chans)));
  return ad::scale(ad::add(full, half), 0.5);
}

void dump_pair(const std::string& path, const DepthPair& real, const DepthPair& fake,
               const lidar::SensorModel& sensor) {
  std::size_t h = sensor.beams, w = sensor.width;
  auto rv = real.chans.val();
  auto fv = fake.chans.val();
  if (rv.size() != 2 * h * w || fv.size() != 2 * h * w)
    throw std::invalid_argument("dump_pair: channel size does not match sensor");
  std::vector<double> sheet(h * 4 * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      sheet[r * 4 * w + c] = rv[r * w + c];
      sheet[r * 4 * w + w + c] = rv[h * w + r * w + c];
      sheet[r * 4 * w + 2 * w + c] = fv[r * w + c];
      sheet[r * 4 * w + 3 * w + c] = fv[h * w + r * w + c];
    }
  lidar::write_pgm16(path, sheet, h, 4 * w, 256.0 / sensor.max_range);
}

}  // namespace nlf::adv

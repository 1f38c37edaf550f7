#include "nlf/optim.hpp"

#include <cmath>
#include <cstdio>

namespace nlf::ad {

void Adam::step(const std::vector<Tensor>& params, double lr) {
  ++t_;
  double c1 = 1.0 - std::pow(beta1_, (double)t_);
  double c2 = 1.0 - std::pow(beta2_, (double)t_);
  for (const Tensor& pc : params) {
    Tensor p = pc;
    if (!p.has_grad()) {
      std::fprintf(stderr, "adam: parameter without gradient skipped (size %zu)\n",
                   p.size());
      continue;
    }
    auto& slot = slots_[p.impl()];
    if (slot.m.empty()) {
      slot.m.assign(p.size(), 0.0);
      slot.v.assign(p.size(), 0.0);
    }
    auto g = p.grad();
    auto x = p.val_mut();
    for (std::size_t i = 0; i < x.size(); ++i) {
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g[i];
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g[i] * g[i];
      double mhat = slot.m[i] / c1;
      double vhat = slot.v[i] / c2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    p.zero_grad();
  }
}

void Adam::reset() {
  slots_.clear();
  t_ = 0;
}

double poly_lr(double lr0, std::int64_t t, std::int64_t total, double power) {
  if (total <= 0) return lr0;
  double frac = std::min(1.0, std::max(0.0, (double)t / (double)total));
  return lr0 * std::pow(1.0 - frac, power);
}

}  // namespace nlf::ad

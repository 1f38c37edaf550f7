#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "nlf/tensor.hpp"

namespace nlf::ad {

// Adam with bias correction. Moment buffers are keyed by parameter identity
// and persist across steps; parameters without an accumulated gradient are
// skipped (with a warning on stderr) and leave their moments untouched.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor>& params, double lr);
  void reset();
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::unordered_map<TensorImpl*, Slot> slots_;
};

// lr(t) = lr0 * (1 - t/T)^power, the decay used for every optimizer here.
double poly_lr(double lr0, std::int64_t t, std::int64_t total, double power);

}  // namespace nlf::ad

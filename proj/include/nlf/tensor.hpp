#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Reverse-mode autodiff over dense row-major f64 tensors.
// Ops record nodes on a thread-local tape while any input requires grad;
// Tape::backward replays the nodes in reverse recording order and consumes
// the tape. Parameters are leaf tensors that live across tapes.

namespace nlf::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // empty until the backward sweep reaches it
  bool requires_grad = false;
  bool from_op = false;  // produced by a recorded op (not a leaf/constant)
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->val.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool requires_grad() const { return impl_->requires_grad; }

  // Tensor is a shared handle; mutation goes through the shared buffer, so
  // these are const in the shallow sense.
  std::span<const double> val() const { return impl_->val; }
  // In-place mutation is only legal outside a live tape (optimizer updates).
  std::span<double> val_mut() const { return impl_->val; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> grad_mut() const;  // allocates a zero buffer on first use
  void zero_grad() const { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

  double item() const;

  TensorImpl* impl() const { return impl_.get(); }
  bool same_as(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TapeNode {
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;  // pulls output grad, accumulates into inputs
};

class Tape {
 public:
  bool recording() const { return enabled_; }
  void push(TapeNode node);
  // Reverse sweep from a scalar root. Consumes the tape; a second backward
  // without new recorded nodes throws. A constant root on a fresh tape is a
  // no-op.
  void backward(const Tensor& root);
  void clear();
  std::size_t size() const { return nodes_.size(); }

  friend struct NoGradGuard;

 private:
  std::vector<TapeNode> nodes_;
  bool enabled_ = true;
  bool consumed_ = false;
};

Tape& tape();

// Disables recording for the current thread while alive (fast inference paths).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev_;
};

// ---- elementwise / structural ops ----
// Binary ops accept equal shapes, a scalar second operand (shape {1}), or a
// row vector [1,n] against [m,n]. Anything else is a shape error naming both
// shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);                    // -> {1}
Tensor mean(const Tensor& a);                   // -> {1}
Tensor sum_axis(const Tensor& a, int axis);     // rank 2; axis 0 -> [1,n], axis 1 -> [m,1]
Tensor concat(const Tensor& a, const Tensor& b, int axis);  // rank 2
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len);  // rank 1 or 2
Tensor broadcast(const Tensor& a, const Shape& target);  // {1}->any, [1,n]->[m,n], [m,1]->[m,n]
Tensor reshape(const Tensor& a, const Shape& target);    // same element count
Tensor transpose(const Tensor& a);                       // rank 2
Tensor detach(const Tensor& a);                          // value copy, no grad edge
Tensor repeat_rows(const Tensor& a, std::size_t times);  // [m,n] -> [m*times,n], row i repeated
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);  // backward scatter-adds
Tensor skew3(const Tensor& v);  // [3] -> [3,3] cross-product matrix

// Hooks for ops defined outside this translation unit: grad_wanted tells
// whether recording applies, op_output allocates a properly tagged result.
// Pair with tape().push({inputs, out, backward}).
bool grad_wanted(const std::vector<Tensor>& inputs);
Tensor op_output(Shape shape, bool requires_grad);

// Volume-rendering weights along rows: w[i] = T[i]*(1-exp(-sigma[i]*delta[i])),
// T[i] = exp(-sum_{j<i} sigma[j]*delta[j]). sigma [B,S]; delta [B,1] or [B,S].
Tensor volume_weights(const Tensor& sigma, const Tensor& delta);

// 2D convolution, stride 2, zero padding 1, kernel 4 (the only configuration
// used here): x [Cin,H,W], w [Cout,Cin,4,4], b [Cout] -> [Cout,H/2,W/2].
Tensor conv4s2(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor avg_pool2(const Tensor& x);  // [C,H,W] -> [C,H/2,W/2], 2x2 mean

}  // namespace nlf::ad

#include "nlf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "nlf/kernels.hpp"

namespace nlf::ad {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {
[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}
}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->val.assign(numel(t.impl_->shape), 0.0);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->val.begin(), t.impl_->val.end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " wants " +
                                std::to_string(numel(shape)) + " values, got " +
                                std::to_string(data.size()));
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->val = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

std::size_t Tensor::rows() const {
  return impl_->shape.empty() ? 1 : impl_->shape[0];
}

std::size_t Tensor::cols() const {
  return impl_->shape.size() < 2 ? 1 : impl_->shape[1];
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty())
    throw std::runtime_error("Tensor::grad: no gradient accumulated");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->val.size(), 0.0);
  return impl_->grad;
}

double Tensor::item() const {
  if (size() != 1)
    throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(size()) +
                                " elements");
  return impl_->val[0];
}

Tape& tape() {
  thread_local Tape t;
  return t;
}

void Tape::push(TapeNode node) {
  consumed_ = false;
  nodes_.push_back(std::move(node));
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_str(root.shape()));
  if (nodes_.empty()) {
    if (root.requires_grad() && root.impl()->from_op)
      throw std::runtime_error("backward: tape already consumed; rebuild the forward pass");
    if (root.requires_grad()) root.impl()->grad.assign(1, 1.0);
    return;  // constant or bare-leaf root
  }
  if (!root.requires_grad()) {
    // Root does not depend on any parameter through this tape.
    nodes_.clear();
    consumed_ = true;
    return;
  }
  {
    Tensor r = root;
    auto g = r.grad_mut();
    g[0] += 1.0;
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) {
      it->backward();
      // All consumers of this output ran already (they were recorded later),
      // and its producer is this node, so the buffer is dead now.
      it->output.impl()->grad.clear();
      it->output.impl()->grad.shrink_to_fit();
    }
  }
  nodes_.clear();
  consumed_ = true;
}

NoGradGuard::NoGradGuard() {
  prev_ = tape().recording();
  tape().enabled_ = false;
}

NoGradGuard::~NoGradGuard() { tape().enabled_ = prev_; }

namespace {

bool want_grad(std::initializer_list<Tensor> ins) {
  if (!tape().recording()) return false;
  for (const auto& t : ins)
    if (t.requires_grad()) return true;
  return false;
}

Tensor make_out(Shape shape, bool rg) {
  Tensor t = Tensor::zeros(std::move(shape), rg);
  t.impl()->from_op = rg;
  return t;
}

// Broadcast mode for binary elementwise ops.
enum class BMode { Same, ScalarB, ScalarA, RowB };

BMode bmode(const std::string& op, const Shape& a, const Shape& b, bool allow_scalar_a) {
  if (a == b) return BMode::Same;
  if (numel(b) == 1) return BMode::ScalarB;
  if (allow_scalar_a && numel(a) == 1) return BMode::ScalarA;
  if (a.size() == 2 && b.size() == 2 && b[0] == 1 && b[1] == a[1]) return BMode::RowB;
  shape_error(op, a, b);
}

}  // namespace

bool grad_wanted(const std::vector<Tensor>& inputs) {
  if (!tape().recording()) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

Tensor op_output(Shape shape, bool rg) { return make_out(std::move(shape), rg); }

Tensor add(const Tensor& a, const Tensor& b) {
  BMode m = bmode("add", a.shape(), b.shape(), false);
  bool rg = want_grad({a, b});
  Tensor out = make_out(a.shape(), rg);
  auto av = a.val();
  auto bv = b.val();
  auto ov = out.val_mut();
  std::size_t n = av.size();
  if (m == BMode::Same) {
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  } else if (m == BMode::ScalarB) {
    double c = bv[0];
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + c;
  } else {  // RowB
    std::size_t cols = a.shape()[1];
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i % cols];
  }
  if (rg) {
    tape().push({{a, b}, out, [a, b, out, m]() {
                   auto g = out.grad();
                   std::size_t n = g.size();
                   if (a.requires_grad()) {
                     auto ga = a.grad_mut();
                     for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_mut();
                     if (m == BMode::Same) {
                       for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                     } else if (m == BMode::ScalarB) {
                       double s = 0;
                       for (std::size_t i = 0; i < n; ++i) s += g[i];
                       gb[0] += s;
                     } else {
                       std::size_t cols = gb.size();
                       for (std::size_t i = 0; i < n; ++i) gb[i % cols] += g[i];
                     }
                   }
                 }});
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  BMode m = bmode("sub", a.shape(), b.shape(), true);
  bool rg = want_grad({a, b});
  const Shape& oshape = (m == BMode::ScalarA) ? b.shape() : a.shape();
  Tensor out = make_out(oshape, rg);
  auto av = a.val();
  auto bv = b.val();
  auto ov = out.val_mut();
  std::size_t n = ov.size();
  if (m == BMode::Same) {
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
  } else if (m == BMode::ScalarB) {
    double c = bv[0];
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - c;
  } else if (m == BMode::ScalarA) {
    double c = av[0];
    for (std::size_t i = 0; i < n; ++i) ov[i] = c - bv[i];
  } else {
    std::size_t cols = a.shape()[1];
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i % cols];
  }
  if (rg) {
    tape().push({{a, b}, out, [a, b, out, m]() {
                   auto g = out.grad();
                   std::size_t n = g.size();
                   if (a.requires_grad()) {
                     auto ga = a.grad_mut();
                     if (m == BMode::ScalarA) {
                       double s = 0;
                       for (std::size_t i = 0; i < n; ++i) s += g[i];
                       ga[0] += s;
                     } else {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                     }
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_mut();
                     if (m == BMode::Same || m == BMode::ScalarA) {
                       if (m == BMode::ScalarA) {
                         for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                       } else {
                         for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                       }
                     } else if (m == BMode::ScalarB) {
                       double s = 0;
                       for (std::size_t i = 0; i < n; ++i) s += g[i];
                       gb[0] -= s;
                     } else {
                       std::size_t cols = gb.size();
                       for (std::size_t i = 0; i < n; ++i) gb[i % cols] -= g[i];
                     }
                   }
                 }});
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  BMode m = bmode("mul", a.shape(), b.shape(), false);
  bool rg = want_grad({a, b});
  Tensor out = make_out(a.shape(), rg);
  auto av = a.val();
  auto bv = b.val();
  auto ov = out.val_mut();
  std::size_t n = av.size();
  if (m == BMode::Same) {
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  } else if (m == BMode::ScalarB) {
    double c = bv[0];
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * c;
  } else {
    std::size_t cols = a.shape()[1];
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i % cols];
  }
  if (rg) {
    tape().push({{a, b}, out, [a, b, out, m]() {
                   auto g = out.grad();
                   auto av = a.val();
                   auto bv = b.val();
                   std::size_t n = g.size();
                   if (a.requires_grad()) {
                     auto ga = a.grad_mut();
                     if (m == BMode::Same) {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
                     } else if (m == BMode::ScalarB) {
                       double c = bv[0];
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
                     } else {
                       std::size_t cols = bv.size();
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i % cols];
                     }
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_mut();
                     if (m == BMode::Same) {
                       for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
                     } else if (m == BMode::ScalarB) {
                       double s = 0;
                       for (std::size_t i = 0; i < n; ++i) s += g[i] * av[i];
                       gb[0] += s;
                     } else {
                       std::size_t cols = gb.size();
                       for (std::size_t i = 0; i < n; ++i) gb[i % cols] += g[i] * av[i];
                     }
                   }
                 }});
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  BMode m = bmode("div", a.shape(), b.shape(), true);
  if (m == BMode::RowB) shape_error("div", a.shape(), b.shape());
  bool rg = want_grad({a, b});
  const Shape& oshape = (m == BMode::ScalarA) ? b.shape() : a.shape();
  Tensor out = make_out(oshape, rg);
  auto av = a.val();
  auto bv = b.val();
  auto ov = out.val_mut();
  std::size_t n = ov.size();
  if (m == BMode::Same) {
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] / bv[i];
  } else if (m == BMode::ScalarB) {
    double c = bv[0];
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] / c;
  } else {
    double c = av[0];
    for (std::size_t i = 0; i < n; ++i) ov[i] = c / bv[i];
  }
  if (rg) {
    tape().push({{a, b}, out, [a, b, out, m]() {
                   auto g = out.grad();
                   auto av = a.val();
                   auto bv = b.val();
                   auto oval = out.val();
                   std::size_t n = g.size();
                   if (a.requires_grad()) {
                     auto ga = a.grad_mut();
                     if (m == BMode::Same) {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / bv[i];
                     } else if (m == BMode::ScalarB) {
                       double c = bv[0];
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / c;
                     } else {
                       double s = 0;
                       for (std::size_t i = 0; i < n; ++i) s += g[i] / bv[i];
                       ga[0] += s;
                     }
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_mut();
                     if (m == BMode::Same) {
                       for (std::size_t i = 0; i < n; ++i)
                         gb[i] -= g[i] * oval[i] / bv[i];
                     } else if (m == BMode::ScalarB) {
                       double c = bv[0];
                       double s = 0;
                       for (std::size_t i = 0; i < n; ++i) s += g[i] * oval[i];
                       gb[0] -= s / c;
                     } else {
                       for (std::size_t i = 0; i < n; ++i)
                         gb[i] -= g[i] * oval[i] / bv[i];
                     }
                   }
                 }});
  }
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  bool rg = want_grad({a});
  Tensor out = make_out(a.shape(), rg);
  auto av = a.val();
  auto ov = out.val_mut();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
  if (rg) {
    tape().push({{a}, out, [a, out, c]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                 }});
  }
  return out;
}

Tensor add_const(const Tensor& a, double c) {
  bool rg = want_grad({a});
  Tensor out = make_out(a.shape(), rg);
  auto av = a.val();
  auto ov = out.val_mut();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + c;
  if (rg) {
    tape().push({{a}, out, [a, out]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                 }});
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    shape_error("matmul", a.shape(), b.shape());
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  bool rg = want_grad({a, b});
  Tensor out = make_out({m, n}, rg);
  kernels::gemm(false, false, m, n, k, 1.0, a.val().data(), k, b.val().data(), n, 0.0,
                out.val_mut().data(), n);
  if (rg) {
    tape().push({{a, b}, out, [a, b, out, m, n, k]() {
                   auto g = out.grad();
                   if (a.requires_grad()) {
                     auto ga = a.grad_mut();
                     kernels::gemm(false, true, m, k, n, 1.0, g.data(), n,
                                   b.val().data(), n, 1.0, ga.data(), k);
                   }
                   if (b.requires_grad()) {
                     auto gb = b.grad_mut();
                     kernels::gemm(true, false, k, n, m, 1.0, a.val().data(), k,
                                   g.data(), n, 1.0, gb.data(), n);
                   }
                 }});
  }
  return out;
}

namespace {

template <class F, class DF>
Tensor unary_op(const char* /*name*/, const Tensor& a, F f, DF df_from_x_and_y) {
  bool rg = want_grad({a});
  Tensor out = make_out(a.shape(), rg);
  auto av = a.val();
  auto ov = out.val_mut();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
  if (rg) {
    tape().push({{a}, out, [a, out, df_from_x_and_y]() {
                   auto g = out.grad();
                   auto av = a.val();
                   auto yv = out.val();
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < g.size(); ++i)
                     ga[i] += g[i] * df_from_x_and_y(av[i], yv[i]);
                 }});
  }
  return out;
}

}  // namespace

Tensor relu(const Tensor& a) {
  return unary_op("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op("leaky_relu", a,
                  [slope](double x) { return x > 0 ? x : slope * x; },
                  [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op("sigmoid", a,
                  [](double x) {
                    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                    double e = std::exp(x);
                    return e / (1.0 + e);
                  },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_op("softplus", a,
                  [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
                  [](double x, double) {
                    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                    double e = std::exp(x);
                    return e / (1.0 + e);
                  });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor sin(const Tensor& a) {
  return unary_op("sin", a, [](double x) { return std::sin(x); },
                  [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary_op("cos", a, [](double x) { return std::cos(x); },
                  [](double x, double) { return -std::sin(x); });
}

Tensor abs(const Tensor& a) {
  return unary_op("abs", a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary_op("square", a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  bool rg = want_grad({a});
  Tensor out = make_out({1}, rg);
  auto av = a.val();
  double s = 0;
  for (double v : av) s += v;
  out.val_mut()[0] = s;
  if (rg) {
    tape().push({{a}, out, [a, out]() {
                   double g = out.grad()[0];
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                 }});
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / (double)a.size());
}

Tensor sum_axis(const Tensor& a, int axis) {
  if (a.shape().size() != 2 || (axis != 0 && axis != 1))
    throw std::invalid_argument("sum_axis: need rank-2 tensor and axis 0/1, got " +
                                shape_str(a.shape()) + " axis " + std::to_string(axis));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  bool rg = want_grad({a});
  Tensor out = make_out(axis == 0 ? Shape{1, n} : Shape{m, 1}, rg);
  auto av = a.val();
  auto ov = out.val_mut();
  if (axis == 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ov[j] += av[i * n + j];
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += av[i * n + j];
      ov[i] = s;
    }
  }
  if (rg) {
    tape().push({{a}, out, [a, out, m, n, axis]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   if (axis == 0) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j];
                   } else {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
                   }
                 }});
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || (axis != 0 && axis != 1))
    shape_error("concat", a.shape(), b.shape());
  std::size_t am = a.shape()[0], an = a.shape()[1];
  std::size_t bm = b.shape()[0], bn = b.shape()[1];
  if ((axis == 0 && an != bn) || (axis == 1 && am != bm))
    shape_error("concat", a.shape(), b.shape());
  bool rg = want_grad({a, b});
  Shape oshape = axis == 0 ? Shape{am + bm, an} : Shape{am, an + bn};
  Tensor out = make_out(oshape, rg);
  auto av = a.val();
  auto bv = b.val();
  auto ov = out.val_mut();
  if (axis == 0) {
    std::copy(av.begin(), av.end(), ov.begin());
    std::copy(bv.begin(), bv.end(), ov.begin() + av.size());
  } else {
    for (std::size_t i = 0; i < am; ++i) {
      std::copy(av.begin() + i * an, av.begin() + (i + 1) * an,
                ov.begin() + i * (an + bn));
      std::copy(bv.begin() + i * bn, bv.begin() + (i + 1) * bn,
                ov.begin() + i * (an + bn) + an);
    }
  }
  if (rg) {
    tape().push({{a, b}, out, [a, b, out, am, an, bn, axis]() {
                   auto g = out.grad();
                   if (axis == 0) {
                     if (a.requires_grad()) {
                       auto ga = a.grad_mut();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                     }
                     if (b.requires_grad()) {
                       auto gb = b.grad_mut();
                       std::size_t off = am * an;
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[off + i];
                     }
                   } else {
                     std::size_t on = an + bn;
                     if (a.requires_grad()) {
                       auto ga = a.grad_mut();
                       for (std::size_t i = 0; i < am; ++i)
                         for (std::size_t j = 0; j < an; ++j)
                           ga[i * an + j] += g[i * on + j];
                     }
                     if (b.requires_grad()) {
                       auto gb = b.grad_mut();
                       for (std::size_t i = 0; i < am; ++i)
                         for (std::size_t j = 0; j < bn; ++j)
                           gb[i * bn + j] += g[i * on + an + j];
                     }
                   }
                 }});
  }
  return out;
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  if (s.size() == 1) {
    if (axis != 0 || start + len > s[0])
      throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                  std::to_string(start + len) + ") out of " +
                                  shape_str(s));
    bool rg = want_grad({a});
    Tensor out = make_out({len}, rg);
    auto av = a.val();
    std::copy(av.begin() + start, av.begin() + start + len, out.val_mut().begin());
    if (rg) {
      tape().push({{a}, out, [a, out, start, len]() {
                     auto g = out.grad();
                     auto ga = a.grad_mut();
                     for (std::size_t i = 0; i < len; ++i) ga[start + i] += g[i];
                   }});
    }
    return out;
  }
  if (s.size() != 2 || (axis != 0 && axis != 1))
    throw std::invalid_argument("slice: need rank 1/2, got " + shape_str(s));
  std::size_t m = s[0], n = s[1];
  if ((axis == 0 && start + len > m) || (axis == 1 && start + len > n))
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of " + shape_str(s));
  bool rg = want_grad({a});
  Tensor out = make_out(axis == 0 ? Shape{len, n} : Shape{m, len}, rg);
  auto av = a.val();
  auto ov = out.val_mut();
  if (axis == 0) {
    std::copy(av.begin() + start * n, av.begin() + (start + len) * n, ov.begin());
  } else {
    for (std::size_t i = 0; i < m; ++i)
      std::copy(av.begin() + i * n + start, av.begin() + i * n + start + len,
                ov.begin() + i * len);
  }
  if (rg) {
    tape().push({{a}, out, [a, out, m, n, start, len, axis]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   if (axis == 0) {
                     for (std::size_t i = 0; i < len * n; ++i) ga[start * n + i] += g[i];
                   } else {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < len; ++j)
                         ga[i * n + start + j] += g[i * len + j];
                   }
                 }});
  }
  return out;
}

Tensor broadcast(const Tensor& a, const Shape& target) {
  const Shape& s = a.shape();
  std::size_t tn = numel(target);
  bool rg = want_grad({a});
  if (numel(s) == 1) {
    Tensor out = make_out(target, rg);
    std::fill(out.val_mut().begin(), out.val_mut().end(), a.val()[0]);
    if (rg) {
      tape().push({{a}, out, [a, out]() {
                     auto g = out.grad();
                     double s = 0;
                     for (double v : g) s += v;
                     a.grad_mut()[0] += s;
                   }});
    }
    return out;
  }
  if (s.size() == 2 && target.size() == 2 && s[0] == 1 && s[1] == target[1]) {
    std::size_t m = target[0], n = target[1];
    Tensor out = make_out(target, rg);
    auto av = a.val();
    auto ov = out.val_mut();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(av.begin(), av.end(), ov.begin() + i * n);
    if (rg) {
      tape().push({{a}, out, [a, out, m, n]() {
                     auto g = out.grad();
                     auto ga = a.grad_mut();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) ga[j] += g[i * n + j];
                   }});
    }
    return out;
  }
  if (s.size() == 2 && target.size() == 2 && s[1] == 1 && s[0] == target[0]) {
    std::size_t m = target[0], n = target[1];
    Tensor out = make_out(target, rg);
    auto av = a.val();
    auto ov = out.val_mut();
    for (std::size_t i = 0; i < m; ++i)
      std::fill(ov.begin() + i * n, ov.begin() + (i + 1) * n, av[i]);
    if (rg) {
      tape().push({{a}, out, [a, out, m, n]() {
                     auto g = out.grad();
                     auto ga = a.grad_mut();
                     for (std::size_t i = 0; i < m; ++i) {
                       double s = 0;
                       for (std::size_t j = 0; j < n; ++j) s += g[i * n + j];
                       ga[i] += s;
                     }
                   }});
    }
    return out;
  }
  (void)tn;
  shape_error("broadcast", s, target);
}

Tensor detach(const Tensor& a) {
  return Tensor::from(a.shape(), std::vector<double>(a.val().begin(), a.val().end()));
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw std::invalid_argument("transpose: need rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  bool rg = want_grad({a});
  Tensor out = make_out({n, m}, rg);
  auto av = a.val();
  auto ov = out.val_mut();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  if (rg) {
    tape().push({{a}, out, [a, out, m, n]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                 }});
  }
  return out;
}

Tensor reshape(const Tensor& a, const Shape& target) {
  if (numel(target) != a.size()) shape_error("reshape", a.shape(), target);
  bool rg = want_grad({a});
  Tensor out = make_out(target, rg);
  auto av = a.val();
  auto ov = out.val_mut();
  std::copy(av.begin(), av.end(), ov.begin());
  if (rg) {
    tape().push({{a}, out, [a, out]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                 }});
  }
  return out;
}

Tensor repeat_rows(const Tensor& a, std::size_t times) {
  if (a.shape().size() != 2)
    throw std::invalid_argument("repeat_rows: need rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  bool rg = want_grad({a});
  Tensor out = make_out({m * times, n}, rg);
  auto av = a.val();
  auto ov = out.val_mut();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < times; ++t)
      std::copy(av.begin() + i * n, av.begin() + (i + 1) * n,
                ov.begin() + (i * times + t) * n);
  if (rg) {
    tape().push({{a}, out, [a, out, m, n, times]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t t = 0; t < times; ++t)
                       for (std::size_t j = 0; j < n; ++j)
                         ga[i * n + j] += g[(i * times + t) * n + j];
                 }});
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  if (a.shape().size() != 2)
    throw std::invalid_argument("gather_rows: need rank 2, got " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  for (std::size_t r : rows)
    if (r >= m)
      throw std::invalid_argument("gather_rows: row " + std::to_string(r) + " out of " +
                                  std::to_string(m));
  bool rg = want_grad({a});
  Tensor out = make_out({rows.size(), n}, rg);
  auto av = a.val();
  auto ov = out.val_mut();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(av.begin() + rows[i] * n, av.begin() + (rows[i] + 1) * n, ov.begin() + i * n);
  if (rg) {
    tape().push({{a}, out, [a, out, rows, n]() {
                   auto g = out.grad();
                   auto ga = a.grad_mut();
                   for (std::size_t i = 0; i < rows.size(); ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       ga[rows[i] * n + j] += g[i * n + j];
                 }});
  }
  return out;
}

Tensor skew3(const Tensor& v) {
  if (v.size() != 3)
    throw std::invalid_argument("skew3: need 3 elements, got " + shape_str(v.shape()));
  bool rg = want_grad({v});
  Tensor out = make_out({3, 3}, rg);
  auto x = v.val();
  auto o = out.val_mut();
  o[0] = 0;     o[1] = -x[2]; o[2] = x[1];
  o[3] = x[2];  o[4] = 0;     o[5] = -x[0];
  o[6] = -x[1]; o[7] = x[0];  o[8] = 0;
  if (rg) {
    tape().push({{v}, out, [v, out]() {
                   auto g = out.grad();
                   auto gv = v.grad_mut();
                   gv[0] += g[7] - g[5];
                   gv[1] += g[2] - g[6];
                   gv[2] += g[3] - g[1];
                 }});
  }
  return out;
}

Tensor volume_weights(const Tensor& sigma, const Tensor& delta) {
  if (sigma.shape().size() != 2)
    throw std::invalid_argument("volume_weights: sigma must be rank 2, got " +
                                shape_str(sigma.shape()));
  std::size_t B = sigma.shape()[0], S = sigma.shape()[1];
  bool dcol = delta.shape() == Shape{B, 1};
  bool dfull = delta.shape() == Shape{B, S};
  if (!dcol && !dfull) shape_error("volume_weights", sigma.shape(), delta.shape());
  bool rg = want_grad({sigma, delta});
  Tensor out = make_out({B, S}, rg);
  auto sv = sigma.val();
  auto dv = delta.val();
  auto ov = out.val_mut();
  for (std::size_t b = 0; b < B; ++b) {
    double T = 1.0;
    for (std::size_t s = 0; s < S; ++s) {
      double d = dcol ? dv[b] : dv[b * S + s];
      double a = sv[b * S + s] * d;
      double w = T * (-std::expm1(-a));
      ov[b * S + s] = w;
      T *= std::exp(-a);
    }
  }
  if (rg) {
    tape().push({{sigma, delta}, out, [sigma, delta, out, B, S, dcol]() {
                   auto g = out.grad();
                   auto sv = sigma.val();
                   auto dv = delta.val();
                   auto wv = out.val();
                   bool need_s = sigma.requires_grad();
                   bool need_d = delta.requires_grad();
                   std::span<double> gs, gd;
                   if (need_s) gs = sigma.grad_mut();
                   if (need_d) gd = delta.grad_mut();
                   for (std::size_t b = 0; b < B; ++b) {
                     // Rebuild transmittance, then sweep backwards with the
                     // suffix sum of g*w (every later weight shrinks when an
                     // earlier sigma grows).
                     std::vector<double> T(S);
                     double t = 1.0;
                     for (std::size_t s = 0; s < S; ++s) {
                       T[s] = t;
                       double d = dcol ? dv[b] : dv[b * S + s];
                       t *= std::exp(-sv[b * S + s] * d);
                     }
                     double suffix = 0.0;
                     for (std::size_t s = S; s-- > 0;) {
                       std::size_t i = b * S + s;
                       double d = dcol ? dv[b] : dv[i];
                       double e = std::exp(-sv[i] * d);
                       if (need_s) gs[i] += g[i] * T[s] * d * e - d * suffix;
                       if (need_d) {
                         double contrib = g[i] * T[s] * sv[i] * e - sv[i] * suffix;
                         if (dcol)
                           gd[b] += contrib;
                         else
                           gd[i] += contrib;
                       }
                       suffix += g[i] * wv[i];
                     }
                   }
                 }});
  }
  return out;
}

namespace {

// im2col for kernel 4, stride 2, pad 1: out column index = spatial output
// position, rows = (cin,ky,kx).
void im2col_k4s2p1(const double* x, std::size_t C, std::size_t H, std::size_t W,
                   double* cols, std::size_t Ho, std::size_t Wo) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < 4; ++ky)
      for (std::size_t kx = 0; kx < 4; ++kx) {
        double* row = cols + ((c * 4 + ky) * 4 + kx) * (Ho * Wo);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          std::int64_t iy = (std::int64_t)(2 * oy + ky) - 1;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            std::int64_t ix = (std::int64_t)(2 * ox + kx) - 1;
            double v = 0.0;
            if (iy >= 0 && iy < (std::int64_t)H && ix >= 0 && ix < (std::int64_t)W)
              v = x[(c * H + (std::size_t)iy) * W + (std::size_t)ix];
            row[oy * Wo + ox] = v;
          }
        }
      }
}

void col2im_k4s2p1(const double* cols, std::size_t C, std::size_t H, std::size_t W,
                   double* gx, std::size_t Ho, std::size_t Wo) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < 4; ++ky)
      for (std::size_t kx = 0; kx < 4; ++kx) {
        const double* row = cols + ((c * 4 + ky) * 4 + kx) * (Ho * Wo);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          std::int64_t iy = (std::int64_t)(2 * oy + ky) - 1;
          if (iy < 0 || iy >= (std::int64_t)H) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            std::int64_t ix = (std::int64_t)(2 * ox + kx) - 1;
            if (ix < 0 || ix >= (std::int64_t)W) continue;
            gx[(c * H + (std::size_t)iy) * W + (std::size_t)ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv4s2(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().size() != 3 || w.shape().size() != 4 || w.shape()[2] != 4 ||
      w.shape()[3] != 4 || w.shape()[1] != x.shape()[0])
    shape_error("conv4s2", x.shape(), w.shape());
  std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H < 2 || W < 2 || H % 2 || W % 2)
    throw std::invalid_argument("conv4s2: spatial dims must be even and >= 2, got " +
                                shape_str(x.shape()));
  std::size_t Cout = w.shape()[0];
  std::size_t Ho = H / 2, Wo = W / 2;  // (H + 2*1 - 4)/2 + 1
  if (b.size() != Cout) shape_error("conv4s2", w.shape(), b.shape());
  bool rg = want_grad({x, w, b});
  Tensor out = make_out({Cout, Ho, Wo}, rg);
  std::size_t K = C * 16, N = Ho * Wo;
  auto cols = std::make_shared<std::vector<double>>(K * N);
  im2col_k4s2p1(x.val().data(), C, H, W, cols->data(), Ho, Wo);
  kernels::gemm(false, false, Cout, N, K, 1.0, w.val().data(), K, cols->data(), N, 0.0,
                out.val_mut().data(), N);
  {
    auto ov = out.val_mut();
    auto bv = b.val();
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t i = 0; i < N; ++i) ov[co * N + i] += bv[co];
  }
  if (rg) {
    tape().push({{x, w, b}, out, [x, w, b, out, cols, C, H, W, Cout, Ho, Wo]() {
                   std::size_t K = C * 16, N = Ho * Wo;
                   auto g = out.grad();
                   if (b.requires_grad()) {
                     auto gb = b.grad_mut();
                     for (std::size_t co = 0; co < Cout; ++co) {
                       double s = 0;
                       for (std::size_t i = 0; i < N; ++i) s += g[co * N + i];
                       gb[co] += s;
                     }
                   }
                   if (w.requires_grad()) {
                     auto gw = w.grad_mut();
                     kernels::gemm(false, true, Cout, K, N, 1.0, g.data(), N,
                                   cols->data(), N, 1.0, gw.data(), K);
                   }
                   if (x.requires_grad()) {
                     std::vector<double> gcols(K * N);
                     kernels::gemm(true, false, K, N, Cout, 1.0, w.val().data(), K,
                                   g.data(), N, 0.0, gcols.data(), N);
                     auto gx = x.grad_mut();
                     col2im_k4s2p1(gcols.data(), C, H, W, gx.data(), Ho, Wo);
                   }
                 }});
  }
  return out;
}

Tensor avg_pool2(const Tensor& x) {
  if (x.shape().size() != 3 || x.shape()[1] % 2 || x.shape()[2] % 2)
    throw std::invalid_argument("avg_pool2: need [C,H,W] with even H,W, got " +
                                shape_str(x.shape()));
  std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  std::size_t Ho = H / 2, Wo = W / 2;
  bool rg = want_grad({x});
  Tensor out = make_out({C, Ho, Wo}, rg);
  auto xv = x.val();
  auto ov = out.val_mut();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const double* p = xv.data() + (c * H + 2 * oy) * W + 2 * ox;
        ov[(c * Ho + oy) * Wo + ox] = 0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  if (rg) {
    tape().push({{x}, out, [x, out, C, H, W, Ho, Wo]() {
                   auto g = out.grad();
                   auto gx = x.grad_mut();
                   for (std::size_t c = 0; c < C; ++c)
                     for (std::size_t oy = 0; oy < Ho; ++oy)
                       for (std::size_t ox = 0; ox < Wo; ++ox) {
                         double gv = 0.25 * g[(c * Ho + oy) * Wo + ox];
                         double* p = gx.data() + (c * H + 2 * oy) * W + 2 * ox;
                         p[0] += gv;
                         p[1] += gv;
                         p[W] += gv;
                         p[W + 1] += gv;
                       }
                 }});
  }
  return out;
}

}  // namespace nlf::ad

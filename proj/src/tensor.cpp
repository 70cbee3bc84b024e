#include "ssa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace ssa {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using MapCRM = Eigen::Map<const RowMat>;
using MapArr = Eigen::Map<Eigen::ArrayXd>;
using MapCArr = Eigen::Map<const Eigen::ArrayXd>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

void require(bool ok, const std::string& op, const std::string& detail) {
  if (!ok) shape_fail(op, detail);
}

void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Splits a shape around `axis` into (outer, extent, inner) so element
// (o, l, i) lives at flat index (o * extent + l) * inner + i.
struct AxisSpan {
  std::size_t outer, extent, inner;
};

AxisSpan axis_span(const std::string& op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSpan s{1, shape[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->value = Eigen::ArrayXd::Constant(static_cast<Eigen::Index>(shape_size(shape)), fill);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_size(shape) != data.size())
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for shape " + shape_str(shape));
  Eigen::ArrayXd arr = MapCArr(data.data(), static_cast<Eigen::Index>(data.size()));
  return from_array(std::move(shape), std::move(arr), requires_grad);
}

Tensor Tensor::from_array(Shape shape, Eigen::ArrayXd data, bool requires_grad) {
  if (static_cast<Eigen::Index>(shape_size(shape)) != data.size())
    throw std::invalid_argument("from_array: " + std::to_string(data.size()) +
                                " values for shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({}, {v}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::invalid_argument("shape: undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size() const {
  return static_cast<std::size_t>(array().size());
}

bool Tensor::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw std::invalid_argument("set_requires_grad: undefined tensor");
  if (impl_->backprop)
    throw std::invalid_argument("set_requires_grad: only leaves may be toggled");
  impl_->requires_grad = on;
}

double Tensor::value() const {
  if (size() != 1)
    throw std::invalid_argument("value: tensor of shape " + shape_str(shape()) +
                                " is not a scalar");
  return impl_->value[0];
}

double Tensor::operator[](std::size_t flat) const { return array()[static_cast<Eigen::Index>(flat)]; }

double Tensor::at(std::size_t i) const { return (*this)[i]; }

double Tensor::at(std::size_t i, std::size_t j) const {
  const Shape& s = shape();
  return (*this)[i * s[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  const Shape& s = shape();
  return (*this)[(i * s[1] + j) * s[2] + k];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
  const Shape& s = shape();
  return (*this)[((i * s[1] + j) * s[2] + k) * s[3] + l];
}

Eigen::ArrayXd& Tensor::array() {
  if (!impl_) throw std::invalid_argument("array: undefined tensor");
  return impl_->value;
}

const Eigen::ArrayXd& Tensor::array() const {
  if (!impl_) throw std::invalid_argument("array: undefined tensor");
  return impl_->value;
}

double* Tensor::data() { return array().data(); }
const double* Tensor::data() const { return array().data(); }

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() > 0; }

const Eigen::ArrayXd& Tensor::grad_array() const {
  if (!has_grad())
    throw std::invalid_argument("grad_array: no gradient recorded on this tensor");
  return impl_->grad;
}

double Tensor::grad_at(std::size_t flat) const {
  return grad_array()[static_cast<Eigen::Index>(flat)];
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.resize(0);
}

// Builds an op node. The node is recorded (parents + closure kept) only when
// some input requires gradients; otherwise the result is a plain constant.
Tensor make_op(Shape shape, Eigen::ArrayXd value, std::vector<Tensor> inputs,
               std::function<void(detail::TensorImpl&)> backprop) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(value);
  bool track = false;
  for (const Tensor& t : inputs) track = track || t.requires_grad();
  if (track) {
    impl->requires_grad = true;
    impl->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) impl->parents.push_back(t.impl());
    impl->backprop = std::move(backprop);
  }
  return Tensor(std::move(impl));
}

// ---- tape and backward ------------------------------------------------------

Tape Tape::build(const Tensor& root) {
  Tape tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  // Iterative post-order over parents: parents land before their consumers.
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  seen.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorImpl* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && seen.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      tape.nodes.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1)
    throw std::invalid_argument("backward: root must be a scalar, got " +
                                (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  if (!root.requires_grad()) return;
  Tape tape = Tape::build(root);
  root.impl()->ensure_grad();
  root.impl()->grad[0] += 1.0;
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

// ---- primitive ops ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul",
          "expects rank-2 inputs, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul",
          "inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Eigen::ArrayXd out(static_cast<Eigen::Index>(m * n));
  MapRM(out.data(), m, n).noalias() =
      MapCRM(a.data(), m, k) * MapCRM(b.data(), k, n);
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    MapCRM g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      MapRM(pa.grad.data(), m, k).noalias() += g * MapCRM(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      MapRM(pb.grad.data(), k, n).noalias() += MapCRM(pa.value.data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose", "expects a rank-2 input, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Eigen::ArrayXd out(static_cast<Eigen::Index>(m * n));
  MapRM(out.data(), n, m) = MapCRM(a.data(), m, n).transpose();
  return make_op({n, m}, std::move(out), {a}, [m, n](detail::TensorImpl& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    MapRM(pa.grad.data(), m, n) += MapCRM(self.grad.data(), n, m).transpose();
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span("softmax", x.shape(), axis);
  Eigen::ArrayXd out(x.array().size());
  const double* xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = xv[base];
      for (std::size_t l = 1; l < s.extent; ++l)
        mx = std::max(mx, xv[base + l * s.inner]);
      double denom = 0.0;
      for (std::size_t l = 0; l < s.extent; ++l) {
        const double e = std::exp(xv[base + l * s.inner] - mx);
        out[static_cast<Eigen::Index>(base + l * s.inner)] = e;
        denom += e;
      }
      for (std::size_t l = 0; l < s.extent; ++l)
        out[static_cast<Eigen::Index>(base + l * s.inner)] /= denom;
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [s](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    double* gx = px.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.extent; ++l) {
          const std::size_t idx = base + l * s.inner;
          dot += g[idx] * y[idx];
        }
        for (std::size_t l = 0; l < s.extent; ++l) {
          const std::size_t idx = base + l * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span("log_softmax", x.shape(), axis);
  Eigen::ArrayXd out(x.array().size());
  const double* xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = xv[base];
      for (std::size_t l = 1; l < s.extent; ++l)
        mx = std::max(mx, xv[base + l * s.inner]);
      double denom = 0.0;
      for (std::size_t l = 0; l < s.extent; ++l)
        denom += std::exp(xv[base + l * s.inner] - mx);
      const double lse = mx + std::log(denom);
      for (std::size_t l = 0; l < s.extent; ++l) {
        const std::size_t idx = base + l * s.inner;
        out[static_cast<Eigen::Index>(idx)] = xv[idx] - lse;
      }
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [s](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    double* gx = px.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double gsum = 0.0;
        for (std::size_t l = 0; l < s.extent; ++l)
          gsum += g[base + l * s.inner];
        for (std::size_t l = 0; l < s.extent; ++l) {
          const std::size_t idx = base + l * s.inner;
          gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
}

Tensor concat_channel(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 1 && a.rank() == b.rank(), "concat_channel",
          "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t d = 0; d + 1 < a.rank(); ++d)
    require(a.shape()[d] == b.shape()[d], "concat_channel",
            "leading extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t ca = a.shape().back(), cb = b.shape().back();
  const std::size_t rows = a.size() / ca;
  Shape out_shape = a.shape();
  out_shape.back() = ca + cb;
  Eigen::ArrayXd out(static_cast<Eigen::Index>(rows * (ca + cb)));
  const double* av = a.data();
  const double* bv = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(av + r * ca, av + (r + 1) * ca, out.data() + r * (ca + cb));
    std::copy(bv + r * cb, bv + (r + 1) * cb, out.data() + r * (ca + cb) + ca);
  }
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [rows, ca, cb](detail::TensorImpl& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const double* g = self.grad.data();
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     double* ga = pa.grad.data();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < ca; ++c)
                         ga[r * ca + c] += g[r * (ca + cb) + c];
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     double* gb = pb.grad.data();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cb; ++c)
                         gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                   }
                 });
}

Tensor linear_1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() >= 1, "linear_1x1", "input must have at least one axis");
  require(w.rank() == 2, "linear_1x1", "weight must be rank-2, got " + shape_str(w.shape()));
  require(b.rank() == 1, "linear_1x1", "bias must be rank-1, got " + shape_str(b.shape()));
  const std::size_t din = x.shape().back();
  require(w.shape()[0] == din, "linear_1x1",
          "weight rows " + std::to_string(w.shape()[0]) + " vs input channels " + std::to_string(din));
  const std::size_t dout = w.shape()[1];
  require(b.shape()[0] == dout, "linear_1x1", "bias extent vs weight columns mismatch");
  const std::size_t rows = x.size() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Eigen::ArrayXd out(static_cast<Eigen::Index>(rows * dout));
  MapRM y(out.data(), rows, dout);
  y.noalias() = MapCRM(x.data(), rows, din) * MapCRM(w.data(), din, dout);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), dout);
  return make_op(std::move(out_shape), std::move(out), {x, w, b},
                 [rows, din, dout](detail::TensorImpl& self) {
                   auto& px = *self.parents[0];
                   auto& pw = *self.parents[1];
                   auto& pb = *self.parents[2];
                   MapCRM g(self.grad.data(), rows, dout);
                   if (px.requires_grad) {
                     px.ensure_grad();
                     MapRM(px.grad.data(), rows, din).noalias() +=
                         g * MapCRM(pw.value.data(), din, dout).transpose();
                   }
                   if (pw.requires_grad) {
                     pw.ensure_grad();
                     MapRM(pw.grad.data(), din, dout).noalias() +=
                         MapCRM(px.value.data(), rows, din).transpose() * g;
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     Eigen::Map<Eigen::RowVectorXd>(pb.grad.data(), dout) += g.colwise().sum();
                   }
                 });
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& k) {
  require(x.rank() == 3, "depthwise_conv3x3", "input must be [H, W, D], got " + shape_str(x.shape()));
  require(k.rank() == 3 && k.shape()[0] == 3 && k.shape()[1] == 3, "depthwise_conv3x3",
          "kernel must be [3, 3, D], got " + shape_str(k.shape()));
  const std::size_t h = x.shape()[0], w = x.shape()[1], d = x.shape()[2];
  require(k.shape()[2] == d, "depthwise_conv3x3", "kernel depth vs input channels mismatch");
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(h * w * d));
  const double* xv = x.data();
  const double* kv = k.data();
  // Nine shifted row-block accumulations; each tap scales a contiguous
  // [count, D] slice per image row.
  for (int dy = 0; dy < 3; ++dy) {
    const int r = dy - 1;
    for (int dx = 0; dx < 3; ++dx) {
      const int c = dx - 1;
      MapCArr tap(kv + (dy * 3 + dx) * d, static_cast<Eigen::Index>(d));
      const std::size_t ow0 = static_cast<std::size_t>(std::max(0, -c));
      const std::size_t ow1 = w - static_cast<std::size_t>(std::max(0, c));
      if (ow0 >= ow1) continue;
      const std::size_t count = ow1 - ow0;
      for (std::size_t oh = (r < 0 ? 1u : 0u); oh < (r > 0 ? h - 1 : h); ++oh) {
        const std::size_t ih = oh + static_cast<std::size_t>(static_cast<long>(r));
        MapRM dst(out.data() + (oh * w + ow0) * d, count, d);
        MapCRM src(xv + (ih * w + ow0 + static_cast<std::size_t>(static_cast<long>(c))) * d, count, d);
        dst.array() += src.array().rowwise() * tap.transpose();
      }
    }
  }
  return make_op(x.shape(), std::move(out), {x, k}, [h, w, d](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    auto& pk = *self.parents[1];
    if (px.requires_grad) px.ensure_grad();
    if (pk.requires_grad) pk.ensure_grad();
    const double* g = self.grad.data();
    const double* xv = px.value.data();
    const double* kv = pk.value.data();
    for (int dy = 0; dy < 3; ++dy) {
      const int r = dy - 1;
      for (int dx = 0; dx < 3; ++dx) {
        const int c = dx - 1;
        const std::size_t ow0 = static_cast<std::size_t>(std::max(0, -c));
        const std::size_t ow1 = w - static_cast<std::size_t>(std::max(0, c));
        if (ow0 >= ow1) continue;
        const std::size_t count = ow1 - ow0;
        for (std::size_t oh = (r < 0 ? 1u : 0u); oh < (r > 0 ? h - 1 : h); ++oh) {
          const std::size_t ih = oh + static_cast<std::size_t>(static_cast<long>(r));
          const std::size_t src_off = (ih * w + ow0 + static_cast<std::size_t>(static_cast<long>(c))) * d;
          MapCRM gblk(g + (oh * w + ow0) * d, count, d);
          if (px.requires_grad) {
            MapCArr tap(kv + (dy * 3 + dx) * d, static_cast<Eigen::Index>(d));
            MapRM(px.grad.data() + src_off, count, d).array() +=
                gblk.array().rowwise() * tap.transpose();
          }
          if (pk.requires_grad) {
            MapCRM xblk(xv + src_off, count, d);
            MapArr(pk.grad.data() + (dy * 3 + dx) * d, static_cast<Eigen::Index>(d)) +=
                (gblk.array() * xblk.array()).colwise().sum().transpose();
          }
        }
      }
    }
  });
}

Tensor conv3x3(const Tensor& x, const Tensor& k, const Tensor& b) {
  require(x.rank() == 3, "conv3x3", "input must be [H, W, Cin], got " + shape_str(x.shape()));
  require(k.rank() == 4 && k.shape()[0] == 3 && k.shape()[1] == 3, "conv3x3",
          "kernel must be [3, 3, Cin, Cout], got " + shape_str(k.shape()));
  const std::size_t h = x.shape()[0], w = x.shape()[1], cin = x.shape()[2];
  require(k.shape()[2] == cin, "conv3x3", "kernel input channels vs input mismatch");
  const std::size_t cout = k.shape()[3];
  require(b.rank() == 1 && b.shape()[0] == cout, "conv3x3", "bias extent vs output channels mismatch");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(h * w * cout));
  MapRM full(out.data(), static_cast<Eigen::Index>(h * w), cout);
  full.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(b.data(), cout);
  const double* xv = x.data();
  const double* kv = k.data();
  for (int dy = 0; dy < 3; ++dy) {
    const int r = dy - 1;
    for (int dx = 0; dx < 3; ++dx) {
      const int c = dx - 1;
      MapCRM tap(kv + (dy * 3 + dx) * cin * cout, cin, cout);
      const std::size_t ow0 = static_cast<std::size_t>(std::max(0, -c));
      const std::size_t ow1 = w - static_cast<std::size_t>(std::max(0, c));
      if (ow0 >= ow1) continue;
      const std::size_t count = ow1 - ow0;
      for (std::size_t oh = (r < 0 ? 1u : 0u); oh < (r > 0 ? h - 1 : h); ++oh) {
        const std::size_t ih = oh + static_cast<std::size_t>(static_cast<long>(r));
        MapRM dst(out.data() + (oh * w + ow0) * cout, count, cout);
        MapCRM src(xv + (ih * w + ow0 + static_cast<std::size_t>(static_cast<long>(c))) * cin, count, cin);
        dst.noalias() += src * tap;
      }
    }
  }
  return make_op({h, w, cout}, std::move(out), {x, k, b},
                 [h, w, cin, cout](detail::TensorImpl& self) {
                   auto& px = *self.parents[0];
                   auto& pk = *self.parents[1];
                   auto& pb = *self.parents[2];
                   if (px.requires_grad) px.ensure_grad();
                   if (pk.requires_grad) pk.ensure_grad();
                   const double* g = self.grad.data();
                   const double* xv = px.value.data();
                   const double* kv = pk.value.data();
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     Eigen::Map<Eigen::RowVectorXd>(pb.grad.data(), cout) +=
                         MapCRM(g, static_cast<Eigen::Index>(h * w), cout).colwise().sum();
                   }
                   for (int dy = 0; dy < 3; ++dy) {
                     const int r = dy - 1;
                     for (int dx = 0; dx < 3; ++dx) {
                       const int c = dx - 1;
                       const std::size_t ow0 = static_cast<std::size_t>(std::max(0, -c));
                       const std::size_t ow1 = w - static_cast<std::size_t>(std::max(0, c));
                       if (ow0 >= ow1) continue;
                       const std::size_t count = ow1 - ow0;
                       for (std::size_t oh = (r < 0 ? 1u : 0u); oh < (r > 0 ? h - 1 : h); ++oh) {
                         const std::size_t ih = oh + static_cast<std::size_t>(static_cast<long>(r));
                         const std::size_t src_off =
                             (ih * w + ow0 + static_cast<std::size_t>(static_cast<long>(c))) * cin;
                         MapCRM gblk(g + (oh * w + ow0) * cout, count, cout);
                         if (px.requires_grad) {
                           MapCRM tap(kv + (dy * 3 + dx) * cin * cout, cin, cout);
                           MapRM(px.grad.data() + src_off, count, cin).noalias() +=
                               gblk * tap.transpose();
                         }
                         if (pk.requires_grad) {
                           MapCRM xblk(xv + src_off, count, cin);
                           MapRM(pk.grad.data() + (dy * 3 + dx) * cin * cout, cin, cout).noalias() +=
                               xblk.transpose() * gblk;
                         }
                       }
                     }
                   }
                 });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_pair(const std::string& op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require_same_shape(op, a, b);
  Eigen::ArrayXd out = fwd(a.array(), b.array());
  return make_op(a.shape(), std::move(out), {a, b},
                 [bwd](detail::TensorImpl& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   bwd(self, pa, pb);
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_pair(
      "add", a, b, [](const auto& x, const auto& y) -> Eigen::ArrayXd { return x + y; },
      [](detail::TensorImpl& self, detail::TensorImpl& pa, detail::TensorImpl& pb) {
        if (pa.requires_grad) { pa.ensure_grad(); pa.grad += self.grad; }
        if (pb.requires_grad) { pb.ensure_grad(); pb.grad += self.grad; }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_pair(
      "sub", a, b, [](const auto& x, const auto& y) -> Eigen::ArrayXd { return x - y; },
      [](detail::TensorImpl& self, detail::TensorImpl& pa, detail::TensorImpl& pb) {
        if (pa.requires_grad) { pa.ensure_grad(); pa.grad += self.grad; }
        if (pb.requires_grad) { pb.ensure_grad(); pb.grad -= self.grad; }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_pair(
      "mul", a, b, [](const auto& x, const auto& y) -> Eigen::ArrayXd { return x * y; },
      [](detail::TensorImpl& self, detail::TensorImpl& pa, detail::TensorImpl& pb) {
        if (pa.requires_grad) { pa.ensure_grad(); pa.grad += self.grad * pb.value; }
        if (pb.requires_grad) { pb.ensure_grad(); pb.grad += self.grad * pa.value; }
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise_pair(
      "div", a, b, [](const auto& x, const auto& y) -> Eigen::ArrayXd { return x / y; },
      [](detail::TensorImpl& self, detail::TensorImpl& pa, detail::TensorImpl& pb) {
        if (pa.requires_grad) { pa.ensure_grad(); pa.grad += self.grad / pb.value; }
        if (pb.requires_grad) {
          pb.ensure_grad();
          pb.grad -= self.grad * self.value / pb.value;
        }
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  Eigen::ArrayXd out = a.array() + c;
  return make_op(a.shape(), std::move(out), {a}, [](detail::TensorImpl& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    pa.grad += self.grad;
  });
}

Tensor mul_scalar(const Tensor& a, double c) {
  Eigen::ArrayXd out = a.array() * c;
  return make_op(a.shape(), std::move(out), {a}, [c](detail::TensorImpl& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    pa.grad += self.grad * c;
  });
}

Tensor relu(const Tensor& x) {
  Eigen::ArrayXd out = x.array().max(0.0);
  return make_op(x.shape(), std::move(out), {x}, [](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    px.grad += self.grad * (px.value > 0.0).cast<double>();
  });
}

Tensor exp(const Tensor& x) {
  Eigen::ArrayXd out = x.array().exp();
  return make_op(x.shape(), std::move(out), {x}, [](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    px.grad += self.grad * self.value;
  });
}

Tensor log(const Tensor& x) {
  Eigen::ArrayXd out = (x.array() + kEps).log();
  return make_op(x.shape(), std::move(out), {x}, [](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    px.grad += self.grad / (px.value + kEps);
  });
}

Tensor reduce_sum(const Tensor& x) {
  Eigen::ArrayXd out(1);
  out[0] = x.array().sum();
  return make_op({}, std::move(out), {x}, [](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    px.grad += self.grad[0];
  });
}

Tensor reduce_mean(const Tensor& x) {
  require(x.size() > 0, "reduce_mean", "empty tensor");
  const double n = static_cast<double>(x.size());
  Eigen::ArrayXd out(1);
  out[0] = x.array().sum() / n;
  return make_op({}, std::move(out), {x}, [n](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    px.grad += self.grad[0] / n;
  });
}

Tensor reduce_max(const Tensor& x) {
  require(x.size() > 0, "reduce_max", "empty tensor");
  Eigen::Index arg = 0;
  const double mx = x.array().maxCoeff(&arg);
  Eigen::ArrayXd out(1);
  out[0] = mx;
  return make_op({}, std::move(out), {x}, [arg](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    px.grad[arg] += self.grad[0];
  });
}

namespace {

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  out.reserve(shape.size() - 1);
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (d != axis) out.push_back(shape[d]);
  return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span("reduce_sum", x.shape(), axis);
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(s.outer * s.inner));
  const double* xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.extent; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[static_cast<Eigen::Index>(o * s.inner + i)] += xv[(o * s.extent + l) * s.inner + i];
  return make_op(drop_axis(x.shape(), axis), std::move(out), {x}, [s](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double* g = self.grad.data();
    double* gx = px.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.extent; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          gx[(o * s.extent + l) * s.inner + i] += g[o * s.inner + i];
  });
}

Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span("reduce_mean", x.shape(), axis);
  Tensor summed = reduce_sum(x, axis);
  return mul_scalar(summed, 1.0 / static_cast<double>(s.extent));
}

Tensor reduce_max(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span("reduce_max", x.shape(), axis);
  Eigen::ArrayXd out(static_cast<Eigen::Index>(s.outer * s.inner));
  std::vector<std::size_t> argmax(s.outer * s.inner);
  const double* xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      double mx = xv[o * s.extent * s.inner + i];
      for (std::size_t l = 1; l < s.extent; ++l) {
        const double v = xv[(o * s.extent + l) * s.inner + i];
        if (v > mx) {
          mx = v;
          best = l;
        }
      }
      out[static_cast<Eigen::Index>(o * s.inner + i)] = mx;
      argmax[o * s.inner + i] = best;
    }
  }
  return make_op(drop_axis(x.shape(), axis), std::move(out), {x},
                 [s, argmax = std::move(argmax)](detail::TensorImpl& self) {
                   auto& px = *self.parents[0];
                   if (!px.requires_grad) return;
                   px.ensure_grad();
                   const double* g = self.grad.data();
                   double* gx = px.grad.data();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t i = 0; i < s.inner; ++i)
                       gx[(o * s.extent + argmax[o * s.inner + i]) * s.inner + i] +=
                           g[o * s.inner + i];
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_size(shape) == x.size(), "reshape",
          "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Eigen::ArrayXd out = x.array();
  return make_op(std::move(shape), std::move(out), {x}, [](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    px.grad += self.grad;
  });
}

Tensor div_rows(const Tensor& x, const Tensor& d) {
  require(x.rank() == 2 && d.rank() == 1 && d.shape()[0] == x.shape()[0], "div_rows",
          "expects x [M, N] and d [M], got " + shape_str(x.shape()) + " and " + shape_str(d.shape()));
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Eigen::ArrayXd out(x.array().size());
  MapRM(out.data(), m, n) =
      MapCRM(x.data(), m, n).array().colwise() / MapCArr(d.data(), m);
  return make_op(x.shape(), std::move(out), {x, d}, [m, n](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    auto& pd = *self.parents[1];
    MapCRM g(self.grad.data(), m, n);
    MapCArr dv(pd.value.data(), m);
    if (px.requires_grad) {
      px.ensure_grad();
      MapRM(px.grad.data(), m, n).array() += g.array().colwise() / dv;
    }
    if (pd.requires_grad) {
      pd.ensure_grad();
      MapCRM y(self.value.data(), m, n);
      MapArr(pd.grad.data(), m) -=
          (g.array() * y.array()).rowwise().sum() / dv;
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require(x.rank() == 2 && s.rank() == 1 && s.shape()[0] == x.shape()[0], "scale_rows",
          "expects x [M, N] and s [M], got " + shape_str(x.shape()) + " and " + shape_str(s.shape()));
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Eigen::ArrayXd out(x.array().size());
  MapRM(out.data(), m, n) =
      MapCRM(x.data(), m, n).array().colwise() * MapCArr(s.data(), m);
  return make_op(x.shape(), std::move(out), {x, s}, [m, n](detail::TensorImpl& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    MapCRM g(self.grad.data(), m, n);
    if (px.requires_grad) {
      px.ensure_grad();
      MapRM(px.grad.data(), m, n).array() +=
          g.array().colwise() * MapCArr(ps.value.data(), m);
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      MapArr(ps.grad.data(), m) +=
          (g.array() * MapCRM(px.value.data(), m, n).array()).rowwise().sum();
    }
  });
}

Tensor detach(const Tensor& x) {
  return Tensor::from_array(x.shape(), x.array(), false);
}

}  // namespace ssa

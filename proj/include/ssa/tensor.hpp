#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ssa {

using Shape = std::vector<std::size_t>;

// Guard added inside every log and every division by a data-dependent
// denominator.
inline constexpr double kEps = 1e-12;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backprop;  // empty on leaves

  void ensure_grad() {
    if (grad.size() == 0) grad = Eigen::ArrayXd::Zero(value.size());
  }
};

}  // namespace detail

// Value-semantic handle over a shared node. Copies alias the same storage;
// ops build the graph on the fly and record a backward closure only when an
// input requires gradients, so value-only evaluation never touches a tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor from_array(Shape shape, Eigen::ArrayXd data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  bool requires_grad() const;
  void set_requires_grad(bool on);

  // Scalar read; throws unless the tensor holds exactly one element.
  double value() const;

  double operator[](std::size_t flat) const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;

  Eigen::ArrayXd& array();
  const Eigen::ArrayXd& array() const;
  double* data();
  const double* data() const;

  bool has_grad() const;
  const Eigen::ArrayXd& grad_array() const;
  double grad_at(std::size_t flat) const;
  void zero_grad();

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

  friend Tensor make_op(Shape shape, Eigen::ArrayXd value, std::vector<Tensor> inputs,
                        std::function<void(detail::TensorImpl&)> backprop);

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Topologically ordered record of the graph under a root: every node appears
// exactly once and after all of its recorded parents.
struct Tape {
  std::vector<detail::TensorImpl*> nodes;
  static Tape build(const Tensor& root);
};

// Seeds d(root)/d(root) = 1 and sweeps the tape once in reverse order.
// Gradients accumulate into leaves; callers zero them between passes.
// Throws std::invalid_argument if root is not a scalar.
void backward(const Tensor& root);

// ---- primitive operations -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// Joins two tensors along the trailing axis; leading extents must match.
Tensor concat_channel(const Tensor& a, const Tensor& b);

// y = x . w + b applied per position: x [..., Din], w [Din, Dout], b [Dout].
Tensor linear_1x1(const Tensor& x, const Tensor& w, const Tensor& b);

// x [H, W, D], k [3, 3, D], zero padding, stride 1.
Tensor depthwise_conv3x3(const Tensor& x, const Tensor& k);

// x [H, W, Cin], k [3, 3, Cin, Cout], b [Cout], zero padding, stride 1.
Tensor conv3x3(const Tensor& x, const Tensor& k, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
// log(x + eps); the guard keeps zero inputs finite.
Tensor log(const Tensor& x);

Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
Tensor reduce_max(const Tensor& x);
Tensor reduce_sum(const Tensor& x, std::size_t axis);
Tensor reduce_mean(const Tensor& x, std::size_t axis);
Tensor reduce_max(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);

// y[i, j] = x[i, j] / d[i]; x [M, N], d [M]. No epsilon: callers guard.
Tensor div_rows(const Tensor& x, const Tensor& d);
// y[i, j] = x[i, j] * s[i]; x [M, N], s [M].
Tensor scale_rows(const Tensor& x, const Tensor& s);

// Value copy severed from the graph.
Tensor detach(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

}  // namespace ssa

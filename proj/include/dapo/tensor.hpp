#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace dapo {

using Shape = std::vector<int>;

int numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;
  unsigned long long tape_id = 0;  // id of the tape that produced this tensor
};

// Dense n-d array of doubles with an optional gradient slot. Value-semantics
// handle over shared storage; ops below build a tape when one is active.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int size() const { return static_cast<int>(impl_->data.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  double value() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad() { impl_->grad.clear(); }

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

  Tensor detached() const;  // value copy, no grad, no tape link

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. Ops record onto the innermost active tape of the
// current thread; backward() replays it in exact reverse insertion order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  void record(std::shared_ptr<TensorImpl> out, std::function<void()> pull);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> pull;
  };
  std::vector<Node> nodes_;
  bool done_ = false;
  Tape* prev_ = nullptr;
  unsigned long long id_ = 0;

  friend void backward(const Tensor& loss);
};

// Populates grad on every requires_grad leaf reachable from loss.
void backward(const Tensor& loss);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);  // exact-zero denominator throws
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor clamp_min(const Tensor& a, double lo);

enum class ElemKind { Add, Mul, Sub, Div, Gelu, Sigmoid, Log, Exp, Power };
Tensor elementwise(ElemKind kind, const std::vector<Tensor>& inputs,
                   double power_exponent = 1.0);

// ---- structure ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int count);
Tensor slice_cols(const Tensor& a, int start, int count);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// ---- reductions / normalization ----
Tensor sum(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);

// ---- spatial ----
// Bilinear, align-corners-false semantics. 2-d input only; H >= h, W >= w.
Tensor upsample_bilinear(const Tensor& a, int out_h, int out_w);

Tensor dot(const Tensor& a, const Tensor& b);  // sum(a*b), any matching shape

// Max relative error between the tape gradient of f at x and central finite
// differences: max_i |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double step);

}  // namespace dapo

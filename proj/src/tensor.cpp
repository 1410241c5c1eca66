#include "dapo/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dapo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_active_tape = nullptr;

// Suspends taping while evaluating, e.g. the numeric side of a gradient check.
struct NoTape {
  Tape* saved;
  NoTape() : saved(g_active_tape) { g_active_tape = nullptr; }
  ~NoTape() { g_active_tape = saved; }
};

bool wants_grad(const TensorImpl* t) {
  return t->requires_grad || t->tape_id != 0;
}

void ensure_grad(TensorImpl* t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
}

bool tracking(std::initializer_list<const Tensor*> ins) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : ins)
    if (wants_grad(t->impl())) return true;
  return false;
}

void tag_and_record(const Tensor& out, std::function<void()> pull) {
  g_active_tape->record(out.impl_ptr(), std::move(pull));
}

[[noreturn]] void shape_error(const std::string& msg) {
  throw std::invalid_argument("shape error: " + msg);
}

// Right-aligned broadcast plan; a dim must equal the out dim or be 1.
struct BcastPlan {
  Shape out;
  std::vector<long> stride_a, stride_b;  // per out-dim, 0 where broadcast
};

BcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  BcastPlan p;
  p.out.resize(rank);
  p.stride_a.assign(rank, 0);
  p.stride_b.assign(rank, 0);
  std::vector<int> pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(rank - b.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      shape_error("incompatible broadcast " + shape_str(a) + " vs " + shape_str(b));
    p.out[i] = std::max(pa[i], pb[i]);
  }
  long sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    p.stride_a[i] = (pa[i] == 1) ? 0 : sa;
    p.stride_b[i] = (pb[i] == 1) ? 0 : sb;
    sa *= pa[i];
    sb *= pb[i];
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every element of the result.
template <typename Fn>
void bcast_for_each(const BcastPlan& p, Fn&& fn) {
  long n = numel(p.out);
  std::size_t rank = p.out.size();
  std::vector<int> idx(rank, 0);
  long ia = 0, ib = 0;
  for (long i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

// Shared skeleton for broadcasting binary ops. FwdFn: (a,b)->out;
// GradFn: (a,b,g)->contribution to the respective input.
template <typename FwdFn, typename GaFn, typename GbFn>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdFn fwd, GaFn ga, GbFn gb) {
  const auto& ad = a.data();
  const auto& bd = b.data();
  Tensor out;
  bool same = a.shape() == b.shape();
  if (same) {
    out = Tensor(a.shape());
    auto& od = out.data();
    for (std::size_t i = 0; i < ad.size(); ++i) od[i] = fwd(ad[i], bd[i]);
  } else {
    BcastPlan p = broadcast_plan(a.shape(), b.shape());
    out = Tensor(p.out);
    auto& od = out.data();
    bcast_for_each(p, [&](long i, long ia, long ib) { od[i] = fwd(ad[ia], bd[ib]); });
  }
  if (tracking({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    bool track_a = wants_grad(ai.get()), track_b = wants_grad(bi.get());
    tag_and_record(out, [=]() {
      const auto& g = oi->grad;
      if (track_a) ensure_grad(ai.get());
      if (track_b) ensure_grad(bi.get());
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (track_a) ai->grad[i] += ga(ai->data[i], bi->data[i], g[i]);
          if (track_b) bi->grad[i] += gb(ai->data[i], bi->data[i], g[i]);
        }
      } else {
        BcastPlan p = broadcast_plan(ai->shape, bi->shape);
        bcast_for_each(p, [&](long i, long ia, long ib) {
          if (track_a) ai->grad[ia] += ga(ai->data[ia], bi->data[ib], g[i]);
          if (track_b) bi->grad[ib] += gb(ai->data[ia], bi->data[ib], g[i]);
        });
      }
    });
  }
  return out;
}

template <typename FwdFn, typename GradFn>
Tensor unary_op(const Tensor& a, FwdFn fwd, GradFn grad) {
  Tensor out(a.shape());
  const auto& ad = a.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = fwd(ad[i]);
  if (tracking({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        ai->grad[i] += grad(ai->data[i], oi->data[i]) * oi->grad[i];
    });
  }
  return out;
}

void require_2d(const Tensor& t, const char* what) {
  if (t.ndim() != 2) shape_error(std::string(what) + " expects a 2-d tensor, got " + shape_str(t.shape()));
}

}  // namespace

int numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), 1, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (int d : shape)
    if (d <= 0) shape_error("non-positive dimension in " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<std::size_t>(numel(impl_->shape)), fill);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (int d : shape)
    if (d <= 0) shape_error("non-positive dimension in " + shape_str(shape));
  if (static_cast<std::size_t>(numel(shape)) != values.size())
    shape_error("value count " + std::to_string(values.size()) + " does not match " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("value() requires a scalar tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim())
    shape_error("index rank mismatch");
  long off = 0;
  int d = 0;
  for (int i : idx) {
    off = off * impl_->shape[static_cast<std::size_t>(d)] + i;
    ++d;
  }
  return impl_->data[static_cast<std::size_t>(off)];
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty())
    throw std::runtime_error("tensor has no gradient populated");
  return impl_->grad;
}

Tensor Tensor::detached() const {
  return Tensor(impl_->shape, impl_->data, false);
}

static unsigned long long next_tape_id() {
  static thread_local unsigned long long counter = 0;
  return ++counter;
}

Tape::Tape() : prev_(g_active_tape) {
  id_ = next_tape_id();
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<TensorImpl> out, std::function<void()> pull) {
  out->tape_id = id_;
  nodes_.push_back({std::move(out), std::move(pull)});
}

void backward(const Tensor& loss) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) throw std::runtime_error("backward: no active tape");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (loss.impl()->tape_id != tape->id_)
    throw std::runtime_error("backward: loss is detached from the active tape");
  if (tape->done_)
    throw std::runtime_error("backward: tape already consumed; build a fresh graph");
  tape->done_ = true;
  loss.impl()->grad.assign(1, 1.0);
  for (std::size_t i = tape->nodes_.size(); i-- > 0;) {
    auto& node = tape->nodes_[i];
    if (node.out->grad.empty()) continue;  // not on the path to the loss
    node.pull();
  }
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x + y; },
                   [](double, double, double g) { return g; },
                   [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x - y; },
                   [](double, double, double g) { return g; },
                   [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x * y; },
                   [](double, double y, double g) { return g * y; },
                   [](double x, double, double g) { return g * x; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  for (double v : b.data())
    if (v == 0.0) throw std::domain_error("divide: exact zero denominator");
  return binary_op(a, b, [](double x, double y) { return x / y; },
                   [](double, double y, double g) { return g / y; },
                   [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor exp_op(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log_op(const Tensor& a) {
  for (double v : a.data())
    if (v <= 0.0) throw std::domain_error("log: non-positive input");
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a,
                  [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                               : std::exp(x) / (1.0 + std::exp(x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(a,
                  [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                  [=](double x, double) {
                    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                    return cdf + x * pdf;
                  });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary_op(a, [p](double x) { return std::pow(x, p); },
                  [p](double x, double) {
                    return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0);
                  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(a, [lo](double x) { return x < lo ? lo : x; },
                  [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

Tensor elementwise(ElemKind kind, const std::vector<Tensor>& inputs,
                   double power_exponent) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n)
      throw std::invalid_argument("elementwise: wrong input count");
  };
  switch (kind) {
    case ElemKind::Add: need(2); return add(inputs[0], inputs[1]);
    case ElemKind::Sub: need(2); return sub(inputs[0], inputs[1]);
    case ElemKind::Mul: need(2); return mul(inputs[0], inputs[1]);
    case ElemKind::Div: need(2); return divide(inputs[0], inputs[1]);
    case ElemKind::Gelu: need(1); return gelu(inputs[0]);
    case ElemKind::Sigmoid: need(1); return sigmoid(inputs[0]);
    case ElemKind::Log: need(1); return log_op(inputs[0]);
    case ElemKind::Exp: need(1); return exp_op(inputs[0]);
    case ElemKind::Power: need(1); return pow_scalar(inputs[0], power_exponent);
  }
  throw std::invalid_argument("elementwise: unknown kind");
}

// ---- structure ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    shape_error("matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out(Shape{m, n});
  {
    CMapMat A(a.data().data(), m, k);
    CMapMat B(b.data().data(), k, n);
    MapMat O(out.data().data(), m, n);
    O.noalias() = A * B;
  }
  if (tracking({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    bool ta = wants_grad(ai.get()), tb = wants_grad(bi.get());
    tag_and_record(out, [=]() {
      CMapMat A(ai->data.data(), m, k);
      CMapMat B(bi->data.data(), k, n);
      CMapMat G(oi->grad.data(), m, n);
      if (ta) {
        ensure_grad(ai.get());
        MapMat GA(ai->grad.data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (tb) {
        ensure_grad(bi.get());
        MapMat GB(bi->grad.data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  int m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  CMapMat A(a.data().data(), m, n);
  MapMat O(out.data().data(), n, m);
  O = A.transpose();
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      CMapMat G(oi->grad.data(), n, m);
      MapMat GA(ai->grad.data(), m, n);
      GA += G.transpose();
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    shape_error("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(shape, a.data());
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  int cols = parts[0].dim(1), rows = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.dim(1) != cols) shape_error("concat_rows column mismatch");
    rows += p.dim(0);
  }
  Tensor out(Shape{rows, cols});
  auto& od = out.data();
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), od.begin() + static_cast<long>(off));
    off += p.data().size();
  }
  bool track = false;
  for (const Tensor& p : parts)
    if (tracking({&p})) track = true;
  if (track) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      std::size_t o = 0;
      for (auto& pi : impls) {
        if (wants_grad(pi.get())) {
          ensure_grad(pi.get());
          for (std::size_t i = 0; i < pi->data.size(); ++i)
            pi->grad[i] += oi->grad[o + i];
        }
        o += pi->data.size();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  int rows = parts[0].dim(0), cols = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != rows) shape_error("concat_cols row mismatch");
    cols += p.dim(1);
  }
  Tensor out(Shape{rows, cols});
  auto& od = out.data();
  int coff = 0;
  for (const Tensor& p : parts) {
    int pc = p.dim(1);
    const auto& pd = p.data();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pc; ++c)
        od[static_cast<std::size_t>(r) * cols + coff + c] =
            pd[static_cast<std::size_t>(r) * pc + c];
    coff += pc;
  }
  bool track = false;
  for (const Tensor& p : parts)
    if (tracking({&p})) track = true;
  if (track) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      int off = 0;
      for (auto& pi : impls) {
        int pc = pi->shape[1];
        if (wants_grad(pi.get())) {
          ensure_grad(pi.get());
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pc; ++c)
              pi->grad[static_cast<std::size_t>(r) * pc + c] +=
                  oi->grad[static_cast<std::size_t>(r) * cols + off + c];
        }
        off += pc;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int count) {
  require_2d(a, "slice_rows");
  if (start < 0 || count <= 0 || start + count > a.dim(0))
    shape_error("slice_rows out of range");
  int cols = a.dim(1);
  Tensor out(Shape{count, cols});
  std::copy(a.data().begin() + static_cast<long>(start) * cols,
            a.data().begin() + static_cast<long>(start + count) * cols,
            out.data().begin());
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        ai->grad[static_cast<std::size_t>(start) * cols + i] += oi->grad[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int count) {
  require_2d(a, "slice_cols");
  if (start < 0 || count <= 0 || start + count > a.dim(1))
    shape_error("slice_cols out of range");
  int rows = a.dim(0), cols = a.dim(1);
  Tensor out(Shape{rows, count});
  auto& od = out.data();
  const auto& ad = a.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < count; ++c)
      od[static_cast<std::size_t>(r) * count + c] =
          ad[static_cast<std::size_t>(r) * cols + start + c];
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < count; ++c)
          ai->grad[static_cast<std::size_t>(r) * cols + start + c] +=
              oi->grad[static_cast<std::size_t>(r) * count + c];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "gather_rows");
  int rows = table.dim(0), cols = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= rows) shape_error("gather_rows id out of range");
  Tensor out(Shape{static_cast<int>(ids.size()), cols});
  auto& od = out.data();
  const auto& td = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy(td.begin() + static_cast<long>(ids[r]) * cols,
              td.begin() + static_cast<long>(ids[r] + 1) * cols,
              od.begin() + static_cast<long>(r) * cols);
  if (tracking({&table})) {
    auto ti = table.impl_ptr();
    auto oi = out.impl_ptr();
    auto idc = ids;
    tag_and_record(out, [=]() {
      ensure_grad(ti.get());
      for (std::size_t r = 0; r < idc.size(); ++r)
        for (int c = 0; c < cols; ++c)
          ti->grad[static_cast<std::size_t>(idc[r]) * cols + c] +=
              oi->grad[r * static_cast<std::size_t>(cols) + c];
    });
  }
  return out;
}

// ---- reductions / normalization ----

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      double g = oi->grad[0];
      for (double& gv : ai->grad) gv += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / a.size()); }

Tensor sum_axis(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.ndim()) shape_error("sum_axis: bad axis");
  long outer = 1, inner = 1;
  int n = a.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  Shape os;
  for (int i = 0; i < a.ndim(); ++i)
    if (i != axis) os.push_back(a.dim(i));
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  const auto& ad = a.data();
  auto& od = out.data();
  for (long o = 0; o < outer; ++o)
    for (int j = 0; j < n; ++j)
      for (long i = 0; i < inner; ++i)
        od[static_cast<std::size_t>(o * inner + i)] +=
            ad[static_cast<std::size_t>((o * n + j) * inner + i)];
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (long o = 0; o < outer; ++o)
        for (int j = 0; j < n; ++j)
          for (long i = 0; i < inner; ++i)
            ai->grad[static_cast<std::size_t>((o * n + j) * inner + i)] +=
                oi->grad[static_cast<std::size_t>(o * inner + i)];
    });
  }
  return out;
}

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.ndim()) shape_error("softmax: bad axis");
  long outer = 1, inner = 1;
  int n = a.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  Tensor out(a.shape());
  const auto& ad = a.data();
  auto& od = out.data();
  for (long o = 0; o < outer; ++o) {
    for (long i = 0; i < inner; ++i) {
      double mx = -1e308;
      for (int j = 0; j < n; ++j)
        mx = std::max(mx, ad[static_cast<std::size_t>((o * n + j) * inner + i)]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        std::size_t k = static_cast<std::size_t>((o * n + j) * inner + i);
        od[k] = std::exp(ad[k] - mx);
        z += od[k];
      }
      for (int j = 0; j < n; ++j)
        od[static_cast<std::size_t>((o * n + j) * inner + i)] /= z;
    }
  }
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (long o = 0; o < outer; ++o) {
        for (long i = 0; i < inner; ++i) {
          double dotgy = 0.0;
          for (int j = 0; j < n; ++j) {
            std::size_t k = static_cast<std::size_t>((o * n + j) * inner + i);
            dotgy += oi->grad[k] * oi->data[k];
          }
          for (int j = 0; j < n; ++j) {
            std::size_t k = static_cast<std::size_t>((o * n + j) * inner + i);
            ai->grad[k] += oi->data[k] * (oi->grad[k] - dotgy);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  int width = x.dim(x.ndim() - 1);
  if (gain.size() != width || bias.size() != width)
    shape_error("layer_norm gain/bias must match last axis width");
  long rows = x.size() / width;
  Tensor out(x.shape());
  std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
  std::vector<double> xhat(x.data().size());
  const auto& xd = x.data();
  const auto& gd = gain.data();
  const auto& bd = bias.data();
  auto& od = out.data();
  for (long r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * width;
    double mu = 0.0;
    for (int i = 0; i < width; ++i) mu += row[i];
    mu /= width;
    double var = 0.0;
    for (int i = 0; i < width; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= width;
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(r)] = is;
    for (int i = 0; i < width; ++i) {
      std::size_t k = static_cast<std::size_t>(r * width + i);
      xhat[k] = (row[i] - mu) * is;
      od[k] = xhat[k] * gd[static_cast<std::size_t>(i)] + bd[static_cast<std::size_t>(i)];
    }
  }
  if (tracking({&x, &gain, &bias})) {
    auto xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr();
    auto oi = out.impl_ptr();
    bool tx = wants_grad(xi.get()), tg = wants_grad(gi.get()), tb = wants_grad(bi.get());
    tag_and_record(out, [=]() {
      if (tx) ensure_grad(xi.get());
      if (tg) ensure_grad(gi.get());
      if (tb) ensure_grad(bi.get());
      const auto& g = oi->grad;
      for (long r = 0; r < rows; ++r) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (int i = 0; i < width; ++i) {
          std::size_t k = static_cast<std::size_t>(r * width + i);
          double dxh = g[k] * gi->data[static_cast<std::size_t>(i)];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat[k];
        }
        mean_dxh /= width;
        mean_dxh_xh /= width;
        for (int i = 0; i < width; ++i) {
          std::size_t k = static_cast<std::size_t>(r * width + i);
          double dxh = g[k] * gi->data[static_cast<std::size_t>(i)];
          if (tx)
            xi->grad[k] += inv_sigma[static_cast<std::size_t>(r)] *
                           (dxh - mean_dxh - xhat[k] * mean_dxh_xh);
          if (tg) gi->grad[static_cast<std::size_t>(i)] += g[k] * xhat[k];
          if (tb) bi->grad[static_cast<std::size_t>(i)] += g[k];
        }
      }
    });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  require_2d(a, "l2_normalize_rows");
  int rows = a.dim(0), cols = a.dim(1);
  Tensor out(a.shape());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  const auto& ad = a.data();
  auto& od = out.data();
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) {
      double v = ad[static_cast<std::size_t>(r) * cols + c];
      s += v * v;
    }
    double nrm = std::max(std::sqrt(s), eps);
    norms[static_cast<std::size_t>(r)] = nrm;
    for (int c = 0; c < cols; ++c)
      od[static_cast<std::size_t>(r) * cols + c] = ad[static_cast<std::size_t>(r) * cols + c] / nrm;
  }
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (int r = 0; r < rows; ++r) {
        double gy = 0.0;
        for (int c = 0; c < cols; ++c) {
          std::size_t k = static_cast<std::size_t>(r) * cols + c;
          gy += oi->grad[k] * oi->data[k];
        }
        for (int c = 0; c < cols; ++c) {
          std::size_t k = static_cast<std::size_t>(r) * cols + c;
          ai->grad[k] += (oi->grad[k] - gy * oi->data[k]) / norms[static_cast<std::size_t>(r)];
        }
      }
    });
  }
  return out;
}

// ---- spatial ----

Tensor upsample_bilinear(const Tensor& a, int out_h, int out_w) {
  require_2d(a, "upsample_bilinear");
  int h = a.dim(0), w = a.dim(1);
  if (out_h < h || out_w < w)
    throw std::invalid_argument("upsample_bilinear: target smaller than input");
  struct Taps {
    int lo;
    double frac;
  };
  auto axis_taps = [](int in, int out) {
    std::vector<Taps> t(static_cast<std::size_t>(out));
    double s = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
      double src = (i + 0.5) * s - 0.5;
      if (src < 0) src = 0;
      if (src > in - 1) src = in - 1;
      int lo = static_cast<int>(std::floor(src));
      if (lo > in - 2) lo = in - 2;
      if (lo < 0) lo = 0;
      t[static_cast<std::size_t>(i)] = {lo, in == 1 ? 0.0 : src - lo};
    }
    return t;
  };
  auto ty = axis_taps(h, out_h), tx = axis_taps(w, out_w);
  Tensor out(Shape{out_h, out_w});
  const auto& ad = a.data();
  auto& od = out.data();
  auto idx = [w](int r, int c) { return static_cast<std::size_t>(r) * w + c; };
  for (int y = 0; y < out_h; ++y) {
    auto [y0, fy] = ty[static_cast<std::size_t>(y)];
    int y1 = std::min(y0 + 1, h - 1);
    for (int x = 0; x < out_w; ++x) {
      auto [x0, fx] = tx[static_cast<std::size_t>(x)];
      int x1 = std::min(x0 + 1, w - 1);
      od[static_cast<std::size_t>(y) * out_w + x] =
          (1 - fy) * ((1 - fx) * ad[idx(y0, x0)] + fx * ad[idx(y0, x1)]) +
          fy * ((1 - fx) * ad[idx(y1, x0)] + fx * ad[idx(y1, x1)]);
    }
  }
  if (tracking({&a})) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    tag_and_record(out, [=]() {
      ensure_grad(ai.get());
      for (int y = 0; y < out_h; ++y) {
        auto [y0, fy] = ty[static_cast<std::size_t>(y)];
        int y1 = std::min(y0 + 1, h - 1);
        for (int x = 0; x < out_w; ++x) {
          auto [x0, fx] = tx[static_cast<std::size_t>(x)];
          int x1 = std::min(x0 + 1, w - 1);
          double g = oi->grad[static_cast<std::size_t>(y) * out_w + x];
          ai->grad[idx(y0, x0)] += (1 - fy) * (1 - fx) * g;
          ai->grad[idx(y0, x1)] += (1 - fy) * fx * g;
          ai->grad[idx(y1, x0)] += fy * (1 - fx) * g;
          ai->grad[idx(y1, x1)] += fy * fx * g;
        }
      }
    });
  }
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double step) {
  if (step <= 0) throw std::invalid_argument("finite_diff_check: step must be positive");
  Tensor xa(x.shape(), x.data(), true);
  std::vector<double> analytic(x.data().size(), 0.0);
  {
    NoTape shield;  // isolate from any enclosing tape
    Tape tape;
    Tensor y = f(xa);
    backward(y);
    if (xa.has_grad()) analytic = xa.grad();
  }
  NoTape shield;
  Tensor xp(x.shape(), x.data(), false);
  double max_err = 0.0;
  for (std::size_t i = 0; i < xp.data().size(); ++i) {
    double orig = xp.data()[i];
    xp.data()[i] = orig + step;
    double fp = f(xp).value();
    xp.data()[i] = orig - step;
    double fm = f(xp).value();
    xp.data()[i] = orig;
    double numeric = (fp - fm) / (2.0 * step);
    double err = std::abs(analytic[i] - numeric) /
                 std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace dapo

#pragma once

// Dense 64-bit real tensors with a reverse-mode gradient tape and an Adam
// optimizer. Ranks 0..2 cover the whole model; conv1d kernels are rank 3.
// Broadcasting is restricted to leading-axis expansion: the smaller operand's
// shape must be a suffix of the larger one's (a scalar matches everything).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <utility>
#include <vector>

#include "calonet/common.hpp"

namespace calonet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// Additive-mask sentinel: entries are either 0 (attend) or this value (drop).
// Masked slots are excluded before exponentiation, never exponentiated.
inline constexpr double kMaskedOut = -std::numeric_limits<double>::infinity();

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first populated; shaped like value
  bool requires_grad = false;
  bool leaf = true;  // false for op outputs; only leaves keep persistent grads
};

class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) { d_->value.assign(1, 0.0); }

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->value.assign(shape_numel(t.d_->shape), 0.0);
    return t;
  }

  static Tensor full(Shape shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.d_->value.begin(), t.d_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->value.size(); }
  std::size_t dim(std::size_t axis) const { return d_->shape.at(axis); }

  std::vector<double>& data() { return d_->value; }
  const std::vector<double>& data() const { return d_->value; }

  double item() const {
    if (d_->value.size() != 1)
      throw ShapeError("Tensor::item: tensor of shape " + shape_str(d_->shape) + " is not a scalar");
    return d_->value[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<double>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
    return d_->grad;
  }
  const std::vector<double>& grad() const { return d_->grad; }
  void zero_grad() { d_->grad.assign(d_->value.size(), 0.0); }

  std::shared_ptr<TensorData> node() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// Per-backward adjoint buffers. Persistent grads of requires_grad leaves are
// only touched at the end of a traversal, so repeated backward calls without
// zeroing accumulate exactly.
class GradStore {
 public:
  std::vector<double>* find(const TensorData* p) {
    auto it = adj_.find(p);
    return it == adj_.end() ? nullptr : &it->second;
  }
  std::vector<double>& accum(const TensorData* p, std::size_t n) {
    auto& buf = adj_[p];
    if (buf.empty()) buf.assign(n, 0.0);
    return buf;
  }
  auto begin() { return adj_.begin(); }
  auto end() { return adj_.end(); }

 private:
  std::unordered_map<const TensorData*, std::vector<double>> adj_;
};

// Records one backward rule per op in execution order; backward replays them
// in exact reverse. Explicit and single-active per thread.
class Tape {
 public:
  Tape() {
    if (active_) throw ConfigError("Tape: another tape is already active on this thread");
    active_ = this;
  }
  ~Tape() { active_ = nullptr; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void(GradStore&)> pull) { nodes_.push_back(std::move(pull)); }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw ShapeError("backward: loss of shape " + shape_str(loss.shape()) + " is not a scalar");
    GradStore store;
    store.accum(loss.node().get(), 1)[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(store);
    for (auto& [p, buf] : store) {
      auto* t = const_cast<TensorData*>(p);
      if (!t->leaf || !t->requires_grad) continue;
      if (t->grad.empty()) t->grad.assign(t->value.size(), 0.0);
      for (std::size_t i = 0; i < buf.size(); ++i) t->grad[i] += buf[i];
    }
  }

 private:
  std::vector<std::function<void(GradStore&)>> nodes_;
  static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

namespace detail {

inline void mark_op_output(Tensor& t) {
  t.node()->requires_grad = true;
  t.node()->leaf = false;
}

inline bool recording(std::initializer_list<const Tensor*> ins) {
  if (!Tape::active()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// true when b's shape is a suffix of a's (scalar b always qualifies)
inline bool suffix_broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

// trainable-parameter initializers: uniform +-1/sqrt(fan_in), or a constant
inline Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

inline Tensor init_const(Shape shape, double value) {
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic with leading-axis broadcasting

namespace detail {

template <typename Fwd, typename PullA, typename PullB>
Tensor broadcast_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, PullA pull_a,
                        PullB pull_b) {
  if (!suffix_broadcastable(a.shape(), b.shape())) shape_fail(name, a.shape(), b.shape());
  const std::size_t n = a.size(), bn = b.size();
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i % bn]);
  if (recording({&a, &b})) {
    mark_op_output(out);
    auto ad = a.node(), bd = b.node(), od = out.node();
    Tape::active()->record([ad, bd, od, n, bn, pull_a, pull_b](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      if (ad->requires_grad) {
        auto& ga = gs.accum(ad.get(), n);
        for (std::size_t i = 0; i < n; ++i)
          ga[i] += pull_a((*g)[i], ad->value[i], bd->value[i % bn]);
      }
      if (bd->requires_grad) {
        auto& gb = gs.accum(bd.get(), bn);
        for (std::size_t i = 0; i < n; ++i)
          gb[i % bn] += pull_b((*g)[i], ad->value[i], bd->value[i % bn]);
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data()[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] += av * b.data()[p * n + j];
    }
  if (detail::recording({&a, &b})) {
    detail::mark_op_output(out);
    auto ad = a.node(), bd = b.node(), od = out.node();
    Tape::active()->record([ad, bd, od, m, k, n](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      if (ad->requires_grad) {
        auto& ga = gs.accum(ad.get(), m * k);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += (*g)[i * n + j] * bd->value[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (bd->requires_grad) {
        auto& gb = gs.accum(bd.get(), k * n);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            const double av = ad->value[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * (*g)[i * n + j];
          }
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 tensor required, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  if (detail::recording({&a})) {
    detail::mark_op_output(out);
    auto ad = a.node(), od = out.node();
    Tape::active()->record([ad, od, m, n](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (*g)[j * m + i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  Tensor out = Tensor::from(std::move(shape), a.data());
  if (detail::recording({&a})) {
    detail::mark_op_output(out);
    auto ad = a.node(), od = out.node();
    const std::size_t n = a.size();
    Tape::active()->record([ad, od, n](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), n);
      for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i];
    });
  }
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.rank() != 2 || b.rank() != 2 || axis > 1) shape_fail("concat", a.shape(), b.shape());
  const std::size_t am = a.dim(0), an = a.dim(1), bm = b.dim(0), bn = b.dim(1);
  if (axis == 0 ? an != bn : am != bm) shape_fail("concat", a.shape(), b.shape());
  const std::size_t m = axis == 0 ? am + bm : am;
  const std::size_t n = axis == 0 ? an : an + bn;
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double v;
      if (axis == 0)
        v = i < am ? a.data()[i * an + j] : b.data()[(i - am) * bn + j];
      else
        v = j < an ? a.data()[i * an + j] : b.data()[i * bn + (j - an)];
      out.data()[i * n + j] = v;
    }
  if (detail::recording({&a, &b})) {
    detail::mark_op_output(out);
    auto ad = a.node(), bd = b.node(), od = out.node();
    Tape::active()->record([ad, bd, od, am, an, bm, bn, m, n, axis](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      if (ad->requires_grad) {
        auto& ga = gs.accum(ad.get(), am * an);
        for (std::size_t i = 0; i < am; ++i)
          for (std::size_t j = 0; j < an; ++j) ga[i * an + j] += (*g)[i * n + j];
      }
      if (bd->requires_grad) {
        auto& gb = gs.accum(bd.get(), bm * bn);
        for (std::size_t i = 0; i < bm; ++i)
          for (std::size_t j = 0; j < bn; ++j) {
            double gv = axis == 0 ? (*g)[(i + am) * n + j] : (*g)[i * n + (j + an)];
            gb[i * bn + j] += gv;
          }
      }
    });
  }
  return out;
}

// half-open [begin, end) along the given axis of a rank-2 tensor
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || axis > 1 || begin > end || end > a.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  const std::size_t am = a.dim(0), an = a.dim(1);
  const std::size_t m = axis == 0 ? end - begin : am;
  const std::size_t n = axis == 0 ? an : end - begin;
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t si = axis == 0 ? i + begin : i;
      std::size_t sj = axis == 0 ? j : j + begin;
      out.data()[i * n + j] = a.data()[si * an + sj];
    }
  if (detail::recording({&a})) {
    detail::mark_op_output(out);
    auto ad = a.node(), od = out.node();
    Tape::active()->record([ad, od, am, an, m, n, axis, begin](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), am * an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          std::size_t si = axis == 0 ? i + begin : i;
          std::size_t sj = axis == 0 ? j : j + begin;
          ga[si * an + sj] += (*g)[i * n + j];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  if (a.rank() != 2 || axis > 1)
    throw ShapeError("mean_axis: rank-2 tensor required, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  const std::size_t keep = axis == 0 ? n : m;
  const std::size_t red = axis == 0 ? m : n;
  Tensor out = Tensor::zeros({keep});
  for (std::size_t k = 0; k < keep; ++k) {
    double acc = 0.0;
    for (std::size_t r = 0; r < red; ++r)
      acc += axis == 0 ? a.data()[r * n + k] : a.data()[k * n + r];
    out.data()[k] = acc / static_cast<double>(red);
  }
  if (detail::recording({&a})) {
    detail::mark_op_output(out);
    auto ad = a.node(), od = out.node();
    Tape::active()->record([ad, od, m, n, keep, red, axis](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), m * n);
      const double inv = 1.0 / static_cast<double>(red);
      for (std::size_t k = 0; k < keep; ++k)
        for (std::size_t r = 0; r < red; ++r) {
          std::size_t idx = axis == 0 ? r * n + k : k * n + r;
          ga[idx] += (*g)[k] * inv;
        }
    });
  }
  return out;
}

// gradient flows to the first maximal element of each fiber
inline Tensor max_axis(const Tensor& a, std::size_t axis) {
  if (a.rank() != 2 || axis > 1)
    throw ShapeError("max_axis: rank-2 tensor required, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  const std::size_t keep = axis == 0 ? n : m;
  const std::size_t red = axis == 0 ? m : n;
  Tensor out = Tensor::zeros({keep});
  auto argmax = std::make_shared<std::vector<std::size_t>>(keep, 0);
  for (std::size_t k = 0; k < keep; ++k) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_r = 0;
    for (std::size_t r = 0; r < red; ++r) {
      double v = axis == 0 ? a.data()[r * n + k] : a.data()[k * n + r];
      if (v > best) {
        best = v;
        best_r = r;
      }
    }
    out.data()[k] = best;
    (*argmax)[k] = best_r;
  }
  if (detail::recording({&a})) {
    detail::mark_op_output(out);
    auto ad = a.node(), od = out.node();
    Tape::active()->record([ad, od, m, n, keep, argmax, axis](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), m * n);
      for (std::size_t k = 0; k < keep; ++k) {
        std::size_t r = (*argmax)[k];
        std::size_t idx = axis == 0 ? r * n + k : k * n + r;
        ga[idx] += (*g)[k];
      }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& a) {
  Tensor out = Tensor::scalar(std::accumulate(a.data().begin(), a.data().end(), 0.0));
  if (detail::recording({&a})) {
    detail::mark_op_output(out);
    auto ad = a.node(), od = out.node();
    const std::size_t n = a.size();
    Tape::active()->record([ad, od, n](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), n);
      for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd dfdx) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i]);
  if (recording({&a})) {
    mark_op_output(out);
    auto ad = a.node(), od = out.node();
    Tape::active()->record([ad, od, n, dfdx](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), n);
      for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i] * dfdx(ad->value[i], od->value[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

// exact (erf-based) gelu
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

// ---------------------------------------------------------------------------
// softmax over the last axis with an additive {0, -inf} mask

inline Tensor softmax(const Tensor& a, const Tensor& mask) {
  if (mask.shape() != a.shape()) shape_fail("softmax", a.shape(), mask.shape());
  for (double m : mask.data())
    if (m != 0.0 && m != kMaskedOut)
      throw ShapeError("softmax: mask entries must be 0 or the -inf sentinel");
  if (a.rank() == 0) throw ShapeError("softmax: rank >= 1 required, got " + shape_str(a.shape()));
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * n;
    const double* mk = mask.data().data() + r * n;
    double* y = out.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mk[j] == 0.0 && x[j] > mx) mx = x[j];
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row -> zeros
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (mk[j] == 0.0) denom += std::exp(x[j] - mx);
    for (std::size_t j = 0; j < n; ++j) y[j] = mk[j] == 0.0 ? std::exp(x[j] - mx) / denom : 0.0;
  }
  if (detail::recording({&a})) {
    detail::mark_op_output(out);
    auto ad = a.node(), md = mask.node(), od = out.node();
    Tape::active()->record([ad, md, od, rows, n](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      auto& ga = gs.accum(ad.get(), rows * n);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = od->value.data() + r * n;
        const double* mk = md->value.data() + r * n;
        const double* gr = g->data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (mk[j] == 0.0) dot += gr[j] * y[j];
        for (std::size_t j = 0; j < n; ++j)
          if (mk[j] == 0.0) ga[r * n + j] += y[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

inline Tensor softmax(const Tensor& a) { return softmax(a, Tensor::zeros(a.shape())); }

// ---------------------------------------------------------------------------
// layer normalization over the last axis with learned scale/shift

inline Tensor layer_norm(const Tensor& a, const Tensor& scale, const Tensor& shift,
                         double eps = 1e-5) {
  if (a.rank() == 0) throw ShapeError("layer_norm: rank >= 1 required");
  const std::size_t n = a.shape().back();
  if (scale.shape() != Shape{n}) shape_fail("layer_norm", a.shape(), scale.shape());
  if (shift.shape() != Shape{n}) shape_fail("layer_norm", a.shape(), shift.shape());
  const std::size_t rows = a.size() / n;
  Tensor out = Tensor::zeros(a.shape());
  auto xhat = std::make_shared<std::vector<double>>(a.size());
  auto inv_sd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      double xh = (x[j] - mu) * inv;
      (*xhat)[r * n + j] = xh;
      out.data()[r * n + j] = xh * scale.data()[j] + shift.data()[j];
    }
  }
  if (detail::recording({&a, &scale, &shift})) {
    detail::mark_op_output(out);
    auto ad = a.node(), sd = scale.node(), hd = shift.node(), od = out.node();
    Tape::active()->record([ad, sd, hd, od, rows, n, xhat, inv_sd](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      if (sd->requires_grad) {
        auto& gsc = gs.accum(sd.get(), n);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gsc[j] += (*g)[r * n + j] * (*xhat)[r * n + j];
      }
      if (hd->requires_grad) {
        auto& gsh = gs.accum(hd.get(), n);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gsh[j] += (*g)[r * n + j];
      }
      if (ad->requires_grad) {
        auto& ga = gs.accum(ad.get(), rows * n);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_gy = 0.0, sum_gyx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            double gy = (*g)[r * n + j] * sd->value[j];
            sum_gy += gy;
            sum_gyx += gy * (*xhat)[r * n + j];
          }
          const double invn = 1.0 / static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            double gy = (*g)[r * n + j] * sd->value[j];
            ga[r * n + j] += (*inv_sd)[r] *
                             (gy - sum_gy * invn - (*xhat)[r * n + j] * sum_gyx * invn);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1-D convolution over the row axis: x [P, Cin], w [Cout, Cin, K] with K odd,
// zero padding (K-1)/2, stride 1, bias [Cout] -> [P, Cout]

inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 3 || bias.rank() != 1) shape_fail("conv1d", x.shape(), w.shape());
  const std::size_t p = x.dim(0), cin = x.dim(1);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || bias.dim(0) != cout || k % 2 == 0) shape_fail("conv1d", x.shape(), w.shape());
  const std::size_t half = k / 2;
  Tensor out = Tensor::zeros({p, cout});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = bias.data()[o];
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t t = 0; t < k; ++t) {
          std::ptrdiff_t q = static_cast<std::ptrdiff_t>(i + t) - static_cast<std::ptrdiff_t>(half);
          if (q < 0 || q >= static_cast<std::ptrdiff_t>(p)) continue;
          acc += x.data()[static_cast<std::size_t>(q) * cin + c] * w.data()[(o * cin + c) * k + t];
        }
      out.data()[i * cout + o] = acc;
    }
  if (detail::recording({&x, &w, &bias})) {
    detail::mark_op_output(out);
    auto xd = x.node(), wd = w.node(), bd = bias.node(), od = out.node();
    Tape::active()->record([xd, wd, bd, od, p, cin, cout, k, half](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      if (bd->requires_grad) {
        auto& gb = gs.accum(bd.get(), cout);
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t o = 0; o < cout; ++o) gb[o] += (*g)[i * cout + o];
      }
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t o = 0; o < cout; ++o) {
          const double go = (*g)[i * cout + o];
          if (go == 0.0) continue;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t t = 0; t < k; ++t) {
              std::ptrdiff_t q =
                  static_cast<std::ptrdiff_t>(i + t) - static_cast<std::ptrdiff_t>(half);
              if (q < 0 || q >= static_cast<std::ptrdiff_t>(p)) continue;
              const std::size_t xi = static_cast<std::size_t>(q) * cin + c;
              const std::size_t wi = (o * cin + c) * k + t;
              if (xd->requires_grad) gs.accum(xd.get(), p * cin)[xi] += go * wd->value[wi];
              if (wd->requires_grad) gs.accum(wd.get(), cout * cin * k)[wi] += go * xd->value[xi];
            }
        }
    });
  }
  return out;
}

// scales row r of x [m, n] by s[r]
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() != 2 || s.shape() != Shape{x.dim(0)}) shape_fail("scale_rows", x.shape(), s.shape());
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] * s.data()[i];
  if (detail::recording({&x, &s})) {
    detail::mark_op_output(out);
    auto xd = x.node(), sd = s.node(), od = out.node();
    Tape::active()->record([xd, sd, od, m, n](GradStore& gs) {
      auto* g = gs.find(od.get());
      if (!g) return;
      if (xd->requires_grad) {
        auto& gx = gs.accum(xd.get(), m * n);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += (*g)[i * n + j] * sd->value[i];
      }
      if (sd->requires_grad) {
        auto& gsv = gs.accum(sd.get(), m);
        for (std::size_t i = 0; i < m; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += (*g)[i * n + j] * xd->value[i * n + j];
          gsv[i] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam optimizer (bias-corrected)

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m, v;  // aligned with the parameter list
};

inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw ConfigError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                      " parameters, got " + std::to_string(params.size()));
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad())
      throw ConfigError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    auto& g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.data()[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace calonet

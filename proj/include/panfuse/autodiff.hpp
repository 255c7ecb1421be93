#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// double tensors of rank <= 4 (batch, channel, height, width).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "panfuse/error.hpp"

namespace panfuse::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_rank();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " + shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool is_scalar() const noexcept { return shape_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_rank() const {
    if (shape_.size() > 4) throw ShapeError("tensor rank above 4: " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

// ---------------------------------------------------------------- parameters

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
  long step = 0;
};

// Named parameters; iteration order is by name.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor init) {
    if (params_.count(name)) throw InvalidInput("parameter '" + name + "' already exists");
    const Shape s = init.shape();
    params_.emplace(name, Parameter{std::move(init), Tensor(s), Tensor(s), Tensor(s), 0});
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidInput("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidInput("unknown parameter '" + name + "'");
    return it->second;
  }

  const Tensor& value(const std::string& name) const { return at(name).value; }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.numel();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [_, p] : params_) std::fill(p.grad.data().begin(), p.grad.data().end(), 0.0);
  }

 private:
  std::map<std::string, Parameter> params_;
};

// ---------------------------------------------------------------- tape

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct BackwardContext {
  const Tensor& out;
  const Tensor& gout;
  std::span<const Tensor* const> in;
  std::span<Tensor* const> gin;  // nullptr where the input needs no gradient
};

using Backprop = std::function<void(const BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) {
    t.set_requires_grad(false);
    return push(Node{std::move(t), {}, false, {}, {}, nullptr, Leaf::constant});
  }

  // Leaf whose gradient is kept on the tape and accumulates across backward calls.
  Var variable(Tensor t) {
    t.set_requires_grad(true);
    const Shape s = t.shape();
    return push(Node{std::move(t), Tensor(s), true, {}, {}, nullptr, Leaf::variable});
  }

  // Leaf bound to a parameter; backward adds its gradient into the set.
  Var parameter(ParameterSet& params, const std::string& name) {
    Parameter& p = params.at(name);
    Tensor t = p.value;
    t.set_requires_grad(true);
    const Shape s = t.shape();
    return push(Node{std::move(t), Tensor(s), true, {}, {}, &p.grad, Leaf::parameter});
  }

  // Records an op output. The node requires grad iff any input does.
  Var record(Tensor value, std::vector<std::size_t> inputs, Backprop backprop) {
    bool rg = false;
    for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
    value.set_requires_grad(rg);
    if (!rg) return push(Node{std::move(value), {}, false, {}, {}, nullptr, Leaf::op});
    return push(Node{std::move(value), {}, true, std::move(inputs), std::move(backprop), nullptr, Leaf::op});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (!n.requires_grad) throw InvalidInput("grad() on a tensor that does not require grad");
    return n.grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var loss) {
    if (&loss.tape() != this) throw InvalidInput("backward: loss belongs to another tape");
    if (nodes_.empty()) throw InvalidInput("backward: empty tape");
    const Tensor& lv = value(loss.id());
    if (lv.numel() != 1) throw InvalidInput("backward: loss must be scalar, got shape " + shape_string(lv.shape()));
    if (!requires_grad(loss.id())) return;

    for (auto& n : nodes_)
      if (n.requires_grad && n.kind != Leaf::variable) n.grad = Tensor(n.value.shape());
    std::fill(nodes_[loss.id()].grad.data().begin(), nodes_[loss.id()].grad.data().end(), 0.0);
    nodes_[loss.id()].grad[0] += 1.0;

    std::vector<const Tensor*> in;
    std::vector<Tensor*> gin;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.kind == Leaf::parameter) {
        auto& dst = *n.param_grad;
        for (std::size_t j = 0; j < dst.numel(); ++j) dst[j] += n.grad[j];
        continue;
      }
      if (!n.backprop) continue;
      in.clear();
      gin.clear();
      for (auto id : n.inputs) {
        in.push_back(&nodes_[id].value);
        gin.push_back(nodes_[id].requires_grad ? &nodes_[id].grad : nullptr);
      }
      n.backprop(BackwardContext{n.value, n.grad, in, gin});
    }
  }

 private:
  enum class Leaf { op, constant, variable, parameter };

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    Backprop backprop;
    Tensor* param_grad;
    Leaf kind;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

inline void backward(Var loss) { loss.tape().backward(loss); }

// ---------------------------------------------------------------- elementwise ops

namespace detail {

inline void same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw InvalidInput("operands recorded on different tapes");
}

// Binary elementwise op with scalar-tensor broadcasting only.
template <typename Fwd, typename DA, typename DB>
Var binary(const char* name, Var a, Var b, Fwd fwd, DA da, DB db) {
  same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool xs = x.numel() == 1 && x.is_scalar(), ys = y.numel() == 1 && y.is_scalar();
  if (x.shape() != y.shape() && !xs && !ys)
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(y.shape()));
  const Shape out_shape = (xs && !ys) ? y.shape() : x.shape();
  Tensor out(out_shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x[xs ? 0 : i], y[ys ? 0 : i]);
  return a.tape().record(std::move(out), {a.id(), b.id()}, [xs, ys, da, db](const BackwardContext& c) {
    const Tensor& x = *c.in[0];
    const Tensor& y = *c.in[1];
    for (std::size_t i = 0; i < c.gout.numel(); ++i) {
      const double xv = x[xs ? 0 : i], yv = y[ys ? 0 : i], g = c.gout[i];
      if (c.gin[0]) (*c.gin[0])[xs ? 0 : i] += g * da(xv, yv);
      if (c.gin[1]) (*c.gin[1])[ys ? 0 : i] += g * db(xv, yv);
    }
  });
}

template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
  return a.tape().record(std::move(out), {a.id()}, [deriv](const BackwardContext& c) {
    if (!c.gin[0]) return;
    const Tensor& x = *c.in[0];
    for (std::size_t i = 0; i < c.gout.numel(); ++i) (*c.gin[0])[i] += c.gout[i] * deriv(x[i], c.out[i]);
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary("add", a, b, [](double x, double y) { return x + y; },
                        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary("sub", a, b, [](double x, double y) { return x - y; },
                        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary("mul", a, b, [](double x, double y) { return x * y; },
                        [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary("div", a, b, [](double x, double y) { return x / y; },
                        [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Var scalar_mul(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw InvalidInput("log: non-positive input");
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var leaky_relu(Var a, double slope) {
  return detail::unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                       [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                       [](double, double y) { return y * (1.0 - y); });
}

// log(1 + exp(x)), evaluated without overflow.
inline Var softplus(Var a) {
  return detail::unary(a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
                       [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline constexpr double kClampSmoothMargin = 0.01;

// Identity on [m, 1-m], tanh-shaped saturation outside, so the output stays in
// [0,1] with a continuous unit-slope join. |clamp_smooth(x) - clamp(x,0,1)| < m.
inline double clamp_smooth_value(double x, double m = kClampSmoothMargin) {
  if (x < m) return m - m * std::tanh((m - x) / m);
  if (x > 1.0 - m) return 1.0 - m + m * std::tanh((x - 1.0 + m) / m);
  return x;
}

inline Var clamp_smooth(Var a, double m = kClampSmoothMargin) {
  return detail::unary(a, [m](double x) { return clamp_smooth_value(x, m); },
                       [m](double x, double) {
                         if (x < m) {
                           const double t = std::tanh((m - x) / m);
                           return 1.0 - t * t;
                         }
                         if (x > 1.0 - m) {
                           const double t = std::tanh((x - 1.0 + m) / m);
                           return 1.0 - t * t;
                         }
                         return 1.0;
                       });
}

// ---------------------------------------------------------------- reductions

inline Var mean(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  return a.tape().record(Tensor::scalar(s / n), {a.id()}, [n](const BackwardContext& c) {
    if (!c.gin[0]) return;
    const double g = c.gout[0] / n;
    for (double& v : c.gin[0]->data()) v += g;
  });
}

// Sample covariance of all elements, (n-1) normalization.
inline Var covariance(Var a, Var b) {
  detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape())
    throw ShapeError("covariance: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  const std::size_t n = x.numel();
  if (n < 2) throw InvalidInput("covariance: needs at least 2 elements");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (x[i] - mx) * (y[i] - my);
  const double denom = static_cast<double>(n - 1);
  return a.tape().record(Tensor::scalar(s / denom), {a.id(), b.id()}, [mx, my, denom](const BackwardContext& c) {
    const Tensor& x = *c.in[0];
    const Tensor& y = *c.in[1];
    const double g = c.gout[0] / denom;
    // d/dx_i sum (x-mx)(y-my) = (y_i - my); the mean terms cancel.
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (c.gin[0]) (*c.gin[0])[i] += g * (y[i] - my);
      if (c.gin[1]) (*c.gin[1])[i] += g * (x[i] - mx);
    }
  });
}

inline Var variance(Var a) {
  const Tensor& x = a.value();
  const std::size_t n = x.numel();
  if (n < 2) throw InvalidInput("variance: needs at least 2 elements");
  double m = 0.0;
  for (double v : x.data()) m += v;
  m /= static_cast<double>(n);
  double s = 0.0;
  for (double v : x.data()) s += (v - m) * (v - m);
  const double denom = static_cast<double>(n - 1);
  return a.tape().record(Tensor::scalar(s / denom), {a.id()}, [m, denom](const BackwardContext& c) {
    if (!c.gin[0]) return;
    const Tensor& x = *c.in[0];
    const double g = 2.0 * c.gout[0] / denom;
    for (std::size_t i = 0; i < x.numel(); ++i) (*c.gin[0])[i] += g * (x[i] - m);
  });
}

// ---------------------------------------------------------------- spatial ops

namespace detail {

inline void require_nchw(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + ": expected NCHW tensor, got " + shape_string(t.shape()));
}

// Dot product with four fixed partial sums (deterministic and vectorizable).
inline double dot_strided(const double* a, const double* b, std::size_t n, std::size_t bstride) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  if (bstride == 1) {
    for (; i + 4 <= n; i += 4) {
      s0 += a[i] * b[i];
      s1 += a[i + 1] * b[i + 1];
      s2 += a[i + 2] * b[i + 2];
      s3 += a[i + 3] * b[i + 3];
    }
  }
  for (; i < n; ++i) s0 += a[i] * b[i * bstride];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

// "Same"-padded 2-D convolution (zero padding k/2), square odd kernels.
// x: [N,C,H,W], weight: [O,C,k,k], bias: [O]. Output [N,O,Ho,Wo] with
// Ho = (H + 2p - k)/stride + 1.
inline Var conv2d(Var x, Var weight, Var bias, int stride = 1) {
  detail::same_tape(x, weight);
  detail::same_tape(x, bias);
  const Tensor& in = x.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  detail::require_nchw(in, "conv2d input");
  detail::require_nchw(w, "conv2d weight");
  if (stride < 1) throw InvalidInput("conv2d: stride must be >= 1");
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C)
    throw ShapeError("conv2d: input " + shape_string(in.shape()) + " incompatible with weight " + shape_string(w.shape()));
  if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd, got " + shape_string(w.shape()));
  if (b.rank() != 1 || b.dim(0) != O)
    throw ShapeError("conv2d: bias " + shape_string(b.shape()) + " incompatible with weight " + shape_string(w.shape()));
  const long p = static_cast<long>(k / 2), s = stride;
  if (static_cast<long>(H) + 2 * p < static_cast<long>(k) || static_cast<long>(W) + 2 * p < static_cast<long>(k))
    throw ShapeError("conv2d: input smaller than kernel");
  const std::size_t Ho = static_cast<std::size_t>((static_cast<long>(H) + 2 * p - static_cast<long>(k)) / s + 1);
  const std::size_t Wo = static_cast<std::size_t>((static_cast<long>(W) + 2 * p - static_cast<long>(k)) / s + 1);

  struct Geometry {
    std::size_t N, C, H, W, O, k, Ho, Wo;
    long p, s;
    // Valid output column range [lo, hi) for kernel column kx.
    std::pair<std::size_t, std::size_t> cols(std::size_t kx) const {
      const long off = static_cast<long>(kx) - p;
      long lo = off >= 0 ? 0 : (-off + s - 1) / s;
      long hi = (static_cast<long>(W) - 1 - off) / s + 1;
      hi = std::min<long>(hi, static_cast<long>(Wo));
      if (static_cast<long>(W) - 1 - off < 0) hi = 0;
      return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
    }
  };
  const Geometry g{N, C, H, W, O, k, Ho, Wo, p, s};

  Tensor out(Shape{N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        double* orow = &out[((n * O + o) * Ho + oy) * Wo];
        std::fill(orow, orow + Wo, b[o]);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - p;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const double* irow = &in[((n * C + c) * H + static_cast<std::size_t>(iy)) * W];
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double wv = w[((o * C + c) * k + ky) * k + kx];
              const auto [lo, hi] = g.cols(kx);
              const long off = static_cast<long>(kx) - p;
              if (lo >= hi) continue;
              if (s == 1) {
                const double* src = irow + (static_cast<long>(lo) + off);
                double* dst = orow + lo;
                for (std::size_t j = 0; j < hi - lo; ++j) dst[j] += wv * src[j];
              } else {
                for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[static_cast<long>(ox) * s + off];
              }
            }
          }
      }

  return x.tape().record(std::move(out), {x.id(), weight.id(), bias.id()}, [g](const BackwardContext& c) {
    const Tensor& in = *c.in[0];
    const Tensor& w = *c.in[1];
    Tensor* gx = c.gin[0];
    Tensor* gw = c.gin[1];
    Tensor* gb = c.gin[2];
    const auto [N, C, H, W, O, k, Ho, Wo, p, s] = g;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const double* grow = &c.gout[((n * O + o) * Ho + oy) * Wo];
          if (gb) {
            double sb = 0.0;
            for (std::size_t ox = 0; ox < Wo; ++ox) sb += grow[ox];
            (*gb)[o] += sb;
          }
          if (!gx && !gw) continue;
          for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - p;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const std::size_t row_base = ((n * C + ch) * H + static_cast<std::size_t>(iy)) * W;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t widx = ((o * C + ch) * k + ky) * k + kx;
                const auto [lo, hi] = g.cols(kx);
                if (lo >= hi) continue;
                const long off = static_cast<long>(kx) - p;
                const std::size_t first = static_cast<std::size_t>(static_cast<long>(lo) * s + off);
                if (gw) (*gw)[widx] += detail::dot_strided(grow + lo, &in[row_base + first], hi - lo, static_cast<std::size_t>(s));
                if (gx) {
                  const double wv = w[widx];
                  double* dst = &(*gx)[row_base + first];
                  if (s == 1) {
                    for (std::size_t j = 0; j < hi - lo; ++j) dst[j] += wv * grow[lo + j];
                  } else {
                    for (std::size_t j = 0; j < hi - lo; ++j) dst[j * static_cast<std::size_t>(s)] += wv * grow[lo + j];
                  }
                }
              }
            }
        }
  });
}

// Nearest-neighbour upsampling by an integer factor on H and W.
inline Var upsample_nearest(Var x, int r) {
  const Tensor& in = x.value();
  detail::require_nchw(in, "upsample_nearest");
  if (r < 1) throw InvalidInput("upsample_nearest: factor must be >= 1");
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3), ur = static_cast<std::size_t>(r);
  Tensor out(Shape{N, C, H * ur, W * ur});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < H * ur; ++y)
      for (std::size_t xx = 0; xx < W * ur; ++xx)
        out[(nc * H * ur + y) * W * ur + xx] = in[(nc * H + y / ur) * W + xx / ur];
  return x.tape().record(std::move(out), {x.id()}, [=](const BackwardContext& c) {
    if (!c.gin[0]) return;
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t y = 0; y < H * ur; ++y)
        for (std::size_t xx = 0; xx < W * ur; ++xx)
          (*c.gin[0])[(nc * H + y / ur) * W + xx / ur] += c.gout[(nc * H * ur + y) * W * ur + xx];
  });
}

// r x r block averaging on H and W.
inline Var avg_pool(Var x, int r) {
  const Tensor& in = x.value();
  detail::require_nchw(in, "avg_pool");
  if (r < 1) throw InvalidInput("avg_pool: factor must be >= 1");
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3), ur = static_cast<std::size_t>(r);
  if (H % ur != 0 || W % ur != 0)
    throw ShapeError("avg_pool: shape " + shape_string(in.shape()) + " not divisible by " + std::to_string(r));
  const std::size_t Ho = H / ur, Wo = W / ur;
  const double inv = 1.0 / static_cast<double>(ur * ur);
  Tensor out(Shape{N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(nc * Ho + y / ur) * Wo + xx / ur] += in[(nc * H + y) * W + xx];
  for (double& v : out.data()) v *= inv;
  return x.tape().record(std::move(out), {x.id()}, [=](const BackwardContext& c) {
    if (!c.gin[0]) return;
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
          (*c.gin[0])[(nc * H + y) * W + xx] += inv * c.gout[(nc * Ho + y / ur) * Wo + xx / ur];
  });
}

// Selects channel k of an NCHW tensor as [N,1,H,W].
inline Var channel(Var x, std::size_t k) {
  const Tensor& in = x.value();
  detail::require_nchw(in, "channel");
  const std::size_t N = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
  if (k >= C) throw ShapeError("channel: index " + std::to_string(k) + " out of range for " + shape_string(in.shape()));
  Tensor out(Shape{N, 1, in.dim(2), in.dim(3)});
  for (std::size_t n = 0; n < N; ++n)
    std::copy_n(&in[(n * C + k) * HW], HW, &out[n * HW]);
  return x.tape().record(std::move(out), {x.id()}, [=](const BackwardContext& c) {
    if (!c.gin[0]) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) (*c.gin[0])[(n * C + k) * HW + i] += c.gout[n * HW + i];
  });
}

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update, then gradients are zeroed.
inline void adam_step(ParameterSet& params, const AdamConfig& cfg) {
  for (auto& [name, p] : params)
    if (!p.grad.all_finite()) throw TrainingDivergence("adam_step: non-finite gradient for '" + name + "'", p.step + 1);
  for (auto& [name, p] : params) {
    ++p.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
      p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.first_moment[i] / bc1;
      const double vhat = p.second_moment[i] / bc2;
      p.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    if (!p.value.all_finite()) throw TrainingDivergence("adam_step: parameter '" + name + "' overflowed", p.step);
  }
  params.zero_grad();
}

// ---------------------------------------------------------------- checkpoints
//
// "PFCK", u32 count, then per parameter (name order): u16 name length, name
// bytes, u8 rank, u32 dims[rank], float64 LE data. Values only.

inline std::vector<std::uint8_t> encode_checkpoint(const ParameterSet& params) {
  std::vector<std::uint8_t> out{'P', 'F', 'C', 'K'};
  auto put = [&out](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(params.size(), 4);
  for (const auto& [name, p] : params) {
    if (name.size() > 0xffff) throw InvalidInput("checkpoint: parameter name too long");
    put(name.size(), 2);
    out.insert(out.end(), name.begin(), name.end());
    put(p.value.rank(), 1);
    for (auto d : p.value.shape()) put(d, 4);
    for (double v : p.value.data()) put(std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

inline ParameterSet decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n)
      throw FormatError("checkpoint: truncated " + std::string(what) + " at offset " + std::to_string(pos) +
                        ": expected " + std::to_string(n) + " bytes, got " + std::to_string(bytes.size() - pos));
  };
  auto get = [&](int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(n);
    return v;
  };
  need(4, "magic");
  if (std::memcmp(bytes.data(), "PFCK", 4) != 0) throw FormatError("checkpoint: bad magic at offset 0");
  pos = 4;
  const auto count = get(4, "parameter count");
  ParameterSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get(2, "name length");
    need(len, "name");
    std::string name(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + len));
    pos += len;
    const auto rank = get(1, "rank");
    if (rank > 4) throw FormatError("checkpoint: rank " + std::to_string(rank) + " above 4 at offset " + std::to_string(pos - 1));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      shape.push_back(get(4, "dimension"));
      numel *= shape.back();
      if (numel > (bytes.size() / 8) + 1) throw FormatError("checkpoint: dimension overflow at offset " + std::to_string(pos - 4));
    }
    need(numel * 8, "tensor data");
    std::vector<double> data(numel);
    for (auto& v : data) v = std::bit_cast<double>(get(8, "tensor data"));
    params.add(name, Tensor(std::move(shape), std::move(data)));
  }
  if (pos != bytes.size())
    throw FormatError("checkpoint: " + std::to_string(bytes.size() - pos) + " trailing bytes at offset " + std::to_string(pos));
  return params;
}

inline void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

// FNV-1a 64-bit over the encoded checkpoint, as 16 hex digits.
inline std::string checkpoint_hash(const ParameterSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : encode_checkpoint(params)) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

}  // namespace panfuse::ad

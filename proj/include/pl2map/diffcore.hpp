#pragma once

// Tape-based reverse-mode differentiation over dense row-major tensors.
//
// A Graph records every primitive in creation order, so the tape is already
// topologically sorted: backward() walks it once from the root towards the
// leaves. Graph<float> is used for training, Graph<double> for gradient checks.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pl2map {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(S v) { return Tensor(Shape{}, std::vector<S>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return data_.empty(); }

  // Row view: every leading dimension folded into rows.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> values() { return data_; }
  std::span<const S> values() const { return data_; }
  std::vector<S>& storage() { return data_; }
  const std::vector<S>& storage() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  S& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const S& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  S item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.begin(), data_.end());
    return Tensor<T>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;

template <typename S>
class Graph;

template <typename S>
struct Var {
  Graph<S>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<S>& value() const { return graph->value(id); }
  const Shape& shape() const { return graph->value(id).shape(); }
};

template <typename S>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<S> constant(Tensor<S> value) { return push(std::move(value), false, nullptr); }
  Var<S> param(Tensor<S> value) { return push(std::move(value), true, nullptr); }

  // Records an op. The node needs a gradient iff any input does.
  Var<S> node(Tensor<S> value, std::initializer_list<Var<S>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.graph != this) throw std::logic_error("mixing variables from different graphs");
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor<S>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_.at(id).grad_ready; }

  // Gradient accumulator for a node, zero-initialized on first touch.
  Tensor<S>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.grad_ready) {
      n.grad = Tensor<S>(n.value.shape());
      n.grad_ready = true;
    }
    return n.grad;
  }

  Tensor<S> gradient(Var<S> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad_ready ? n.grad : Tensor<S>(n.value.shape());
  }

  void backward(Var<S> root) {
    if (root.graph != this) throw std::logic_error("root belongs to a different graph");
    if (nodes_[root.id].value.size() != 1)
      throw DimensionError("backward() needs a scalar root, got " + shape_string(root.shape()));
    grad(root.id).fill(S(1));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad_ready && n.backward) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    bool grad_ready = false;
    Backward backward;
  };

  Var<S> push(Tensor<S> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor<S>(), requires_grad, false, std::move(backward)});
    return Var<S>{this, nodes_.size() - 1};
  }

  // deque: references to earlier nodes stay valid while new ones are pushed.
  std::deque<Node> nodes_;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  require(axis < shape.size(), "axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename S>
void check_same(const Var<S>& a, const Var<S>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

// Batched view of a rank-2 or rank-3 tensor as (batch, rows, cols).
struct MatrixBatch {
  std::size_t batch, rows, cols;
};

inline MatrixBatch as_batch(const Shape& s, const char* op) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected rank 2 or 3, got " + shape_string(s));
}

template <typename S, typename F, typename DF>
Var<S> unary(Var<S> x, F f, DF df) {
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.graph->node(std::move(out), {x}, [x, df](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    const Tensor<S>& xv = g.value(x.id);
    const Tensor<S>& yv = g.value(self);
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

template <typename S>
Var<S> constant(Graph<S>& g, Tensor<S> value) {
  return g.constant(std::move(value));
}

template <typename S>
Var<S> zeros(Graph<S>& g, Shape shape) {
  return g.constant(Tensor<S>(std::move(shape)));
}

/// Matrix product. Rank-2 inputs multiply directly; rank-3 inputs are
/// multiplied batch by batch.
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  using detail::require;
  const auto A = detail::as_batch(a.shape(), "matmul");
  const auto B = detail::as_batch(b.shape(), "matmul");
  require(a.shape().size() == b.shape().size(), "matmul: rank mismatch " + shape_string(a.shape()) +
                                                    " x " + shape_string(b.shape()));
  require(A.batch == B.batch, "matmul: batch mismatch");
  require(A.cols == B.rows, "matmul: inner dims disagree " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  Shape out_shape = a.shape().size() == 2 ? Shape{A.rows, B.cols} : Shape{A.batch, A.rows, B.cols};
  Tensor<S> out(out_shape);
  const std::size_t sa = A.rows * A.cols, sb = B.rows * B.cols, so = A.rows * B.cols;
  for (std::size_t k = 0; k < A.batch; ++k) {
    ConstMatrixMap<S> am(a.value().data() + k * sa, A.rows, A.cols);
    ConstMatrixMap<S> bm(b.value().data() + k * sb, B.rows, B.cols);
    MatrixMap<S> om(out.data() + k * so, A.rows, B.cols);
    // Row by row: blocked GEMM rounds edge rows differently, which would make
    // a row's result depend on its position in the set.
    for (Eigen::Index r = 0; r < am.rows(); ++r) om.row(r).noalias() = am.row(r) * bm;
  }
  return a.graph->node(std::move(out), {a, b}, [a, b, A, B](Graph<S>& g, std::size_t self) {
    const std::size_t sa = A.rows * A.cols, sb = B.rows * B.cols, so = A.rows * B.cols;
    const Tensor<S>& go = g.grad(self);
    for (std::size_t k = 0; k < A.batch; ++k) {
      ConstMatrixMap<S> gm(go.data() + k * so, A.rows, B.cols);
      if (g.requires_grad(a.id)) {
        ConstMatrixMap<S> bm(g.value(b.id).data() + k * sb, B.rows, B.cols);
        MatrixMap<S>(g.grad(a.id).data() + k * sa, A.rows, A.cols).noalias() += gm * bm.transpose();
      }
      if (g.requires_grad(b.id)) {
        ConstMatrixMap<S> am(g.value(a.id).data() + k * sa, A.rows, A.cols);
        MatrixMap<S>(g.grad(b.id).data() + k * sb, B.rows, B.cols).noalias() += am.transpose() * gm;
      }
    }
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename S>
Var<S> transpose(Var<S> x) {
  const auto X = detail::as_batch(x.shape(), "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor<S> out(out_shape);
  const std::size_t s = X.rows * X.cols;
  for (std::size_t k = 0; k < X.batch; ++k)
    MatrixMap<S>(out.data() + k * s, X.cols, X.rows) =
        ConstMatrixMap<S>(x.value().data() + k * s, X.rows, X.cols).transpose();
  return x.graph->node(std::move(out), {x}, [x, X](Graph<S>& g, std::size_t self) {
    const std::size_t s = X.rows * X.cols;
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t k = 0; k < X.batch; ++k)
      MatrixMap<S>(gx.data() + k * s, X.rows, X.cols) +=
          ConstMatrixMap<S>(go.data() + k * s, X.cols, X.rows).transpose();
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same(a, b, "add");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.graph->node(std::move(out), {a, b}, [a, b](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    for (Var<S> in : {a, b}) {
      if (!g.requires_grad(in.id)) continue;
      Tensor<S>& gi = g.grad(in.id);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same(a, b, "sub");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.graph->node(std::move(out), {a, b}, [a, b](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    if (g.requires_grad(a.id)) {
      Tensor<S>& ga = g.grad(a.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad(b.id)) {
      Tensor<S>& gb = g.grad(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
    }
  });
}

/// Elementwise (Hadamard) product.
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_same(a, b, "mul");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph->node(std::move(out), {a, b}, [a, b](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    if (g.requires_grad(a.id)) {
      Tensor<S>& ga = g.grad(a.id);
      const Tensor<S>& bv = g.value(b.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(b.id)) {
      Tensor<S>& gb = g.grad(b.id);
      const Tensor<S>& av = g.value(a.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

/// x + bias, with bias broadcast over every row of the last axis.
template <typename S>
Var<S> add_row(Var<S> x, Var<S> bias) {
  const std::size_t n = x.value().cols();
  detail::require(bias.shape() == Shape{n}, "add_row: bias " + shape_string(bias.shape()) +
                                                " does not match last axis of " + shape_string(x.shape()));
  Tensor<S> out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) += bias.value()[c];
  return x.graph->node(std::move(out), {x, bias}, [x, bias](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    if (g.requires_grad(x.id)) {
      Tensor<S>& gx = g.grad(x.id);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    }
    if (g.requires_grad(bias.id)) {
      Tensor<S>& gb = g.grad(bias.id);
      const std::size_t n = gb.size();
      for (std::size_t r = 0; r < go.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += go(r, c);
    }
  });
}

template <typename S>
Var<S> scale(Var<S> x, S factor) {
  return detail::unary(x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
Var<S> shift(Var<S> x, S offset) {
  return detail::unary(x, [offset](S v) { return v + offset; }, [](S, S) { return S(1); });
}

template <typename S>
Var<S> relu(Var<S> x) {
  // Derivative at exactly 0 is taken as 0.
  return detail::unary(x, [](S v) { return v > S(0) ? v : S(0); },
                       [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Var<S> tanh(Var<S> x) {
  return detail::unary(x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Var<S> abs(Var<S> x) {
  return detail::unary(x, [](S v) { return std::abs(v); },
                       [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

/// Softmax along `axis`, with the per-slice maximum subtracted first.
template <typename S>
Var<S> softmax(Var<S> x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      S total = 0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const S e = std::exp(xv[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= total;
    }
  }
  return x.graph->node(std::move(out), {x}, [x, sp](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    const Tensor<S>& y = g.value(self);
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        S dot = 0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += go[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t k = base + j * sp.inner;
          gx[k] += y[k] * (go[k] - dot);
        }
      }
    }
  });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Normalizes each row of the last axis to zero mean and unit variance, then
/// applies gain and bias.
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias) {
  const std::size_t n = x.value().cols();
  detail::require(n >= 2, "layer_norm: normalized axis must have length >= 2");
  detail::require(gain.shape() == Shape{n} && bias.shape() == Shape{n},
                  "layer_norm: gain/bias must have shape [" + std::to_string(n) + "]");
  const Tensor<S>& xv = x.value();
  const std::size_t rows = xv.rows();
  Tensor<S> out(xv.shape());
  Tensor<S> xhat(xv.shape());
  std::vector<S> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    S mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xv(r, c);
    mean /= S(n);
    S var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= S(n);
    inv_std[r] = S(1) / std::sqrt(var + S(kLayerNormEpsilon));
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mean) * inv_std[r];
      out(r, c) = xhat(r, c) * gain.value()[c] + bias.value()[c];
    }
  }
  return x.graph->node(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<S>& g, std::size_t self) {
        const Tensor<S>& go = g.grad(self);
        const std::size_t n = go.cols();
        const std::size_t rows = go.rows();
        if (g.requires_grad(gain.id) || g.requires_grad(bias.id)) {
          Tensor<S>& gg = g.grad(gain.id);
          Tensor<S>& gb = g.grad(bias.id);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) {
              gg[c] += go(r, c) * xhat(r, c);
              gb[c] += go(r, c);
            }
        }
        if (g.requires_grad(x.id)) {
          Tensor<S>& gx = g.grad(x.id);
          const Tensor<S>& gv = g.value(gain.id);
          for (std::size_t r = 0; r < rows; ++r) {
            S mean_d = 0, mean_dx = 0;
            for (std::size_t c = 0; c < n; ++c) {
              const S d = go(r, c) * gv[c];
              mean_d += d;
              mean_dx += d * xhat(r, c);
            }
            mean_d /= S(n);
            mean_dx /= S(n);
            for (std::size_t c = 0; c < n; ++c)
              gx(r, c) += inv_std[r] * (go(r, c) * gv[c] - mean_d - xhat(r, c) * mean_dx);
          }
        }
      });
}

template <typename S>
Var<S> concat(Var<S> a, Var<S> b, std::size_t axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool ok = as.size() == bs.size() && axis < as.size();
  for (std::size_t i = 0; ok && i < as.size(); ++i) ok = i == axis || as[i] == bs[i];
  detail::require(ok, "concat: incompatible shapes " + shape_string(as) + " and " + shape_string(bs) +
                          " along axis " + std::to_string(axis));
  const auto sa = detail::split_axis(as, axis);
  const auto sb = detail::split_axis(bs, axis);
  Shape os = as;
  os[axis] += bs[axis];
  Tensor<S> out(os);
  const std::size_t ca = sa.n * sa.inner, cb = sb.n * sb.inner;
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(a.value().data() + o * ca, ca, out.data() + o * (ca + cb));
    std::copy_n(b.value().data() + o * cb, cb, out.data() + o * (ca + cb) + ca);
  }
  return a.graph->node(std::move(out), {a, b}, [a, b, outer = sa.outer, ca, cb](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    if (g.requires_grad(a.id)) {
      Tensor<S>& ga = g.grad(a.id);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < ca; ++i) ga[o * ca + i] += go[o * (ca + cb) + i];
    }
    if (g.requires_grad(b.id)) {
      Tensor<S>& gb = g.grad(b.id);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < cb; ++i) gb[o * cb + i] += go[o * (ca + cb) + ca + i];
    }
  });
}

/// Contiguous sub-range [start, start + length) along `axis`.
template <typename S>
Var<S> slice(Var<S> x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = detail::split_axis(x.shape(), axis);
  detail::require(start + length <= sp.n, "slice: range out of bounds for " + shape_string(x.shape()));
  Shape os = x.shape();
  os[axis] = length;
  Tensor<S> out(os);
  const std::size_t src = sp.n * sp.inner, dst = length * sp.inner, off = start * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.value().data() + o * src + off, dst, out.data() + o * dst);
  return x.graph->node(std::move(out), {x}, [x, outer = sp.outer, src, dst, off](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < dst; ++i) gx[o * src + off + i] += go[o * dst + i];
  });
}

template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  Tensor<S> out = x.value().reshaped(std::move(shape));
  return x.graph->node(std::move(out), {x}, [x](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
  });
}

/// Mean over `axis`; the axis is removed from the result shape.
template <typename S>
Var<S> mean(Var<S> x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  detail::require(sp.n > 0, "mean: empty axis");
  Shape os = x.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<S> out(os);
  const Tensor<S>& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += xv[(o * sp.n + j) * sp.inner + in];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= S(sp.n);
  return x.graph->node(std::move(out), {x}, [x, sp](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad(x.id);
    const S w = S(1) / S(sp.n);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t in = 0; in < sp.inner; ++in)
          gx[(o * sp.n + j) * sp.inner + in] += go[o * sp.inner + in] * w;
  });
}

/// Sum of every element, as a rank-0 tensor.
template <typename S>
Var<S> sum(Var<S> x) {
  S total = 0;
  for (S v : x.value().values()) total += v;
  return x.graph->node(Tensor<S>::scalar(total), {x}, [x](Graph<S>& g, std::size_t self) {
    const S go = g.grad(self)[0];
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
  });
}

/// Dot product of x with a constant weight tensor of the same shape.
template <typename S>
Var<S> weighted_sum(Var<S> x, const Tensor<S>& weights) {
  detail::require(x.shape() == weights.shape(), "weighted_sum: weights shape mismatch");
  S total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += x.value()[i] * weights[i];
  return x.graph->node(Tensor<S>::scalar(total), {x}, [x, weights](Graph<S>& g, std::size_t self) {
    const S go = g.grad(self)[0];
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go * weights[i];
  });
}

/// Multi-head scaled dot-product attention: for each head h (the column block
/// of width D/heads) softmax(q_h k_h^T / sqrt(D/heads)) v_h, concatenated back
/// to [..., Lq, D]. Rank 2, or rank 3 with a shared leading batch axis. Scores,
/// softmax and the sums over keys are carried in double, so the result does
/// not depend on the order of the keys even for float tensors.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, std::size_t heads) {
  using Md = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
  using Block = Eigen::Map<const RowMatrix<S>, 0, Eigen::OuterStride<>>;
  using MutBlock = Eigen::Map<RowMatrix<S>, 0, Eigen::OuterStride<>>;
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  const std::size_t r = qs.size();
  bool ok = (r == 2 || r == 3) && ks.size() == r && v.shape() == ks && qs.back() == ks.back() && heads > 0 &&
            qs.back() % heads == 0 && (r == 2 || qs[0] == ks[0]);
  detail::require(ok, "attention: incompatible shapes " + shape_string(qs) + ", " + shape_string(ks) + ", " +
                          shape_string(v.shape()) + " for " + std::to_string(heads) + " heads");
  const std::size_t batch = r == 3 ? qs[0] : 1, lq = qs[r - 2], lk = ks[r - 2], D = qs.back(), dh = D / heads;
  detail::require(lk > 0, "attention: no keys");
  const double scale_factor = 1.0 / std::sqrt(double(dh));

  auto block = [&](const Tensor<S>& t, std::size_t b, std::size_t h, std::size_t rows) {
    return Block(t.data() + b * rows * D + h * dh, Eigen::Index(rows), Eigen::Index(dh), Eigen::OuterStride<>(D));
  };
  auto weights = std::make_shared<std::vector<Md>>();
  weights->reserve(batch * heads);
  Tensor<S> out(qs);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const Md qd = block(q.value(), b, h, lq).template cast<double>();
      const Md kd = block(k.value(), b, h, lk).template cast<double>();
      const Md vd = block(v.value(), b, h, lk).template cast<double>();
      Md a = (qd * kd.transpose()) * scale_factor;
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        a.row(i).array() = (a.row(i).array() - a.row(i).maxCoeff()).exp();
        a.row(i) /= a.row(i).sum();
      }
      MutBlock(out.data() + b * lq * D + h * dh, Eigen::Index(lq), Eigen::Index(dh), Eigen::OuterStride<>(D)) =
          (a * vd).template cast<S>();
      weights->push_back(std::move(a));
    }
  }
  return q.graph->node(std::move(out), {q, k, v},
                       [q, k, v, weights, batch, heads, lq, lk, D, dh, scale_factor](Graph<S>& g, std::size_t self) {
    auto cblock = [&](const Tensor<S>& t, std::size_t b, std::size_t h, std::size_t rows) {
      return Block(t.data() + b * rows * D + h * dh, Eigen::Index(rows), Eigen::Index(dh), Eigen::OuterStride<>(D));
    };
    auto accumulate = [&](Var<S> x, std::size_t b, std::size_t h, std::size_t rows, const Md& delta) {
      Tensor<S>& gx = g.grad(x.id);
      MutBlock(gx.data() + b * rows * D + h * dh, Eigen::Index(rows), Eigen::Index(dh), Eigen::OuterStride<>(D)) +=
          delta.template cast<S>();
    };
    const Tensor<S>& go = g.grad(self);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const Md& a = (*weights)[b * heads + h];
        const Md dout = cblock(go, b, h, lq).template cast<double>();
        const Md vd = cblock(v.value(), b, h, lk).template cast<double>();
        if (g.requires_grad(v.id)) accumulate(v, b, h, lk, a.transpose() * dout);
        if (!g.requires_grad(q.id) && !g.requires_grad(k.id)) continue;
        const Md da = dout * vd.transpose();
        Md ds = a.cwiseProduct(da);
        const Eigen::VectorXd row_dot = ds.rowwise().sum();
        ds -= a.cwiseProduct(row_dot.replicate(1, a.cols()));
        ds *= scale_factor;
        if (g.requires_grad(q.id)) accumulate(q, b, h, lq, ds * cblock(k.value(), b, h, lk).template cast<double>());
        if (g.requires_grad(k.id))
          accumulate(k, b, h, lk, ds.transpose() * cblock(q.value(), b, h, lq).template cast<double>());
      }
    }
  });
}

template <typename S>
struct Dense {
  Var<S> weight;  // [in, out]
  Var<S> bias;    // [out]
};

/// x·W + b over the last axis of x (any leading shape).
template <typename S>
Var<S> linear(Var<S> x, const Dense<S>& layer) {
  const Shape& xs = x.shape();
  detail::require(!xs.empty() && layer.weight.shape().size() == 2 && xs.back() == layer.weight.shape()[0],
                  "linear: input " + shape_string(xs) + " does not match weight " +
                      shape_string(layer.weight.shape()));
  const std::size_t out_dim = layer.weight.shape()[1];
  Var<S> flat = xs.size() == 2 ? x : reshape(x, Shape{x.value().rows(), xs.back()});
  Var<S> y = add_row(matmul(flat, layer.weight), layer.bias);
  if (xs.size() == 2) return y;
  Shape os = xs;
  os.back() = out_dim;
  return reshape(y, os);
}

/// Affine layers with ReLU between them (none after the last).
template <typename S>
Var<S> mlp_forward(Var<S> x, std::span<const Dense<S>> layers) {
  detail::require(!layers.empty(), "mlp_forward: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = linear(x, layers[i]);
    if (i + 1 < layers.size()) x = relu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double step = 1e-6;
  // One-sided slopes differing by more than this (relative) mark a kink.
  double kink_tolerance = 1e-2;
  // Denominator floor of the relative error. Central differences carry an
  // absolute round-off of roughly eps*|f|/h, so entries smaller than this are
  // compared absolutely (error / floor).
  double denominator_floor = 1e-3;
};

struct GradCheckEntry {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
  bool kink = false;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t flagged = 0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> kinks;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

using Objective = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

/// Compares tape gradients of a scalar objective against central differences
/// (f(p+h) - f(p-h)) / 2h for every parameter entry. Entries where the forward
/// and backward one-sided slopes disagree sit on a kink; they are reported in
/// `kinks` and left out of max_rel_error.
inline GradCheckResult grad_check(const Objective& f, std::vector<Tensor<double>> params,
                                  const GradCheckOptions& opt = {}) {
  auto evaluate = [&](bool with_grads, std::vector<Tensor<double>>* grads) {
    Graph<double> g;
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(g.param(p));
    Var<double> out = f(g, vars);
    if (out.value().size() != 1) throw CheckError("grad_check: objective is not scalar");
    const double v = out.value()[0];
    if (!std::isfinite(v)) throw CheckError("grad_check: objective is not finite");
    if (with_grads) {
      g.backward(out);
      for (const auto& var : vars) grads->push_back(g.gradient(var));
    }
    return v;
  };

  std::vector<Tensor<double>> analytic;
  const double f0 = evaluate(true, &analytic);
  GradCheckResult result;
  const double h = opt.step;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      params[p][i] = orig + h;
      const double fp = evaluate(false, nullptr);
      params[p][i] = orig - h;
      const double fm = evaluate(false, nullptr);
      params[p][i] = orig;

      GradCheckEntry e;
      e.param = p;
      e.index = i;
      e.analytic = analytic[p][i];
      e.numeric = (fp - fm) / (2 * h);
      const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
      const double slope_scale = std::max({1.0, std::abs(fwd), std::abs(bwd)});
      e.kink = std::abs(fwd - bwd) > opt.kink_tolerance * slope_scale;
      const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), opt.denominator_floor});
      e.rel_error = std::abs(e.analytic - e.numeric) / denom;
      if (e.kink) {
        ++result.flagged;
        result.kinks.push_back(e);
        continue;
      }
      ++result.checked;
      if (e.rel_error > result.max_rel_error || result.checked == 1) {
        result.max_rel_error = std::max(result.max_rel_error, e.rel_error);
        if (e.rel_error >= result.worst.rel_error) result.worst = e;
      }
    }
  }
  return result;
}

}  // namespace pl2map

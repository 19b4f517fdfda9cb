#pragma once

// Reverse-mode differentiable arrays. Every op records a backward closure on
// its output node; Tensor::backward() replays them in reverse topological
// order. 4-D activations use the channel-major batch layout (C, N, H, W) so a
// convolution over a whole batch is one GEMM per chunk of images.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmode/errors.hpp"

namespace mmode::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {
inline thread_local bool recording = true;
}

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::recording) { detail::recording = false; }
  ~NoGradGuard() { detail::recording = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::recording; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(numel_of(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != numel_of(shape))
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  /// Gradient buffer; empty until a backward pass reached this tensor.
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

  /// Value copy with no graph history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  /// Seeds d(self)/d(self) = 1 and propagates to every reachable leaf.
  void backward() {
    if (numel() != 1) throw ShapeError("backward() needs a scalar root");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward) {
        n->ensure_grad();
        n->backward();
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// Creates the output node of an op; records parents only when a gradient can flow.
template <class T>
std::shared_ptr<Node<T>> make_result(Shape shape,
                                     std::initializer_list<const Tensor<T>*> inputs) {
  auto out = std::make_shared<Node<T>>();
  out->value.assign(numel_of(shape), T(0));
  out->shape = std::move(shape);
  if (nn::grad_enabled()) {
    for (const auto* in : inputs)
      if (in->requires_grad()) out->requires_grad = true;
    if (out->requires_grad)
      for (const auto* in : inputs) out->parents.push_back(in->ptr());
  }
  return out;
}

template <class T>
std::shared_ptr<Node<T>> make_result(Shape shape, const std::vector<Tensor<T>>& inputs) {
  auto out = std::make_shared<Node<T>>();
  out->value.assign(numel_of(shape), T(0));
  out->shape = std::move(shape);
  if (nn::grad_enabled()) {
    for (const auto& in : inputs)
      if (in.requires_grad()) out->requires_grad = true;
    if (out->requires_grad)
      for (const auto& in : inputs) out->parents.push_back(in.ptr());
  }
  return out;
}

/// Grad buffer of a parent, or nullptr if it does not take gradients.
template <class T>
T* grad_of(Node<T>* n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd dfdx_from_xy) {
  auto out = detail::make_result<T>(x.shape(), {&x});
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = fwd(xv[i]);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in, dfdx_from_xy] {
      T* gx = detail::grad_of(in);
      if (!gx) return;
      for (std::size_t i = 0; i < o->value.size(); ++i)
        gx[i] += o->grad[i] * dfdx_from_xy(in->value[i], o->value[i]);
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary_op(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_result<T>(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] + b.data()[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>*na = a.node(), *nb = b.node();
    out->backward = [o, na, nb] {
      for (Node<T>* p : {na, nb})
        if (T* g = detail::grad_of(p))
          for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_result<T>(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] * b.data()[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>*na = a.node(), *nb = b.node();
    out->backward = [o, na, nb] {
      if (T* g = detail::grad_of(na))
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * nb->value[i];
      if (T* g = detail::grad_of(nb))
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * na->value[i];
    };
  }
  return Tensor<T>(out);
}

/// Sum of all elements, weighted elementwise by `w` when given.
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::span<const T> w = {}) {
  detail::require(w.empty() || w.size() == x.numel(), "sum: weight size mismatch");
  auto out = detail::make_result<T>({1}, {&x});
  T acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += (w.empty() ? T(1) : w[i]) * x.data()[i];
  out->value[0] = acc;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    std::vector<T> wv(w.begin(), w.end());
    out->backward = [o, in, wv = std::move(wv)] {
      if (T* g = detail::grad_of(in))
        for (std::size_t i = 0; i < in->value.size(); ++i)
          g[i] += o->grad[0] * (wv.empty() ? T(1) : wv[i]);
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------- reshaping

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel_of(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = detail::make_result<T>(std::move(shape), {&x});
  std::copy(x.data().begin(), x.data().end(), out->value.begin());
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in] {
      if (T* g = detail::grad_of(in))
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
    };
  }
  return Tensor<T>(out);
}

/// Column-wise concatenation of [B, K_i] matrices.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
    cols += p.dim(1);
  }
  auto out = detail::make_result<T>({rows, cols}, parts);
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t k = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * k, k, out->value.data() + r * cols + off);
    off += k;
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, rows, cols, offsets] {
      for (std::size_t i = 0; i < o->parents.size(); ++i) {
        Node<T>* p = o->parents[i].get();
        T* g = detail::grad_of(p);
        if (!g) continue;
        const std::size_t k = p->shape[1];
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < k; ++c) g[r * k + c] += o->grad[r * cols + offsets[i] + c];
      }
    };
  }
  return Tensor<T>(out);
}

/// Columns [start, start+len) of a [B, K] matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
  detail::require(x.rank() == 2 && start + len <= x.dim(1), "slice_cols: out of range");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto out = detail::make_result<T>({rows, len}, {&x});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + start, len, out->value.data() + r * len);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in, rows, cols, start, len] {
      if (T* g = detail::grad_of(in))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < len; ++c) g[r * cols + start + c] += o->grad[r * len + c];
    };
  }
  return Tensor<T>(out);
}

/// Rows offset, offset+stride, ... of a [R, K] matrix.
template <class T>
Tensor<T> take_rows_strided(const Tensor<T>& x, std::size_t offset, std::size_t stride) {
  detail::require(x.rank() == 2 && stride > 0 && offset < stride && x.dim(0) % stride == 0,
                  "take_rows_strided: bad arguments");
  const std::size_t n = x.dim(0) / stride, k = x.dim(1);
  auto out = detail::make_result<T>({n, k}, {&x});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data().data() + (i * stride + offset) * k, k, out->value.data() + i * k);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in, n, k, offset, stride] {
      if (T* g = detail::grad_of(in))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < k; ++c) g[(i * stride + offset) * k + c] += o->grad[i * k + c];
    };
  }
  return Tensor<T>(out);
}

/// Mean over consecutive groups of `group` rows: [N*G, K] -> [N, K].
template <class T>
Tensor<T> mean_row_groups(const Tensor<T>& x, std::size_t group) {
  detail::require(x.rank() == 2 && group > 0 && x.dim(0) % group == 0,
                  "mean_row_groups: bad arguments");
  const std::size_t n = x.dim(0) / group, k = x.dim(1);
  auto out = detail::make_result<T>({n, k}, {&x});
  const T inv = T(1) / static_cast<T>(group);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < group; ++g)
      for (std::size_t c = 0; c < k; ++c)
        out->value[i * k + c] += x.data()[(i * group + g) * k + c];
  for (auto& v : out->value) v *= inv;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in, n, k, group, inv] {
      if (T* gx = detail::grad_of(in))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t g = 0; g < group; ++g)
            for (std::size_t c = 0; c < k; ++c) gx[(i * group + g) * k + c] += inv * o->grad[i * k + c];
    };
  }
  return Tensor<T>(out);
}

/// Row-wise x / max(||x||_2, eps).
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  detail::require(x.rank() == 2, "l2_normalize_rows: expects [B, K]");
  const std::size_t rows = x.dim(0), k = x.dim(1);
  auto out = detail::make_result<T>(x.shape(), {&x});
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * k;
    T ss = 0;
    for (std::size_t c = 0; c < k; ++c) ss += xr[c] * xr[c];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < k; ++c) out->value[r * k + c] = xr[c] / norms[r];
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in, rows, k, norms = std::move(norms)] {
      T* g = detail::grad_of(in);
      if (!g) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = o->value.data() + r * k;
        const T* gy = o->grad.data() + r * k;
        T dot = 0;
        for (std::size_t c = 0; c < k; ++c) dot += gy[c] * y[c];
        for (std::size_t c = 0; c < k; ++c) g[r * k + c] += (gy[c] - y[c] * dot) / norms[r];
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------- dense

/// y = x W^T + b with x [B, In], W [Out, In], b [Out].
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
                  "dense: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  detail::require(b.numel() == w.dim(0), "dense: bias size mismatch");
  const auto B = static_cast<Eigen::Index>(x.dim(0)), In = static_cast<Eigen::Index>(x.dim(1)),
             Out = static_cast<Eigen::Index>(w.dim(0));
  auto out = detail::make_result<T>({x.dim(0), w.dim(0)}, {&x, &w, &b});
  {
    detail::CMapMat<T> X(x.data().data(), B, In);
    detail::CMapMat<T> W(w.data().data(), Out, In);
    detail::MapMat<T> Y(out->value.data(), B, Out);
    Y.noalias() = X * W.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(b.data().data(), Out);
    Y.rowwise() += bias;
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>*nx = x.node(), *nw = w.node(), *nb = b.node();
    out->backward = [o, nx, nw, nb, B, In, Out] {
      detail::CMapMat<T> dY(o->grad.data(), B, Out);
      if (T* g = detail::grad_of(nx)) {
        detail::MapMat<T> dX(g, B, In);
        dX.noalias() += dY * detail::CMapMat<T>(nw->value.data(), Out, In);
      }
      if (T* g = detail::grad_of(nw)) {
        detail::MapMat<T> dW(g, Out, In);
        dW.noalias() += dY.transpose() * detail::CMapMat<T>(nx->value.data(), B, In);
      }
      if (T* g = detail::grad_of(nb)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(g, Out);
        db += dY.colwise().sum();
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------- convolution

struct Conv2dGeom {
  std::size_t cin, n, h, w, cout, k, stride, pad, ho, wo;

  std::size_t patch() const { return cin * k * k; }
  std::size_t plane_out() const { return ho * wo; }
};

namespace detail {

/// cols[(ci,ky,kx)][(n - n0, oy, ox)] for images [n0, n1).
template <class T>
void im2col(const T* x, const Conv2dGeom& g, std::size_t n0, std::size_t n1, T* cols) {
  const std::size_t cn = n1 - n0, pl = g.plane_out(), ncols = cn * pl;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t n = n0; n < n1; ++n) {
          const T* plane = x + (ci * g.n + n) * g.h * g.w;
          T* dst = row + (n - n0) * pl;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            T* d = dst + oy * g.wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill_n(d, g.wo, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              d[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
            }
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const Conv2dGeom& g, std::size_t n0, std::size_t n1, T* dx) {
  const std::size_t cn = n1 - n0, pl = g.plane_out(), ncols = cn * pl;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t n = n0; n < n1; ++n) {
          T* plane = dx + (ci * g.n + n) * g.h * g.w;
          const T* src = row + (n - n0) * pl;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* d = plane + static_cast<std::size_t>(iy) * g.w;
            const T* s = src + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) d[ix] += s[ox];
            }
          }
        }
      }
}

/// Images per im2col chunk so the column buffer stays near 4 MiB.
template <class T>
std::size_t conv_chunk(const Conv2dGeom& g) {
  const std::size_t per_image = std::max<std::size_t>(1, g.patch() * g.plane_out() * sizeof(T));
  return std::clamp<std::size_t>((std::size_t{4} << 20) / per_image, 1, g.n);
}

}  // namespace detail

/// x [Cin, N, H, W] * w [Cout, Cin, k, k] -> [Cout, N, Ho, Wo], zero padding, no bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  detail::require(x.rank() == 4 && w.rank() == 4, "conv2d: expects 4-D input and weight");
  detail::require(w.dim(1) == x.dim(0), "conv2d: input has " + std::to_string(x.dim(0)) +
                                            " channels, weight expects " +
                                            std::to_string(w.dim(1)));
  detail::require(w.dim(2) == w.dim(3), "conv2d: square kernels only");
  detail::require(stride >= 1, "conv2d: stride must be positive");
  Conv2dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  detail::require(g.h + 2 * pad >= g.k && g.w + 2 * pad >= g.k, "conv2d: kernel larger than input");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;

  auto out = detail::make_result<T>({g.cout, g.n, g.ho, g.wo}, {&x, &w});
  const auto P = static_cast<Eigen::Index>(g.patch());
  const auto Co = static_cast<Eigen::Index>(g.cout);
  const auto total_cols = static_cast<Eigen::Index>(g.n * g.plane_out());
  const bool pointwise = g.k == 1 && stride == 1 && pad == 0;
  const std::size_t chunk = pointwise ? g.n : detail::conv_chunk<T>(g);
  {
    detail::CMapMat<T> W(w.data().data(), Co, P);
    detail::MapMat<T> Y(out->value.data(), Co, total_cols);
    std::vector<T> cols;
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t n1 = std::min(g.n, n0 + chunk);
      const auto nc = static_cast<Eigen::Index>((n1 - n0) * g.plane_out());
      const auto c0 = static_cast<Eigen::Index>(n0 * g.plane_out());
      if (pointwise) {
        // Input layout already is [Cin, N*H*W].
        Y.noalias() = W * detail::CMapMat<T>(x.data().data(), P, total_cols);
        break;
      }
      cols.resize(static_cast<std::size_t>(P * nc));
      detail::im2col(x.data().data(), g, n0, n1, cols.data());
      Y.middleCols(c0, nc).noalias() = W * detail::CMapMat<T>(cols.data(), P, nc);
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>*nx = x.node(), *nw = w.node();
    out->backward = [o, nx, nw, g, P, Co, total_cols, pointwise, chunk] {
      T* gx = detail::grad_of(nx);
      T* gw = detail::grad_of(nw);
      detail::CMapMat<T> dY(o->grad.data(), Co, total_cols);
      detail::CMapMat<T> W(nw->value.data(), Co, P);
      if (pointwise) {
        if (gw)
          detail::MapMat<T>(gw, Co, P).noalias() +=
              dY * detail::CMapMat<T>(nx->value.data(), P, total_cols).transpose();
        if (gx) detail::MapMat<T>(gx, P, total_cols).noalias() += W.transpose() * dY;
        return;
      }
      std::vector<T> cols;
      for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
        const std::size_t n1 = std::min(g.n, n0 + chunk);
        const auto nc = static_cast<Eigen::Index>((n1 - n0) * g.plane_out());
        const auto c0 = static_cast<Eigen::Index>(n0 * g.plane_out());
        cols.resize(static_cast<std::size_t>(P * nc));
        detail::MapMat<T> C(cols.data(), P, nc);
        if (gw) {
          detail::im2col(nx->value.data(), g, n0, n1, cols.data());
          detail::MapMat<T>(gw, Co, P).noalias() += dY.middleCols(c0, nc) * C.transpose();
        }
        if (gx) {
          C.noalias() = W.transpose() * dY.middleCols(c0, nc);
          detail::col2im_add(cols.data(), g, n0, n1, gx);
        }
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------- normalization

/// Per-sample, per-channel normalization over the spatial dims of [C, N, H, W],
/// followed by a learned per-channel affine map. Independent of batch size.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5)) {
  detail::require(x.rank() == 4, "instance_norm: expects [C, N, H, W]");
  const std::size_t C = x.dim(0), N = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(gamma.numel() == C && beta.numel() == C, "instance_norm: affine size mismatch");
  auto out = detail::make_result<T>(x.shape(), {&x, &gamma, &beta});
  std::vector<T> inv_std(C * N);
  std::vector<T> xhat(x.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (c * N + n) * HW;
      const T* xv = x.data().data() + base;
      T mean = 0;
      for (std::size_t i = 0; i < HW; ++i) mean += xv[i];
      mean /= static_cast<T>(HW);
      T var = 0;
      for (std::size_t i = 0; i < HW; ++i) var += (xv[i] - mean) * (xv[i] - mean);
      var /= static_cast<T>(HW);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[c * N + n] = is;
      const T gm = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t i = 0; i < HW; ++i) {
        const T xh = (xv[i] - mean) * is;
        xhat[base + i] = xh;
        out->value[base + i] = gm * xh + bt;
      }
    }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>*nx = x.node(), *ng = gamma.node(), *nb = beta.node();
    out->backward = [o, nx, ng, nb, C, N, HW, inv_std = std::move(inv_std),
                     xhat = std::move(xhat)] {
      T* gx = detail::grad_of(nx);
      T* gg = detail::grad_of(ng);
      T* gb = detail::grad_of(nb);
      const T inv_hw = T(1) / static_cast<T>(HW);
      for (std::size_t c = 0; c < C; ++c) {
        const T gm = ng->value[c];
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t base = (c * N + n) * HW;
          const T* dy = o->grad.data() + base;
          const T* xh = xhat.data() + base;
          T sum_dy = 0, sum_dy_xh = 0;
          for (std::size_t i = 0; i < HW; ++i) {
            sum_dy += dy[i];
            sum_dy_xh += dy[i] * xh[i];
          }
          if (gg) gg[c] += sum_dy_xh;
          if (gb) gb[c] += sum_dy;
          if (gx) {
            const T k = gm * inv_std[c * N + n];
            for (std::size_t i = 0; i < HW; ++i)
              gx[base + i] += k * (dy[i] - inv_hw * sum_dy - xh[i] * inv_hw * sum_dy_xh);
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------- pooling

/// Max pooling over [C, N, H, W] windows, no padding.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  detail::require(x.rank() == 4, "maxpool2d: expects [C, N, H, W]");
  detail::require(k >= 1 && stride >= 1 && x.dim(2) >= k && x.dim(3) >= k,
                  "maxpool2d: window larger than input");
  const std::size_t CN = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  auto out = detail::make_result<T>({x.dim(0), x.dim(1), Ho, Wo}, {&x});
  std::vector<std::uint32_t> arg(out->value.size());
  for (std::size_t p = 0; p < CN; ++p) {
    const T* plane = x.data().data() + p * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (oy * stride) * W + ox * stride;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (oy * stride + dy) * W + ox * stride + dx;
            if (plane[idx] > plane[best]) best = idx;
          }
        const std::size_t o = (p * Ho + oy) * Wo + ox;
        out->value[o] = plane[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in, arg = std::move(arg), H, W, Ho, Wo] {
      T* g = detail::grad_of(in);
      if (!g) return;
      const std::size_t plane_out = Ho * Wo;
      for (std::size_t i = 0; i < o->grad.size(); ++i)
        g[(i / plane_out) * H * W + arg[i]] += o->grad[i];
    };
  }
  return Tensor<T>(out);
}

/// [C, N, H, W] -> [N, C] spatial mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: expects [C, N, H, W]");
  const std::size_t C = x.dim(0), N = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto out = detail::make_result<T>({N, C}, {&x});
  const T inv = T(1) / static_cast<T>(HW);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data().data() + (c * N + n) * HW;
      T acc = 0;
      for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      out->value[n * C + c] = acc * inv;
    }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = x.node();
    out->backward = [o, in, C, N, HW, inv] {
      T* g = detail::grad_of(in);
      if (!g) return;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t n = 0; n < N; ++n) {
          const T d = o->grad[n * C + c] * inv;
          T* p = g + (c * N + n) * HW;
          for (std::size_t i = 0; i < HW; ++i) p[i] += d;
        }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------- losses

/// Mean squared error between pred (any shape with `target.size()` elements) and target.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, std::span<const T> target) {
  detail::require(pred.numel() == target.size(),
                  "mse_loss: " + std::to_string(pred.numel()) + " predictions vs " +
                      std::to_string(target.size()) + " targets");
  detail::require(!target.empty(), "mse_loss: empty batch");
  auto out = detail::make_result<T>({1}, {&pred});
  const T inv = T(1) / static_cast<T>(target.size());
  T acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = pred.data()[i] - target[i];
    acc += d * d;
  }
  out->value[0] = acc * inv;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* in = pred.node();
    std::vector<T> tv(target.begin(), target.end());
    out->backward = [o, in, tv = std::move(tv), inv] {
      if (T* g = detail::grad_of(in))
        for (std::size_t i = 0; i < tv.size(); ++i)
          g[i] += o->grad[0] * T(2) * (in->value[i] - tv[i]) * inv;
    };
  }
  return Tensor<T>(out);
}

}  // namespace mmode::nn

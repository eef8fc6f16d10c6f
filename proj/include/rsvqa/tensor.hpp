#pragma once

// Dense float tensors with reverse-mode automatic differentiation on a
// dynamic tape. The tape is rebuilt on every forward pass; tensors without a
// node are plain immutable values. Row-major layout throughout, and the only
// broadcast anywhere is the bias add over the last axis, which keeps every
// backward rule short enough to audit by eye.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rsvqa/errors.hpp"
#include "rsvqa/rng.hpp"

namespace rsvqa {

template <class T>
class TapeT;

template <class T>
class TensorT {
 public:
  TensorT() : buf_(std::make_shared<std::vector<T>>()) {}

  explicit TensorT(std::vector<int> shape)
      : shape_(std::move(shape)), buf_(std::make_shared<std::vector<T>>(checked_size(shape_), T{0})) {}

  TensorT(std::vector<int> shape, std::vector<T> values)
      : shape_(std::move(shape)), buf_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (checked_size(shape_) != static_cast<long long>(buf_->size()))
      throw ShapeMismatch("value count does not match shape");
  }

  static TensorT scalar_tensor(T v) { return TensorT({1}, {v}); }

  static TensorT full(std::vector<int> shape, T v) {
    TensorT t(std::move(shape));
    std::fill(t.buf_->begin(), t.buf_->end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  long long size() const { return static_cast<long long>(buf_->size()); }

  int rows() const {
    if (ndim() != 2) throw ShapeMismatch("rows() on non-matrix");
    return shape_[0];
  }
  int cols() const {
    if (ndim() != 2) throw ShapeMismatch("cols() on non-matrix");
    return shape_[1];
  }

  std::vector<T>& data() { return *buf_; }
  const std::vector<T>& data() const { return *buf_; }
  const std::shared_ptr<std::vector<T>>& buffer() const { return buf_; }

  T item() const {
    if (size() != 1) throw NotScalar("item() on tensor with " + std::to_string(size()) + " elements");
    return (*buf_)[0];
  }

  bool requires_grad() const { return node_ >= 0; }
  TapeT<T>* tape() const { return tape_; }
  int node() const { return node_; }

  /// Identity of the underlying buffer; the tape keys leaves by it.
  const void* key() const { return static_cast<const void*>(buf_.get()); }

  static TensorT adopt(std::vector<int> shape, std::shared_ptr<std::vector<T>> buf, TapeT<T>* tape,
                       int node) {
    TensorT t;
    t.shape_ = std::move(shape);
    t.buf_ = std::move(buf);
    t.tape_ = tape;
    t.node_ = node;
    return t;
  }

 private:
  static long long checked_size(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeMismatch("non-positive dimension");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<T>> buf_;
  TapeT<T>* tape_ = nullptr;
  int node_ = -1;
};

/// Records one forward pass. Node order is creation order, so every op's
/// inputs precede it and a single reverse sweep propagates all gradients.
template <class T>
class TapeT {
 public:
  /// Registers a leaf (parameter) tensor. Watching the same buffer twice
  /// returns the same node, so gradients accumulate across repeated uses.
  TensorT<T> watch(const TensorT<T>& leaf) {
    auto it = leaf_ids_.find(leaf.key());
    int node;
    if (it != leaf_ids_.end()) {
      node = it->second;
    } else {
      node = new_node(leaf.size(), {});
      leaf_ids_.emplace(leaf.key(), node);
    }
    return TensorT<T>::adopt(leaf.shape(), leaf.buffer(), this, node);
  }

  /// The backward callback receives the tape and the node's own id.
  int new_node(long long grad_size, std::function<void(TapeT&, int)> back) {
    nodes_.push_back(Node{std::move(back), std::vector<T>(static_cast<std::size_t>(grad_size), T{0})});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<T>& grad_buf(int node) { return nodes_[static_cast<std::size_t>(node)].grad; }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. The loss must
  /// be a scalar recorded on this tape.
  void backward(const TensorT<T>& loss) {
    if (loss.size() != 1) throw NotScalar("backward() needs a scalar loss");
    if (loss.tape() != this || loss.node() < 0)
      throw Error("backward() on a loss that was not recorded on this tape");
    grad_buf(loss.node())[0] = T{1};
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      if (node.back) node.back(*this, i);
    }
    ran_ = true;
  }

  bool ran_backward() const { return ran_; }

  /// Node id of a watched leaf, -1 if this buffer was never watched.
  int leaf_node(const TensorT<T>& leaf) const {
    auto it = leaf_ids_.find(leaf.key());
    return it == leaf_ids_.end() ? -1 : it->second;
  }

  const std::vector<T>& grad_view(int node) const {
    return nodes_[static_cast<std::size_t>(node)].grad;
  }

  /// Gradient of a watched leaf after backward(); zeros if unreached.
  TensorT<T> gradient(const TensorT<T>& leaf) const {
    const int node = leaf_node(leaf);
    if (node < 0) throw Error("gradient() for a tensor that was never watched");
    return TensorT<T>(leaf.shape(), nodes_[static_cast<std::size_t>(node)].grad);
  }

  /// node_id -> gradient snapshot for every watched leaf.
  std::unordered_map<int, std::vector<T>> leaf_gradients() const {
    std::unordered_map<int, std::vector<T>> out;
    for (const auto& [key, node] : leaf_ids_) {
      (void)key;
      out.emplace(node, nodes_[static_cast<std::size_t>(node)].grad);
    }
    return out;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::function<void(TapeT&, int)> back;  // empty for leaves
    std::vector<T> grad;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaf_ids_;
  bool ran_ = false;
};

namespace detail {

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (const T x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericalError(std::string(op) + " produced a non-finite value");
  }
}

template <class T>
TapeT<T>* merged_tape(std::initializer_list<const TensorT<T>*> inputs) {
  TapeT<T>* tape = nullptr;
  for (const TensorT<T>* t : inputs) {
    if (t->node() < 0) continue;
    if (tape && t->tape() != tape) throw Error("inputs recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

// c[m x n] += or = a[m x k] * b[k x n]
template <class T, bool Accumulate>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  if constexpr (!Accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, T{0});
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += or = a[m x k] * b[n x k]^T
template <class T, bool Accumulate>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc{0};
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      if constexpr (Accumulate) crow[j] += acc; else crow[j] = acc;
    }
  }
}

// c[k x n] += or = a[m x k]^T * b[m x n]
template <class T, bool Accumulate>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  if constexpr (!Accumulate) std::fill(c, c + static_cast<std::size_t>(k) * n, T{0});
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
TensorT<T> make_op_result(const char* op, std::vector<int> shape,
                          std::shared_ptr<std::vector<T>> buf, TapeT<T>* tape,
                          std::function<void(TapeT<T>&, int)> back) {
  check_finite(op, *buf);
  int node = -1;
  if (tape) node = tape->new_node(static_cast<long long>(buf->size()), std::move(back));
  return TensorT<T>::adopt(std::move(shape), std::move(buf), tape, node);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise + linear algebra ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("add: shapes differ");
  auto out = std::make_shared<std::vector<T>>(a.data());
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] += b.data()[i];
  TapeT<T>* tape = detail::merged_tape<T>({&a, &b});
  const int an = a.node(), bn = b.node();
  return detail::make_op_result<T>(
      "add", a.shape(), std::move(out), tape, [an, bn](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        if (an >= 0) {
          auto& ga = tp.grad_buf(an);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn >= 0) {
          auto& gb = tp.grad_buf(bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("mul: shapes differ");
  auto out = std::make_shared<std::vector<T>>(a.size());
  for (long long i = 0; i < a.size(); ++i)
    (*out)[static_cast<std::size_t>(i)] = a.data()[i] * b.data()[i];
  TapeT<T>* tape = detail::merged_tape<T>({&a, &b});
  const int an = a.node(), bn = b.node();
  auto abuf = a.buffer(), bbuf = b.buffer();
  return detail::make_op_result<T>(
      "mul", a.shape(), std::move(out), tape, [an, bn, abuf, bbuf](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        if (an >= 0) {
          auto& ga = tp.grad_buf(an);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bbuf)[i];
        }
        if (bn >= 0) {
          auto& gb = tp.grad_buf(bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*abuf)[i];
        }
      });
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, double s) {
  auto out = std::make_shared<std::vector<T>>(a.size());
  for (long long i = 0; i < a.size(); ++i)
    (*out)[static_cast<std::size_t>(i)] = static_cast<T>(a.data()[i] * static_cast<T>(s));
  const int an = a.node();
  return detail::make_op_result<T>(
      "scale", a.shape(), std::move(out), a.tape(), [an, s](TapeT<T>& tp, int self) {
        if (an < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& ga = tp.grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * static_cast<T>(s);
      });
}

/// l1*a + l2*b with the combination done in double so the linearity of the
/// joint objective holds to ~1e-7 even in the float instantiation.
template <class T>
TensorT<T> affine_combine(const TensorT<T>& a, double l1, const TensorT<T>& b, double l2) {
  if (a.shape() != b.shape()) throw ShapeMismatch("affine_combine: shapes differ");
  auto out = std::make_shared<std::vector<T>>(a.size());
  for (long long i = 0; i < a.size(); ++i) {
    const double v = l1 * static_cast<double>(a.data()[i]) + l2 * static_cast<double>(b.data()[i]);
    (*out)[static_cast<std::size_t>(i)] = static_cast<T>(v);
  }
  TapeT<T>* tape = detail::merged_tape<T>({&a, &b});
  const int an = a.node(), bn = b.node();
  return detail::make_op_result<T>(
      "affine_combine", a.shape(), std::move(out), tape, [an, bn, l1, l2](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        if (an >= 0) {
          auto& ga = tp.grad_buf(an);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * static_cast<T>(l1);
        }
        if (bn >= 0) {
          auto& gb = tp.grad_buf(bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * static_cast<T>(l2);
        }
      });
}

/// Adds a length-c bias vector to every row of an r x c matrix. The only
/// broadcast in the library.
template <class T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  if (x.ndim() != 2 || bias.ndim() != 1 || bias.shape()[0] != x.cols())
    throw ShapeMismatch("add_bias: need [r,c] plus [c]");
  const int r = x.rows(), c = x.cols();
  auto out = std::make_shared<std::vector<T>>(x.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) (*out)[static_cast<std::size_t>(i) * c + j] += bias.data()[j];
  TapeT<T>* tape = detail::merged_tape<T>({&x, &bias});
  const int xn = x.node(), bn = bias.node();
  return detail::make_op_result<T>(
      "add_bias", x.shape(), std::move(out), tape, [xn, bn, r, c](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        if (xn >= 0) {
          auto& gx = tp.grad_buf(xn);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (bn >= 0) {
          auto& gb = tp.grad_buf(bn);
          // Column sums in double: bias gradients cancel heavily and the
          // finite-difference check is sensitive to the residue.
          for (int j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int i = 0; i < r; ++i) acc += g[static_cast<std::size_t>(i) * c + j];
            gb[static_cast<std::size_t>(j)] += static_cast<T>(acc);
          }
        }
      });
}

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeMismatch("matmul: both inputs must be matrices");
  if (a.cols() != b.rows())
    throw ShapeMismatch("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  auto out = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m) * n);
  detail::gemm_nn<T, false>(a.data().data(), b.data().data(), out->data(), m, k, n);
  TapeT<T>* tape = detail::merged_tape<T>({&a, &b});
  const int an = a.node(), bn = b.node();
  auto abuf = a.buffer(), bbuf = b.buffer();
  return detail::make_op_result<T>(
      "matmul", {m, n}, std::move(out), tape,
      [an, bn, abuf, bbuf, m, k, n](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        if (an >= 0) detail::gemm_nt<T, true>(g.data(), bbuf->data(), tp.grad_buf(an).data(), m, n, k);
        if (bn >= 0) detail::gemm_tn<T, true>(abuf->data(), g.data(), tp.grad_buf(bn).data(), m, k, n);
      });
}

/// a * b^T without materializing the transpose (attention scores).
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw ShapeMismatch("matmul_nt: need [m,k] and [n,k]");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  auto out = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m) * n);
  detail::gemm_nt<T, false>(a.data().data(), b.data().data(), out->data(), m, k, n);
  TapeT<T>* tape = detail::merged_tape<T>({&a, &b});
  const int an = a.node(), bn = b.node();
  auto abuf = a.buffer(), bbuf = b.buffer();
  return detail::make_op_result<T>(
      "matmul_nt", {m, n}, std::move(out), tape,
      [an, bn, abuf, bbuf, m, k, n](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        // out = A B^T: dA += g B, dB += g^T A.
        if (an >= 0) detail::gemm_nn<T, true>(g.data(), bbuf->data(), tp.grad_buf(an).data(), m, n, k);
        if (bn >= 0) detail::gemm_tn<T, true>(g.data(), abuf->data(), tp.grad_buf(bn).data(), m, n, k);
      });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

/// Max-subtracted softmax along `axis` of a vector or matrix.
template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  if (x.ndim() < 1 || x.ndim() > 2) throw ShapeMismatch("softmax: rank must be 1 or 2");
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim()) throw ShapeMismatch("softmax: axis out of range");

  const int lines = x.ndim() == 1 ? 1 : (axis == 1 ? x.shape()[0] : x.shape()[1]);
  const int width = x.ndim() == 1 ? x.shape()[0] : (axis == 1 ? x.shape()[1] : x.shape()[0]);
  const long long stride = x.ndim() == 1 ? 1 : (axis == 1 ? 1 : x.shape()[1]);
  const long long line_step = x.ndim() == 1 ? 0 : (axis == 1 ? x.shape()[1] : 1);

  auto out = std::make_shared<std::vector<T>>(x.size());
  const auto& in = x.data();
  for (int l = 0; l < lines; ++l) {
    const long long base = l * line_step;
    T mx = in[static_cast<std::size_t>(base)];
    for (int i = 1; i < width; ++i) mx = std::max(mx, in[static_cast<std::size_t>(base + i * stride)]);
    T denom{0};
    for (int i = 0; i < width; ++i) {
      const T e = std::exp(in[static_cast<std::size_t>(base + i * stride)] - mx);
      (*out)[static_cast<std::size_t>(base + i * stride)] = e;
      denom += e;
    }
    for (int i = 0; i < width; ++i) (*out)[static_cast<std::size_t>(base + i * stride)] /= denom;
  }

  const int xn = x.node();
  auto obuf = out;
  return detail::make_op_result<T>(
      "softmax", x.shape(), std::move(out), x.tape(),
      [xn, obuf, lines, width, stride, line_step](TapeT<T>& tp, int self) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& gx = tp.grad_buf(xn);
        // dx_i = y_i * (g_i - sum_j g_j y_j), per line; the dot in double.
        for (int l = 0; l < lines; ++l) {
          const long long base = l * line_step;
          double dot = 0.0;
          for (int i = 0; i < width; ++i) {
            const std::size_t idx = static_cast<std::size_t>(base + i * stride);
            dot += static_cast<double>(g[idx]) * static_cast<double>((*obuf)[idx]);
          }
          for (int i = 0; i < width; ++i) {
            const std::size_t idx = static_cast<std::size_t>(base + i * stride);
            gx[idx] += (*obuf)[idx] * (g[idx] - static_cast<T>(dot));
          }
        }
      });
}

/// Per-row layer normalization over the last axis with affine gain/bias.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      double eps = 1e-5) {
  if (x.ndim() != 2) throw ShapeMismatch("layer_norm: input must be a matrix");
  const int r = x.rows(), c = x.cols();
  if (gain.ndim() != 1 || gain.shape()[0] != c || bias.ndim() != 1 || bias.shape()[0] != c)
    throw ShapeMismatch("layer_norm: gain/bias must match the last dimension");

  auto out = std::make_shared<std::vector<T>>(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(r));
  const auto& in = x.data();
  for (int i = 0; i < r; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * c;
    T mean{0};
    for (int j = 0; j < c; ++j) mean += in[base + j];
    mean /= static_cast<T>(c);
    T var{0};
    for (int j = 0; j < c; ++j) {
      const T d = in[base + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      const T xh = (in[base + j] - mean) * is;
      (*xhat)[base + j] = xh;
      (*out)[base + j] = xh * gain.data()[j] + bias.data()[j];
    }
  }

  TapeT<T>* tape = detail::merged_tape<T>({&x, &gain, &bias});
  const int xn = x.node(), gn = gain.node(), bn = bias.node();
  auto gbuf = gain.buffer();
  return detail::make_op_result<T>(
      "layer_norm", x.shape(), std::move(out), tape,
      [xn, gn, bn, xhat, inv_std, gbuf, r, c](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        // Gain/bias gradients are row reductions with heavy cancellation;
        // run every sum in double and commit once.
        std::vector<double> gg_acc, gb_acc;
        if (gn >= 0) gg_acc.assign(static_cast<std::size_t>(c), 0.0);
        if (bn >= 0) gb_acc.assign(static_cast<std::size_t>(c), 0.0);
        for (int i = 0; i < r; ++i) {
          const std::size_t base = static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            if (gn >= 0) gg_acc[static_cast<std::size_t>(j)] += static_cast<double>(g[base + j]) * (*xhat)[base + j];
            if (bn >= 0) gb_acc[static_cast<std::size_t>(j)] += static_cast<double>(g[base + j]);
          }
          if (xn >= 0) {
            auto& gx = tp.grad_buf(xn);
            // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int j = 0; j < c; ++j) {
              const double dxh =
                  static_cast<double>(g[base + j]) * (*gbuf)[static_cast<std::size_t>(j)];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * (*xhat)[base + j];
            }
            const double inv_c = 1.0 / static_cast<double>(c);
            const double is = (*inv_std)[static_cast<std::size_t>(i)];
            for (int j = 0; j < c; ++j) {
              const double dxh =
                  static_cast<double>(g[base + j]) * (*gbuf)[static_cast<std::size_t>(j)];
              gx[base + j] += static_cast<T>(
                  (dxh - sum_dxh * inv_c - (*xhat)[base + j] * sum_dxh_xh * inv_c) * is);
            }
          }
        }
        if (gn >= 0) {
          auto& gg = tp.grad_buf(gn);
          for (int j = 0; j < c; ++j) gg[static_cast<std::size_t>(j)] += static_cast<T>(gg_acc[static_cast<std::size_t>(j)]);
        }
        if (bn >= 0) {
          auto& gb = tp.grad_buf(bn);
          for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += static_cast<T>(gb_acc[static_cast<std::size_t>(j)]);
        }
      });
}

/// tanh-approximation GELU; smooth everywhere, which finite-difference
/// checking of the full model depends on.
template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  auto out = std::make_shared<std::vector<T>>(x.size());
  for (long long i = 0; i < x.size(); ++i) {
    const double v = static_cast<double>(x.data()[i]);
    const double u = kC * (v + kA * v * v * v);
    (*out)[static_cast<std::size_t>(i)] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
  }
  const int xn = x.node();
  auto xbuf = x.buffer();
  return detail::make_op_result<T>(
      "gelu", x.shape(), std::move(out), x.tape(), [xn, xbuf](TapeT<T>& tp, int self) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& gx = tp.grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = static_cast<double>((*xbuf)[i]);
          const double u = kC * (v + kA * v * v * v);
          const double th = std::tanh(u);
          const double sech2 = 1.0 - th * th;
          const double d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * kC * (1.0 + 3.0 * kA * v * v);
          gx[i] += g[i] * static_cast<T>(d);
        }
      });
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> slice_rows(const TensorT<T>& x, int r0, int r1) {
  if (x.ndim() != 2 || r0 < 0 || r1 > x.rows() || r0 >= r1)
    throw ShapeMismatch("slice_rows: bad range");
  const int c = x.cols(), n = r1 - r0;
  auto out = std::make_shared<std::vector<T>>(x.data().begin() + static_cast<std::ptrdiff_t>(r0) * c,
                                              x.data().begin() + static_cast<std::ptrdiff_t>(r1) * c);
  const int xn = x.node();
  return detail::make_op_result<T>(
      "slice_rows", {n, c}, std::move(out), x.tape(), [xn, r0, c](TapeT<T>& tp, int self) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& gx = tp.grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>(r0) * c + i] += g[i];
      });
}

template <class T>
TensorT<T> slice_cols(const TensorT<T>& x, int c0, int c1) {
  if (x.ndim() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
    throw ShapeMismatch("slice_cols: bad range");
  const int r = x.rows(), c = x.cols(), w = c1 - c0;
  auto out = std::make_shared<std::vector<T>>(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      (*out)[static_cast<std::size_t>(i) * w + j] = x.data()[static_cast<std::size_t>(i) * c + c0 + j];
  const int xn = x.node();
  return detail::make_op_result<T>(
      "slice_cols", {r, w}, std::move(out), x.tape(), [xn, r, c, c0, w](TapeT<T>& tp, int self) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& gx = tp.grad_buf(xn);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            gx[static_cast<std::size_t>(i) * c + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
      });
}

template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
  const int r = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.rows() != r) throw ShapeMismatch("concat_cols: row counts differ");
    total += p.cols();
  }
  auto out = std::make_shared<std::vector<T>>(static_cast<std::size_t>(r) * total);
  int offset = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        (*out)[static_cast<std::size_t>(i) * total + offset + j] =
            p.data()[static_cast<std::size_t>(i) * w + j];
    offset += w;
  }
  TapeT<T>* tape = nullptr;
  for (const auto& p : parts)
    if (p.node() >= 0) tape = p.tape();
  std::vector<int> nodes;
  std::vector<int> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  return detail::make_op_result<T>(
      "concat_cols", {r, total}, std::move(out), tape,
      [nodes, widths, r, total](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        int offset = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          const int w = widths[k];
          if (nodes[k] >= 0) {
            auto& gp = tp.grad_buf(nodes[k]);
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < w; ++j)
                gp[static_cast<std::size_t>(i) * w + j] += g[static_cast<std::size_t>(i) * total + offset + j];
          }
          offset += w;
        }
      });
}

/// Copy of x with row `row` replaced by the vector v (the visual-feature
/// slot in a token embedding matrix).
template <class T>
TensorT<T> replace_row(const TensorT<T>& x, int row, const TensorT<T>& v) {
  if (x.ndim() != 2 || row < 0 || row >= x.rows()) throw ShapeMismatch("replace_row: bad row");
  if (v.size() != x.cols()) throw ShapeMismatch("replace_row: width mismatch");
  const int c = x.cols();
  auto out = std::make_shared<std::vector<T>>(x.data());
  for (int j = 0; j < c; ++j) (*out)[static_cast<std::size_t>(row) * c + j] = v.data()[j];
  TapeT<T>* tape = detail::merged_tape<T>({&x, &v});
  const int xn = x.node(), vn = v.node();
  return detail::make_op_result<T>(
      "replace_row", x.shape(), std::move(out), tape, [xn, vn, row, c](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        if (xn >= 0) {
          auto& gx = tp.grad_buf(xn);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (i / static_cast<std::size_t>(c) == static_cast<std::size_t>(row)) continue;
            gx[i] += g[i];
          }
        }
        if (vn >= 0) {
          auto& gv = tp.grad_buf(vn);
          for (int j = 0; j < c; ++j) gv[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(row) * c + j];
        }
      });
}

/// Column means: [r, c] -> [c].
template <class T>
TensorT<T> mean_rows(const TensorT<T>& x) {
  if (x.ndim() != 2) throw ShapeMismatch("mean_rows: input must be a matrix");
  const int r = x.rows(), c = x.cols();
  auto out = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c), T{0});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) (*out)[static_cast<std::size_t>(j)] += x.data()[static_cast<std::size_t>(i) * c + j];
  for (int j = 0; j < c; ++j) (*out)[static_cast<std::size_t>(j)] /= static_cast<T>(r);
  const int xn = x.node();
  return detail::make_op_result<T>(
      "mean_rows", {c}, std::move(out), x.tape(), [xn, r, c](TapeT<T>& tp, int self) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& gx = tp.grad_buf(xn);
        const T inv_r = T{1} / static_cast<T>(r);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gx[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j)] * inv_r;
      });
}

/// Same data, new shape (element count must match).
template <class T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int> shape) {
  long long n = 1;
  for (int d : shape) n *= d;
  if (n != x.size()) throw ShapeMismatch("reshape: element count differs");
  auto out = std::make_shared<std::vector<T>>(x.data());
  const int xn = x.node();
  return detail::make_op_result<T>(
      "reshape", std::move(shape), std::move(out), x.tape(), [xn](TapeT<T>& tp, int self) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& gx = tp.grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T acc{0};
  for (const T v : x.data()) acc += v;
  auto out = std::make_shared<std::vector<T>>(1, acc);
  const int xn = x.node();
  const long long n = x.size();
  return detail::make_op_result<T>(
      "sum_all", {1}, std::move(out), x.tape(), [xn, n](TapeT<T>& tp, int self) {
        if (xn < 0) return;
        const T g = tp.grad_buf(self)[0];
        auto& gx = tp.grad_buf(xn);
        for (long long i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g;
      });
}

/// Rows of an embedding table selected by token id.
template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw ShapeMismatch("embedding: table must be [V, d]");
  const int v = table.rows(), d = table.cols();
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw ShapeMismatch("embedding: empty id list");
  auto out = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    if (ids[static_cast<std::size_t>(i)] < 0 || ids[static_cast<std::size_t>(i)] >= v)
      throw OutOfVocab("embedding id " + std::to_string(ids[static_cast<std::size_t>(i)]) +
                       " outside table of " + std::to_string(v));
    const std::size_t src = static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d;
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(src), d,
                out->begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  const int tn = table.node();
  return detail::make_op_result<T>(
      "embedding", {n, d}, std::move(out), table.tape(), [tn, ids, d](TapeT<T>& tp, int self) {
        if (tn < 0) return;
        const auto& g = tp.grad_buf(self);
        auto& gt = tp.grad_buf(tn);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const std::size_t dst = static_cast<std::size_t>(ids[i]) * d;
          for (int j = 0; j < d; ++j) gt[dst + j] += g[i * static_cast<std::size_t>(d) + j];
        }
      });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <class T>
struct NllResult {
  TensorT<T> sum;   // scalar: sum over supervised positions of -log p(target)
  int count = 0;    // number of supervised positions
};

/// Token-level negative log likelihood. Positions whose target equals
/// ignore_id contribute nothing; the returned count is the number of
/// supervised positions (0 is legal here, callers decide whether that is an
/// EmptyLoss).
template <class T>
NllResult<T> nll_sum(const TensorT<T>& logits, const std::vector<int>& targets, int ignore_id) {
  if (logits.ndim() != 2) throw ShapeMismatch("nll_sum: logits must be [T, V]");
  const int rows = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != rows)
    throw ShapeMismatch("nll_sum: target count " + std::to_string(targets.size()) +
                        " vs logits rows " + std::to_string(rows));

  auto probs = std::make_shared<std::vector<T>>(logits.size());
  const auto& in = logits.data();
  double acc = 0.0;
  int count = 0;
  for (int t = 0; t < rows; ++t) {
    const std::size_t base = static_cast<std::size_t>(t) * v;
    const int tgt = targets[static_cast<std::size_t>(t)];
    if (tgt != ignore_id && (tgt < 0 || tgt >= v))
      throw OutOfVocab("target id " + std::to_string(tgt) + " outside vocab of " + std::to_string(v));
    T mx = in[base];
    for (int j = 1; j < v; ++j) mx = std::max(mx, in[base + j]);
    T denom{0};
    for (int j = 0; j < v; ++j) {
      const T e = std::exp(in[base + j] - mx);
      (*probs)[base + j] = e;
      denom += e;
    }
    for (int j = 0; j < v; ++j) (*probs)[base + j] /= denom;
    if (tgt == ignore_id) continue;
    const T logp = (in[base + tgt] - mx) - std::log(denom);
    acc -= static_cast<double>(logp);
    ++count;
  }

  auto out = std::make_shared<std::vector<T>>(1, static_cast<T>(acc));
  const int ln = logits.node();
  TensorT<T> sum = detail::make_op_result<T>(
      "nll_sum", {1}, std::move(out), logits.tape(),
      [ln, probs, targets, ignore_id, rows, v](TapeT<T>& tp, int self) {
        if (ln < 0) return;
        const T g = tp.grad_buf(self)[0];
        auto& gl = tp.grad_buf(ln);
        // d(-log p_t)/dlogit = softmax - onehot on supervised rows.
        for (int t = 0; t < rows; ++t) {
          const int tgt = targets[static_cast<std::size_t>(t)];
          if (tgt == ignore_id) continue;
          const std::size_t base = static_cast<std::size_t>(t) * v;
          for (int j = 0; j < v; ++j) gl[base + j] += g * (*probs)[base + j];
          gl[base + tgt] -= g;
        }
      });
  return NllResult<T>{sum, count};
}

/// Mean negative log likelihood over supervised positions (ignore_id rows
/// are skipped). EmptyLoss when nothing is supervised.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets, int ignore_id) {
  NllResult<T> nll = nll_sum(logits, targets, ignore_id);
  if (nll.count == 0) throw EmptyLoss("all targets equal ignore_id");
  return scale(nll.sum, 1.0 / nll.count);
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

/// Compares tape gradients against central finite differences.
///
/// `loss` rebuilds the objective on a fresh tape over `params` (precision T);
/// `loss_ref` evaluates the same objective in double on `params_ref`, which
/// mirror `params` index-for-index and are perturbed in place. Running the
/// reference in double keeps the oracle's own noise far below the tolerance
/// being checked. Coordinates are sampled so that every parameter tensor is
/// covered at least min_coords_total / |params| times.
template <class T>
GradCheckReport grad_check(const std::function<TensorT<T>(TapeT<T>&)>& loss,
                           const std::vector<TensorT<T>*>& params,
                           const std::function<double()>& loss_ref,
                           const std::vector<TensorT<double>*>& params_ref, double eps,
                           int min_coords_total, Rng& rng) {
  if (params.size() != params_ref.size()) throw ShapeMismatch("grad_check: mirror count mismatch");

  TapeT<T> tape;
  TensorT<T> out = loss(tape);
  tape.backward(out);

  const int per_tensor =
      std::max(1, (min_coords_total + static_cast<int>(params.size()) - 1) /
                      std::max(1, static_cast<int>(params.size())));

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const TensorT<T> grad = tape.gradient(*params[k]);
    auto& mirror = params_ref[k]->data();
    const long long n = params[k]->size();
    for (int s = 0; s < per_tensor; ++s) {
      const std::size_t i = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n)));
      const double saved = mirror[i];
      mirror[i] = saved + eps;
      const double up = loss_ref();
      mirror[i] = saved - eps;
      const double down = loss_ref();
      mirror[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double analytic = static_cast<double>(grad.data()[i]);
      const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
      const double rel = std::abs(analytic - fd) / denom;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
    }
  }
  return report;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace rsvqa

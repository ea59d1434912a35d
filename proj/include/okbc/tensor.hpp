#pragma once

// Dense row-major tensors with reverse-mode gradients. The scalar type is a
// template parameter: float for training and checkpoints, double for
// finite-difference verification.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "okbc/rng.hpp"

namespace okbc {

template <class T>
struct NodeT;

template <class T>
struct TensorT {
  using value_type = T;

  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated for parameters and on demand during backward
  bool requires_grad = false;
  std::shared_ptr<NodeT<T>> node;

  TensorT() = default;

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    TensorT t;
    t.shape = std::move(shape);
    size_t n = 1;
    for (int e : t.shape) {
      if (e <= 0) throw std::runtime_error("tensor: nonpositive extent " + std::to_string(e));
      n *= static_cast<size_t>(e);
    }
    t.data = std::make_shared<std::vector<T>>(n, T(0));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(n, T(0));
    return t;
  }

  static TensorT from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    TensorT t = zeros(shape, requires_grad);
    if (values.size() != t.numel())
      throw std::runtime_error("tensor: value count does not match shape");
    *t.data = std::move(values);
    return t;
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static TensorT uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                         bool requires_grad = true) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& x : *t.data) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  // Glorot range based on the first two extents.
  static TensorT xavier(std::vector<int> shape, Rng& rng, bool requires_grad = true) {
    double fan_in = shape.size() > 0 ? shape[0] : 1;
    double fan_out = shape.size() > 1 ? shape[1] : 1;
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    return uniform(std::move(shape), -a, a, rng, requires_grad);
  }

  size_t numel() const {
    size_t n = 1;
    for (int e : shape) n *= static_cast<size_t>(e);
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  std::vector<T>& values() { return *data; }
  const std::vector<T>& values() const { return *data; }

  T item() const {
    if (numel() != 1) throw std::runtime_error("item(): tensor is not scalar");
    return (*data)[0];
  }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }
};

template <class T>
struct NodeT {
  std::vector<TensorT<T>> parents;
  std::function<void(TensorT<T>&)> backward;
};

// ----- autograd bookkeeping ------------------------------------------------

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGrad {
  NoGrad() : prev_(grad_enabled()) { grad_enabled() = false; }
  ~NoGrad() { grad_enabled() = prev_; }

 private:
  bool prev_;
};

template <class T>
inline bool want_grad(const TensorT<T>& t) {
  return grad_enabled() && t.requires_grad;
}

template <class T>
void attach_node(TensorT<T>& out, std::type_identity_t<std::vector<TensorT<T>>> parents,
                 std::type_identity_t<std::function<void(TensorT<T>&)>> backward) {
  out.node = std::make_shared<NodeT<T>>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(backward);
}

// Reverse-topological record of the recorded operations reachable from a
// root: every node appears after all of its consumers.
template <class T>
struct TapeT {
  std::vector<TensorT<T>> order;

  void build(const TensorT<T>& root) {
    std::unordered_set<const NodeT<T>*> seen;
    std::vector<TensorT<T>> post;
    visit(root, seen, post);
    order.assign(post.rbegin(), post.rend());
  }

 private:
  void visit(const TensorT<T>& t, std::unordered_set<const NodeT<T>*>& seen,
             std::vector<TensorT<T>>& post) {
    if (!t.node || seen.count(t.node.get())) return;
    seen.insert(t.node.get());
    for (const auto& p : t.node->parents) visit(p, seen, post);
    post.push_back(t);
  }
};

template <class T>
void backward(TensorT<T>& loss) {
  if (loss.numel() != 1) throw std::runtime_error("backward: loss must be scalar");
  loss.ensure_grad();
  (*loss.grad)[0] = T(1);
  TapeT<T> tape;
  tape.build(loss);
  for (auto& t : tape.order) t.node->backward(t);
}

// ----- shape helpers --------------------------------------------------------

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  size_t n = std::max(a.size(), b.size());
  std::vector<int> out(n);
  for (size_t i = 0; i < n; ++i) {
    int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::runtime_error("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                               shape_str(b));
    out[n - 1 - i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Strides of `shape` inside the broadcast frame `out_shape`; 0 on expanded dims.
inline std::vector<size_t> bcast_strides(const std::vector<int>& shape,
                                         const std::vector<int>& out_shape) {
  std::vector<size_t> strides(out_shape.size(), 0);
  size_t acc = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    size_t si = shape.size() - 1 - i;
    size_t oi = out_shape.size() - 1 - i;
    strides[oi] = (shape[si] == 1 && out_shape[oi] != 1) ? 0 : acc;
    acc *= static_cast<size_t>(shape[si]);
  }
  return strides;
}

// f(out_index, a_index, b_index) over the broadcast frame.
template <class F>
void for_each_bcast(const std::vector<int>& out_shape, const std::vector<size_t>& sa,
                    const std::vector<size_t>& sb, F&& f) {
  size_t total = 1;
  for (int e : out_shape) total *= static_cast<size_t>(e);
  size_t nd = out_shape.size();
  std::vector<size_t> idx(nd, 0);
  size_t ai = 0, bi = 0;
  for (size_t oi = 0; oi < total; ++oi) {
    f(oi, ai, bi);
    for (size_t k = nd; k-- > 0;) {
      idx[k]++;
      ai += sa[k];
      bi += sb[k];
      if (idx[k] < static_cast<size_t>(out_shape[k])) break;
      ai -= sa[k] * idx[k];
      bi -= sb[k] * idx[k];
      idx[k] = 0;
      if (k == 0) return;
    }
  }
}

}  // namespace detail

// ----- elementwise binary ops ----------------------------------------------

// dfa/dfb take (a, b, upstream) and return the contribution to that input.
template <class T, class FwdF, class DaF, class DbF>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, FwdF fwd, DaF dfa, DbF dfb) {
  std::vector<int> out_shape = broadcast_shape(a.shape, b.shape);
  TensorT<T> out = TensorT<T>::zeros(out_shape, want_grad(a) || want_grad(b));
  const auto sa = detail::bcast_strides(a.shape, out_shape);
  const auto sb = detail::bcast_strides(b.shape, out_shape);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  if (a.shape == b.shape) {
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    detail::for_each_bcast(out_shape, sa, sb,
                           [&](size_t oi, size_t ai, size_t bi) { po[oi] = fwd(pa[ai], pb[bi]); });
  }
  if (out.requires_grad) {
    attach_node(out, {a, b}, [out_shape, sa, sb, dfa, dfb](TensorT<T>& o) {
      auto& pa2 = o.node->parents[0];
      auto& pb2 = o.node->parents[1];
      const T* av = pa2.ptr();
      const T* bv = pb2.ptr();
      const T* g = o.grad->data();
      bool wa = pa2.requires_grad, wb = pb2.requires_grad;
      if (wa) pa2.ensure_grad();
      if (wb) pb2.ensure_grad();
      T* ga = wa ? pa2.grad->data() : nullptr;
      T* gb = wb ? pb2.grad->data() : nullptr;
      detail::for_each_bcast(out_shape, sa, sb, [&](size_t oi, size_t ai, size_t bi) {
        if (wa) ga[ai] += dfa(av[ai], bv[bi], g[oi]);
        if (wb) gb[bi] += dfb(av[ai], bv[bi], g[oi]);
      });
    });
  }
  return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return g; });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return -g; });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

// ----- elementwise unary ops -------------------------------------------------

// dfy takes (input, output, upstream).
template <class T, class FwdF, class DyF>
TensorT<T> unary_op(const TensorT<T>& a, FwdF fwd, DyF dfy) {
  TensorT<T> out = TensorT<T>::zeros(a.shape, want_grad(a));
  size_t n = a.numel();
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (out.requires_grad) {
    std::shared_ptr<std::vector<T>> saved = out.data;
    attach_node(out, {a}, [saved, dfy](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const T* x = p.ptr();
      const T* y = saved->data();
      const T* g = o.grad->data();
      T* gp = p.grad->data();
      size_t m = p.numel();
      for (size_t i = 0; i < m; ++i) gp[i] += dfy(x[i], y[i], g[i]);
    });
  }
  return out;
}

template <class T>
TensorT<T> neg(const TensorT<T>& a) {
  return unary_op(
      a, [](T x) { return -x; }, [](T, T, T g) { return -g; });
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
  return unary_op(
      a, [s](T x) { return x + s; }, [](T, T, T g) { return g; });
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  return unary_op(
      a, [s](T x) { return x * s; }, [s](T, T, T g) { return g * s; });
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  return unary_op(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <class T>
TensorT<T> tanh_op(const TensorT<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <class T>
TensorT<T> exp_op(const TensorT<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <class T>
TensorT<T> log_op(const TensorT<T>& a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <class T>
TensorT<T> relu(const TensorT<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <class T>
TensorT<T> pow_scalar(const TensorT<T>& a, T p) {
  return unary_op(
      a, [p](T x) { return std::pow(x, p); },
      [p](T x, T, T g) { return g * p * std::pow(x, p - T(1)); });
}

// ----- matmul ----------------------------------------------------------------

namespace detail {

// out (m x n) = op(a) * op(b); accumulates when acc is set.
template <class T>
void matmul_kernel(const T* a, int ar, int ac, bool ta, const T* b, int br, int bc, bool tb,
                   T* out, bool acc) {
  int m = ta ? ac : ar;
  int k = ta ? ar : ac;
  int n = tb ? br : bc;
  if (!acc) std::fill(out, out + static_cast<size_t>(m) * n, T(0));
  if (!ta && !tb) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      T* orow = out + static_cast<size_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        T av = a[static_cast<size_t>(i) * ac + kk];
        if (av == T(0)) continue;
        const T* brow = b + static_cast<size_t>(kk) * bc;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * ac;
      T* orow = out + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* brow = b + static_cast<size_t>(j) * bc;
        T s = T(0);
        for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
        orow[j] += s;
      }
    }
  } else if (ta && !tb) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      T* orow = out + static_cast<size_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        T av = a[static_cast<size_t>(kk) * ac + i];
        if (av == T(0)) continue;
        const T* brow = b + static_cast<size_t>(kk) * bc;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  } else {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      T* orow = out + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        T s = T(0);
        for (int kk = 0; kk < k; ++kk)
          s += a[static_cast<size_t>(kk) * ac + i] * b[static_cast<size_t>(j) * bc + kk];
        orow[j] += s;
      }
    }
  }
}

}  // namespace detail

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, bool ta = false, bool tb = false) {
  if (a.rank() != 2 || b.rank() != 2) throw std::runtime_error("matmul: rank-2 tensors required");
  int m = ta ? a.dim(1) : a.dim(0);
  int k = ta ? a.dim(0) : a.dim(1);
  int k2 = tb ? b.dim(1) : b.dim(0);
  int n = tb ? b.dim(0) : b.dim(1);
  if (k != k2)
    throw std::runtime_error("matmul: inner dimensions differ, " + shape_str(a.shape) +
                             (ta ? "^T" : "") + " * " + shape_str(b.shape) + (tb ? "^T" : ""));
  TensorT<T> out = TensorT<T>::zeros({m, n}, want_grad(a) || want_grad(b));
  detail::matmul_kernel(a.ptr(), a.dim(0), a.dim(1), ta, b.ptr(), b.dim(0), b.dim(1), tb,
                        out.ptr(), false);
  if (out.requires_grad) {
    attach_node(out, {a, b}, [ta, tb](TensorT<T>& o) {
      auto& pa = o.node->parents[0];
      auto& pb = o.node->parents[1];
      const T* g = o.grad->data();
      int gm = o.dim(0), gn = o.dim(1);
      if (pa.requires_grad) {
        pa.ensure_grad();
        if (!ta) {
          // gA = G * op(B)^T
          detail::matmul_kernel(g, gm, gn, false, pb.ptr(), pb.dim(0), pb.dim(1), !tb,
                                pa.grad->data(), true);
        } else {
          // gA = op(B) * G^T
          detail::matmul_kernel(pb.ptr(), pb.dim(0), pb.dim(1), tb, g, gm, gn, true,
                                pa.grad->data(), true);
        }
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        if (!tb) {
          // gB = op(A)^T * G
          detail::matmul_kernel(pa.ptr(), pa.dim(0), pa.dim(1), !ta, g, gm, gn, false,
                                pb.grad->data(), true);
        } else {
          // gB = G^T * op(A)
          detail::matmul_kernel(g, gm, gn, true, pa.ptr(), pa.dim(0), pa.dim(1), ta,
                                pb.grad->data(), true);
        }
      }
    });
  }
  return out;
}

// out[i,q] = sum_p a[i,p] * b[i, p*n + q]; b is [batch, m*n] read as [batch, m, n].
template <class T>
TensorT<T> bmm_rowvec(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::runtime_error("bmm_rowvec: rank-2 required");
  int batch = a.dim(0);
  int m = a.dim(1);
  if (b.dim(0) != batch || b.dim(1) % m != 0)
    throw std::runtime_error("bmm_rowvec: shapes " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
  int n = b.dim(1) / m;
  TensorT<T> out = TensorT<T>::zeros({batch, n}, want_grad(a) || want_grad(b));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
#pragma omp parallel for schedule(static)
  for (int i = 0; i < batch; ++i) {
    const T* arow = pa + static_cast<size_t>(i) * m;
    const T* brow = pb + static_cast<size_t>(i) * m * n;
    T* orow = po + static_cast<size_t>(i) * n;
    for (int p = 0; p < m; ++p) {
      T av = arow[p];
      const T* bq = brow + static_cast<size_t>(p) * n;
      for (int q = 0; q < n; ++q) orow[q] += av * bq[q];
    }
  }
  if (out.requires_grad) {
    attach_node(out, {a, b}, [m, n](TensorT<T>& o) {
      auto& pa2 = o.node->parents[0];
      auto& pb2 = o.node->parents[1];
      int batch2 = o.dim(0);
      const T* g = o.grad->data();
      bool wa = pa2.requires_grad, wb = pb2.requires_grad;
      if (wa) pa2.ensure_grad();
      if (wb) pb2.ensure_grad();
#pragma omp parallel for schedule(static)
      for (int i = 0; i < batch2; ++i) {
        const T* grow = g + static_cast<size_t>(i) * n;
        const T* arow = pa2.ptr() + static_cast<size_t>(i) * m;
        const T* brow = pb2.ptr() + static_cast<size_t>(i) * m * n;
        T* garow = wa ? pa2.grad->data() + static_cast<size_t>(i) * m : nullptr;
        T* gbrow = wb ? pb2.grad->data() + static_cast<size_t>(i) * m * n : nullptr;
        for (int p = 0; p < m; ++p) {
          const T* bq = brow + static_cast<size_t>(p) * n;
          T acc = T(0);
          for (int q = 0; q < n; ++q) {
            if (wb) gbrow[static_cast<size_t>(p) * n + q] += arow[p] * grow[q];
            acc += grow[q] * bq[q];
          }
          if (wa) garow[p] += acc;
        }
      }
    });
  }
  return out;
}

// ----- convolution -----------------------------------------------------------

namespace detail {

template <class T>
void conv2d_fwd(const T* x, int b, int ci, int h, int w, const T* k, int co, T* out) {
#pragma omp parallel for schedule(static) collapse(2)
  for (int ib = 0; ib < b; ++ib) {
    for (int oc = 0; oc < co; ++oc) {
      T* op = out + ((static_cast<size_t>(ib) * co + oc) * h) * w;
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          T s = T(0);
          for (int ic = 0; ic < ci; ++ic) {
            const T* xp = x + ((static_cast<size_t>(ib) * ci + ic) * h) * w;
            const T* kp = k + ((static_cast<size_t>(oc) * ci + ic) * 3) * 3;
            for (int ky = 0; ky < 3; ++ky) {
              int iy = y + ky - 1;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < 3; ++kx) {
                int ix = xx + kx - 1;
                if (ix < 0 || ix >= w) continue;
                s += xp[iy * w + ix] * kp[ky * 3 + kx];
              }
            }
          }
          op[y * w + xx] = s;
        }
      }
    }
  }
}

}  // namespace detail

// 3x3 cross-correlation, padding 1, so spatial extents are preserved.
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& kernel) {
  if (x.rank() != 4 || kernel.rank() != 4)
    throw std::runtime_error("conv2d: expected [b,ci,h,w] input and [co,ci,3,3] kernel");
  if (kernel.dim(2) != 3 || kernel.dim(3) != 3)
    throw std::runtime_error("conv2d: kernel spatial size must be 3x3");
  if (kernel.dim(1) != x.dim(1))
    throw std::runtime_error("conv2d: channel mismatch, input " + shape_str(x.shape) +
                             " kernel " + shape_str(kernel.shape));
  int b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3), co = kernel.dim(0);
  TensorT<T> out = TensorT<T>::zeros({b, co, h, w}, want_grad(x) || want_grad(kernel));
  detail::conv2d_fwd(x.ptr(), b, ci, h, w, kernel.ptr(), co, out.ptr());
  if (out.requires_grad) {
    attach_node(out, {x, kernel}, [](TensorT<T>& o) {
      auto& px = o.node->parents[0];
      auto& pk = o.node->parents[1];
      int b2 = o.dim(0), co2 = o.dim(1), h2 = o.dim(2), w2 = o.dim(3);
      int ci2 = px.dim(1);
      const T* g = o.grad->data();
      const T* xv = px.ptr();
      const T* kv = pk.ptr();
      if (px.requires_grad) {
        px.ensure_grad();
        T* gx = px.grad->data();
#pragma omp parallel for schedule(static)
        for (int ib = 0; ib < b2; ++ib) {
          for (int oc = 0; oc < co2; ++oc) {
            const T* gp = g + ((static_cast<size_t>(ib) * co2 + oc) * h2) * w2;
            for (int ic = 0; ic < ci2; ++ic) {
              T* gxp = gx + ((static_cast<size_t>(ib) * ci2 + ic) * h2) * w2;
              const T* kp = kv + ((static_cast<size_t>(oc) * ci2 + ic) * 3) * 3;
              for (int y = 0; y < h2; ++y) {
                for (int xx = 0; xx < w2; ++xx) {
                  T gv = gp[y * w2 + xx];
                  if (gv == T(0)) continue;
                  for (int ky = 0; ky < 3; ++ky) {
                    int iy = y + ky - 1;
                    if (iy < 0 || iy >= h2) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                      int ix = xx + kx - 1;
                      if (ix < 0 || ix >= w2) continue;
                      gxp[iy * w2 + ix] += gv * kp[ky * 3 + kx];
                    }
                  }
                }
              }
            }
          }
        }
      }
      if (pk.requires_grad) {
        pk.ensure_grad();
        T* gk = pk.grad->data();
#pragma omp parallel for schedule(static)
        for (int oc = 0; oc < co2; ++oc) {
          for (int ic = 0; ic < ci2; ++ic) {
            T* gkp = gk + ((static_cast<size_t>(oc) * ci2 + ic) * 3) * 3;
            for (int ib = 0; ib < b2; ++ib) {
              const T* gp = g + ((static_cast<size_t>(ib) * co2 + oc) * h2) * w2;
              const T* xp = xv + ((static_cast<size_t>(ib) * ci2 + ic) * h2) * w2;
              for (int y = 0; y < h2; ++y) {
                for (int xx = 0; xx < w2; ++xx) {
                  T gv = gp[y * w2 + xx];
                  if (gv == T(0)) continue;
                  for (int ky = 0; ky < 3; ++ky) {
                    int iy = y + ky - 1;
                    if (iy < 0 || iy >= h2) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                      int ix = xx + kx - 1;
                      if (ix < 0 || ix >= w2) continue;
                      gkp[ky * 3 + kx] += gv * xp[iy * w2 + ix];
                    }
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ----- structural ops ----------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int> new_shape) {
  size_t n = 1;
  for (int e : new_shape) n *= static_cast<size_t>(e);
  if (n != x.numel())
    throw std::runtime_error("reshape: cannot view " + shape_str(x.shape) + " as " +
                             shape_str(new_shape));
  TensorT<T> out = TensorT<T>::zeros(std::move(new_shape), want_grad(x));
  *out.data = *x.data;
  if (out.requires_grad) {
    attach_node(out, {x}, [](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const T* g = o.grad->data();
      T* gp = p.grad->data();
      size_t m = p.numel();
      for (size_t i = 0; i < m; ++i) gp[i] += g[i];
    });
  }
  return out;
}

// Reshape head and relation vectors to (rows x cols) and stack vertically into
// a single-channel image [b, 1, 2*rows, cols].
template <class T>
TensorT<T> stack_image(const TensorT<T>& vh, const TensorT<T>& vr, int rows, int cols) {
  if (vh.rank() != 2 || vr.rank() != 2 || vh.shape != vr.shape)
    throw std::runtime_error("stack_image: congruent [b,d] inputs required");
  int b = vh.dim(0), d = vh.dim(1);
  if (rows * cols != d)
    throw std::runtime_error("stack_image: rows*cols=" + std::to_string(rows * cols) +
                             " does not factor d=" + std::to_string(d));
  TensorT<T> out = TensorT<T>::zeros({b, 1, 2 * rows, cols}, want_grad(vh) || want_grad(vr));
  const T* ph = vh.ptr();
  const T* pr = vr.ptr();
  T* po = out.ptr();
  for (int i = 0; i < b; ++i) {
    T* img = po + static_cast<size_t>(i) * 2 * d;
    std::copy(ph + static_cast<size_t>(i) * d, ph + static_cast<size_t>(i + 1) * d, img);
    std::copy(pr + static_cast<size_t>(i) * d, pr + static_cast<size_t>(i + 1) * d, img + d);
  }
  if (out.requires_grad) {
    attach_node(out, {vh, vr}, [d](TensorT<T>& o) {
      auto& ph2 = o.node->parents[0];
      auto& pr2 = o.node->parents[1];
      int b2 = o.dim(0);
      const T* g = o.grad->data();
      for (int i = 0; i < b2; ++i) {
        const T* gi = g + static_cast<size_t>(i) * 2 * d;
        if (ph2.requires_grad) {
          ph2.ensure_grad();
          T* gh = ph2.grad->data() + static_cast<size_t>(i) * d;
          for (int j = 0; j < d; ++j) gh[j] += gi[j];
        }
        if (pr2.requires_grad) {
          pr2.ensure_grad();
          T* gr = pr2.grad->data() + static_cast<size_t>(i) * d;
          for (int j = 0; j < d; ++j) gr[j] += gi[d + j];
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_cols(const TensorT<T>& x, int offset, int len) {
  if (x.rank() != 2) throw std::runtime_error("slice_cols: rank-2 required");
  int n = x.dim(0), d = x.dim(1);
  if (offset < 0 || len <= 0 || offset + len > d)
    throw std::runtime_error("slice_cols: invalid range [" + std::to_string(offset) + "," +
                             std::to_string(offset + len) + ") of " + shape_str(x.shape));
  TensorT<T> out = TensorT<T>::zeros({n, len}, want_grad(x));
  const T* px = x.ptr();
  T* po = out.ptr();
  for (int i = 0; i < n; ++i)
    std::copy(px + static_cast<size_t>(i) * d + offset,
              px + static_cast<size_t>(i) * d + offset + len, po + static_cast<size_t>(i) * len);
  if (out.requires_grad) {
    attach_node(out, {x}, [offset, len, d](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      int n2 = o.dim(0);
      const T* g = o.grad->data();
      T* gp = p.grad->data();
      for (int i = 0; i < n2; ++i)
        for (int j = 0; j < len; ++j)
          gp[static_cast<size_t>(i) * d + offset + j] += g[static_cast<size_t>(i) * len + j];
    });
  }
  return out;
}

// Row gather: out[i,:] = table[ids[i],:]. Backward scatter-adds.
template <class T>
TensorT<T> rows(const TensorT<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::runtime_error("rows: rank-2 table required");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::runtime_error("rows: id " + std::to_string(id) + " outside [0," +
                               std::to_string(v) + ")");
  TensorT<T> out = TensorT<T>::zeros({static_cast<int>(ids.size()), d}, want_grad(table));
  const T* pt = table.ptr();
  T* po = out.ptr();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(pt + static_cast<size_t>(ids[i]) * d, pt + static_cast<size_t>(ids[i] + 1) * d,
              po + i * d);
  if (out.requires_grad) {
    attach_node(out, {table}, [ids, d](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const T* g = o.grad->data();
      T* gp = p.grad->data();
      for (size_t i = 0; i < ids.size(); ++i) {
        T* dst = gp + static_cast<size_t>(ids[i]) * d;
        const T* src = g + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Element gather from a vector-shaped tensor.
template <class T>
TensorT<T> gather_vec(const TensorT<T>& v, const std::vector<int>& ids) {
  if (v.rank() != 1) throw std::runtime_error("gather_vec: rank-1 required");
  int n = v.dim(0);
  for (int id : ids)
    if (id < 0 || id >= n) throw std::runtime_error("gather_vec: id out of range");
  TensorT<T> out = TensorT<T>::zeros({static_cast<int>(ids.size())}, want_grad(v));
  for (size_t i = 0; i < ids.size(); ++i) (*out.data)[i] = (*v.data)[static_cast<size_t>(ids[i])];
  if (out.requires_grad) {
    attach_node(out, {v}, [ids](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i)
        (*p.grad)[static_cast<size_t>(ids[i])] += (*o.grad)[i];
    });
  }
  return out;
}

// out[i,:] = v for every row.
template <class T>
TensorT<T> repeat_row(const TensorT<T>& v, int n) {
  if (v.rank() != 1) throw std::runtime_error("repeat_row: rank-1 required");
  int d = v.dim(0);
  TensorT<T> out = TensorT<T>::zeros({n, d}, want_grad(v));
  for (int i = 0; i < n; ++i)
    std::copy(v.ptr(), v.ptr() + d, out.ptr() + static_cast<size_t>(i) * d);
  if (out.requires_grad) {
    attach_node(out, {v}, [d](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      int n2 = o.dim(0);
      const T* g = o.grad->data();
      T* gp = p.grad->data();
      for (int i = 0; i < n2; ++i)
        for (int j = 0; j < d; ++j) gp[j] += g[static_cast<size_t>(i) * d + j];
    });
  }
  return out;
}

// Row-wise select: out[i,:] = mask[i] ? a[i,:] : b[i,:]. Exact (no arithmetic
// blend), so masked GRU steps match per-item encoding bit for bit.
template <class T>
TensorT<T> where_rows(const std::vector<char>& mask, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || a.shape != b.shape || static_cast<int>(mask.size()) != a.dim(0))
    throw std::runtime_error("where_rows: mask/shape mismatch");
  int n = a.dim(0), d = a.dim(1);
  TensorT<T> out = TensorT<T>::zeros(a.shape, want_grad(a) || want_grad(b));
  for (int i = 0; i < n; ++i) {
    const T* src = (mask[static_cast<size_t>(i)] ? a.ptr() : b.ptr()) + static_cast<size_t>(i) * d;
    std::copy(src, src + d, out.ptr() + static_cast<size_t>(i) * d);
  }
  if (out.requires_grad) {
    attach_node(out, {a, b}, [mask, d](TensorT<T>& o) {
      auto& pa = o.node->parents[0];
      auto& pb = o.node->parents[1];
      int n2 = o.dim(0);
      const T* g = o.grad->data();
      for (int i = 0; i < n2; ++i) {
        auto& dst = mask[static_cast<size_t>(i)] ? pa : pb;
        if (!dst.requires_grad) continue;
        dst.ensure_grad();
        T* gp = dst.grad->data() + static_cast<size_t>(i) * d;
        const T* gi = g + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) gp[j] += gi[j];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros({1}, want_grad(x));
  T s = T(0);
  const T* px = x.ptr();
  size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) s += px[i];
  (*out.data)[0] = s;
  if (out.requires_grad) {
    attach_node(out, {x}, [](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      T g = (*o.grad)[0];
      for (auto& v : *p.grad) v += g;
    });
  }
  return out;
}

// ----- softmax / loss ---------------------------------------------------------

template <class T>
std::vector<T> softmax_rows(const TensorT<T>& logits) {
  if (logits.rank() != 2) throw std::runtime_error("softmax_rows: rank-2 required");
  int b = logits.dim(0), c = logits.dim(1);
  std::vector<T> p(logits.numel());
  const T* pl = logits.ptr();
  for (int i = 0; i < b; ++i) {
    const T* row = pl + static_cast<size_t>(i) * c;
    T* prow = p.data() + static_cast<size_t>(i) * c;
    T m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    T s = T(0);
    for (int j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - m);
      s += prow[j];
    }
    for (int j = 0; j < c; ++j) prow[j] /= s;
  }
  return p;
}

// Multi-hot cross entropy over rows; each target row is normalized by its
// positive count so the loss scale does not depend on out-degree.
template <class T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const TensorT<T>& targets) {
  if (logits.rank() != 2 || logits.shape != targets.shape)
    throw std::runtime_error("softmax_cross_entropy: logits " + shape_str(logits.shape) +
                             " vs targets " + shape_str(targets.shape));
  int b = logits.dim(0), c = logits.dim(1);
  const T* pl = logits.ptr();
  const T* pt = targets.ptr();
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  auto tnorm = std::make_shared<std::vector<T>>(logits.numel());
  T loss = T(0);
  for (int i = 0; i < b; ++i) {
    const T* lrow = pl + static_cast<size_t>(i) * c;
    const T* trow = pt + static_cast<size_t>(i) * c;
    T* prow = probs->data() + static_cast<size_t>(i) * c;
    T* nrow = tnorm->data() + static_cast<size_t>(i) * c;
    T cnt = T(0);
    T m = lrow[0];
    for (int j = 0; j < c; ++j) {
      if (!std::isfinite(static_cast<double>(lrow[j])))
        throw std::runtime_error("softmax_cross_entropy: non-finite logit in row " +
                                 std::to_string(i));
      m = std::max(m, lrow[j]);
      cnt += trow[j];
    }
    if (cnt <= T(0))
      throw std::runtime_error("softmax_cross_entropy: all-zero target row " + std::to_string(i));
    T s = T(0);
    for (int j = 0; j < c; ++j) {
      prow[j] = std::exp(lrow[j] - m);
      s += prow[j];
    }
    T lse = m + std::log(s);
    for (int j = 0; j < c; ++j) {
      prow[j] /= s;
      nrow[j] = trow[j] / cnt;
      if (nrow[j] != T(0)) loss += nrow[j] * (lse - lrow[j]);
    }
  }
  loss /= static_cast<T>(b);
  TensorT<T> out = TensorT<T>::scalar(loss, want_grad(logits));
  if (out.requires_grad) {
    attach_node(out, {logits}, [probs, tnorm, b, c](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      T g = (*o.grad)[0] / static_cast<T>(b);
      T* gp = p.grad->data();
      size_t n = static_cast<size_t>(b) * c;
      for (size_t i = 0; i < n; ++i) gp[i] += g * ((*probs)[i] - (*tnorm)[i]);
    });
  }
  return out;
}

// ----- dropout ------------------------------------------------------------------

template <class T>
TensorT<T> dropout(const TensorT<T>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::runtime_error("dropout: rate " + std::to_string(rate) + " outside [0,1)");
  if (!training || rate == 0.0) return x;
  TensorT<T> out = TensorT<T>::zeros(x.shape, want_grad(x));
  size_t n = x.numel();
  auto mask = std::make_shared<std::vector<T>>(n);
  T scale = static_cast<T>(1.0 / (1.0 - rate));
  const T* px = x.ptr();
  T* po = out.ptr();
  for (size_t i = 0; i < n; ++i) {
    (*mask)[i] = rng.uniform() < rate ? T(0) : scale;
    po[i] = px[i] * (*mask)[i];
  }
  if (out.requires_grad) {
    attach_node(out, {x}, [mask](TensorT<T>& o) {
      auto& p = o.node->parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const T* g = o.grad->data();
      T* gp = p.grad->data();
      for (size_t i = 0; i < p.numel(); ++i) gp[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

// ----- batch normalization --------------------------------------------------------

// Per-channel batch norm over [n,c] or [n,c,h,w]. Training mode uses
// population statistics of the batch and updates the running buffers in
// place; the struct is single-owner while training.
template <class T>
struct BatchNormT {
  TensorT<T> gamma, beta;               // trainable
  TensorT<T> running_mean, running_var; // buffers, requires_grad=false
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormT() = default;
  explicit BatchNormT(int channels) {
    gamma = TensorT<T>::zeros({channels}, true);
    std::fill(gamma.data->begin(), gamma.data->end(), T(1));
    beta = TensorT<T>::zeros({channels}, true);
    running_mean = TensorT<T>::zeros({channels});
    running_var = TensorT<T>::zeros({channels});
    std::fill(running_var.data->begin(), running_var.data->end(), T(1));
  }

  int channels() const { return gamma.dim(0); }

  TensorT<T> forward(const TensorT<T>& x, bool training) {
    if (x.rank() != 2 && x.rank() != 4)
      throw std::runtime_error("batchnorm: rank-2 or rank-4 input required");
    int c = x.dim(1);
    if (c != channels())
      throw std::runtime_error("batchnorm: channel mismatch " + std::to_string(c) + " vs " +
                               std::to_string(channels()));
    int n = x.dim(0);
    int spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    size_t per_channel = static_cast<size_t>(n) * spatial;
    if (training && per_channel < 2)
      throw std::runtime_error("batchnorm: batch of 1 in training mode");

    std::vector<T> mean_v(c), invstd_v(c);
    if (training) {
      for (int ch = 0; ch < c; ++ch) {
        double m = 0;
        for_channel(x, ch, [&](T v) { m += v; });
        m /= static_cast<double>(per_channel);
        double var = 0;
        for_channel(x, ch, [&](T v) {
          double dd = v - m;
          var += dd * dd;
        });
        var /= static_cast<double>(per_channel);
        mean_v[ch] = static_cast<T>(m);
        invstd_v[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
        (*running_mean.data)[ch] =
            static_cast<T>((1.0 - momentum) * (*running_mean.data)[ch] + momentum * m);
        (*running_var.data)[ch] =
            static_cast<T>((1.0 - momentum) * (*running_var.data)[ch] + momentum * var);
      }
    } else {
      for (int ch = 0; ch < c; ++ch) {
        mean_v[ch] = (*running_mean.data)[ch];
        invstd_v[ch] = static_cast<T>(1.0 / std::sqrt((*running_var.data)[ch] + eps));
      }
    }

    TensorT<T> out =
        TensorT<T>::zeros(x.shape, want_grad(x) || want_grad(gamma) || want_grad(beta));
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    {
      const T* px = x.ptr();
      T* po = out.ptr();
      const T* pg = gamma.ptr();
      const T* pb = beta.ptr();
      size_t i = 0;
      for (int ib = 0; ib < n; ++ib)
        for (int ch = 0; ch < c; ++ch)
          for (int s = 0; s < spatial; ++s, ++i) {
            (*xhat)[i] = (px[i] - mean_v[ch]) * invstd_v[ch];
            po[i] = pg[ch] * (*xhat)[i] + pb[ch];
          }
    }
    if (out.requires_grad) {
      auto inv = std::make_shared<std::vector<T>>(invstd_v);
      int cc = c, sp = spatial;
      bool train_stats = training;
      attach_node(out, {x, gamma, beta}, [xhat, inv, cc, sp, train_stats](TensorT<T>& o) {
        auto& px = o.node->parents[0];
        auto& pg = o.node->parents[1];
        auto& pb = o.node->parents[2];
        int n2 = o.dim(0);
        size_t per_ch = static_cast<size_t>(n2) * sp;
        const T* g = o.grad->data();
        // per-channel sums of g and g*xhat
        std::vector<double> sg(cc, 0.0), sgx(cc, 0.0);
        {
          size_t i = 0;
          for (int ib = 0; ib < n2; ++ib)
            for (int ch = 0; ch < cc; ++ch)
              for (int s = 0; s < sp; ++s, ++i) {
                sg[ch] += g[i];
                sgx[ch] += static_cast<double>(g[i]) * (*xhat)[i];
              }
        }
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (int ch = 0; ch < cc; ++ch) (*pg.grad)[ch] += static_cast<T>(sgx[ch]);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (int ch = 0; ch < cc; ++ch) (*pb.grad)[ch] += static_cast<T>(sg[ch]);
        }
        if (px.requires_grad) {
          px.ensure_grad();
          T* gx = px.grad->data();
          const T* gamma_v = pg.ptr();
          size_t i = 0;
          for (int ib = 0; ib < n2; ++ib)
            for (int ch = 0; ch < cc; ++ch)
              for (int s = 0; s < sp; ++s, ++i) {
                double gi = g[i];
                if (train_stats) {
                  gi -= sg[ch] / static_cast<double>(per_ch);
                  gi -= (*xhat)[i] * sgx[ch] / static_cast<double>(per_ch);
                }
                gx[i] += static_cast<T>(gamma_v[ch] * (*inv)[ch] * gi);
              }
        }
      });
    }
    return out;
  }

 private:
  template <class F>
  static void for_channel(const TensorT<T>& x, int ch, F&& f) {
    int n = x.dim(0), c = x.dim(1);
    int spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const T* px = x.ptr();
    for (int ib = 0; ib < n; ++ib) {
      const T* base = px + (static_cast<size_t>(ib) * c + ch) * spatial;
      for (int s = 0; s < spatial; ++s) f(base[s]);
    }
  }
};

}  // namespace okbc

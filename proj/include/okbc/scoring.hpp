#pragma once

// 1-N scoring functions: TuckER core-tensor contraction, ConvE convolutional
// scorer with tail biases, and 5*E Moebius transforms of complex projective
// lines. All take head/relation embeddings for a batch plus a candidate tail
// matrix and produce a [batch, candidates] logit matrix.

#include <optional>
#include <variant>
#include <vector>

#include "okbc/tensor.hpp"

namespace okbc {

// Largest factorization rows*cols = d with rows <= sqrt(d); yields the
// reference reshapes 15x20 for d=300 and 20x25 for d=500.
inline std::pair<int, int> conve_reshape_dims(int d) {
  int best = -1;
  for (int r = 1; r * r <= d; ++r)
    if (d % r == 0) best = r;
  if (best <= 0) throw std::runtime_error("conve: no reshape factorization for d=1");
  if (best == 1 && d > 1)
    throw std::runtime_error("conve: d=" + std::to_string(d) +
                             " has no nontrivial rows*cols factorization");
  return {best, d / best};
}

// ---------------------------------------------------------------------------
// TuckER: logits[i,j] = sum_{p,q,s} W[p,q,s] vh[i,p] vr[i,s] tails[j,q].
// Batch norm and the three dropouts sit at the reference positions.

template <class T>
struct TuckerT {
  TensorT<T> core;  // [d,d,d], indexed [head, tail, relation]
  BatchNormT<T> bn0, bn1;
  double dropout_rate = 0.0;

  TuckerT() = default;
  TuckerT(int d, double dropout, Rng& rng)
      : core(TensorT<T>::uniform({d, d, d}, -1.0, 1.0, rng)),
        bn0(d),
        bn1(d),
        dropout_rate(dropout) {}

  int dim() const { return core.dim(0); }

  TensorT<T> score(const TensorT<T>& vh, const TensorT<T>& vr, const TensorT<T>& tails,
                   bool training, Rng& rng) {
    int d = dim();
    if (vh.dim(1) != d || vr.dim(1) != d || tails.dim(1) != d)
      throw std::runtime_error("tucker: dimension mismatch with core " + shape_str(core.shape));
    TensorT<T> x = bn0.forward(vh, training);
    x = dropout(x, dropout_rate, training, rng);
    // contract the relation index: M[i,(p,q)] = sum_s W[p,q,s] vr[i,s]
    TensorT<T> core_flat = reshape(core, {d * d, d});
    TensorT<T> m = matmul(vr, core_flat, false, true);
    m = dropout(m, dropout_rate, training, rng);
    // contract the head index: f[i,q] = sum_p x[i,p] M[i,(p,q)]
    TensorT<T> f = bmm_rowvec(x, m);
    f = bn1.forward(f, training);
    f = dropout(f, dropout_rate, training, rng);
    return matmul(f, tails, false, true);
  }
};

// ---------------------------------------------------------------------------
// ConvE: stack reshaped head/relation vectors into an image, then
// bn -> conv -> relu -> bn -> dropout -> flatten -> project -> relu -> dropout;
// logits = feature * tails^T + tail bias.

template <class T>
struct ConvET {
  TensorT<T> kernel;  // [32,1,3,3]
  TensorT<T> proj;    // [32*2*rows*cols, d]
  TensorT<T> bias;    // [num_entities], entity-specific, not transferable
  BatchNormT<T> bn0, bn1;
  int rows = 0, cols = 0;
  double dropout_rate = 0.0;

  static constexpr int kChannels = 32;

  ConvET() = default;
  ConvET(int d, int n_entities, double dropout, Rng& rng, std::pair<int, int> reshape_dims)
      : rows(reshape_dims.first), cols(reshape_dims.second), dropout_rate(dropout) {
    if (rows * cols != d) throw std::runtime_error("conve: rows*cols != d");
    kernel = TensorT<T>::xavier({kChannels, 1, 3, 3}, rng);
    proj = TensorT<T>::xavier({flat_dim(), d}, rng);
    bias = TensorT<T>::uniform({n_entities}, -1e-3, 1e-3, rng);
    bn0 = BatchNormT<T>(1);
    bn1 = BatchNormT<T>(kChannels);
  }

  int dim() const { return rows * cols; }
  int flat_dim() const { return kChannels * 2 * rows * cols; }

  // candidate_ids: logit columns correspond to these entity ids (for the
  // bias); empty means all entities in table order.
  TensorT<T> features(const TensorT<T>& vh, const TensorT<T>& vr, bool training, Rng& rng) {
    TensorT<T> img = stack_image(vh, vr, rows, cols);
    TensorT<T> x = bn0.forward(img, training);
    x = conv2d(x, kernel);
    x = relu(x);
    x = bn1.forward(x, training);
    x = dropout(x, dropout_rate, training, rng);
    x = reshape(x, {vh.dim(0), flat_dim()});
    TensorT<T> f = matmul(x, proj);
    f = relu(f);
    return dropout(f, dropout_rate, training, rng);
  }

  TensorT<T> score(const TensorT<T>& vh, const TensorT<T>& vr, const TensorT<T>& tails,
                   const std::vector<int>& candidate_ids, bool training, Rng& rng) {
    TensorT<T> f = features(vh, vr, training, rng);
    TensorT<T> logits = matmul(f, tails, false, true);
    TensorT<T> b = candidate_ids.empty() ? bias : gather_vec(bias, candidate_ids);
    return add(logits, reshape(b, {1, b.dim(0)}));
  }
};

// ---------------------------------------------------------------------------
// 5*E: entities are K points of the complex projective line stored as
// [h1.re | h1.im | h2.re | h2.im] blocks of width K (d = 4K); relations are K
// complex 2x2 matrices [[a,b],[c,d]] stored as
// [a.re|a.im|b.re|b.im|c.re|c.im|d.re|d.im] (8K). The score applies the
// Moebius action (u1,u2) = (a h1 + b h2, c h1 + d h2) and takes the real part
// of the Hermitian product with the tail. No parameters are shared across
// relations or entities.

template <class T>
struct FiveStarT {
  int coords = 0;  // K

  FiveStarT() = default;
  explicit FiveStarT(int k) : coords(k) {}

  int entity_dim() const { return 4 * coords; }
  int relation_dim() const { return 8 * coords; }

  TensorT<T> score(const TensorT<T>& vh, const TensorT<T>& vr, const TensorT<T>& tails) const {
    int k = coords;
    if (vh.dim(1) != 4 * k || tails.dim(1) != 4 * k)
      throw std::runtime_error("5star: entity layout must be 4K=" + std::to_string(4 * k) +
                               ", got " + shape_str(vh.shape));
    if (vr.dim(1) != 8 * k)
      throw std::runtime_error("5star: relation layout must be 8K=" + std::to_string(8 * k) +
                               ", got " + shape_str(vr.shape));
    TensorT<T> h1r = slice_cols(vh, 0, k), h1i = slice_cols(vh, k, k);
    TensorT<T> h2r = slice_cols(vh, 2 * k, k), h2i = slice_cols(vh, 3 * k, k);
    TensorT<T> ar = slice_cols(vr, 0, k), ai = slice_cols(vr, k, k);
    TensorT<T> br = slice_cols(vr, 2 * k, k), bi = slice_cols(vr, 3 * k, k);
    TensorT<T> cr = slice_cols(vr, 4 * k, k), ci = slice_cols(vr, 5 * k, k);
    TensorT<T> dr = slice_cols(vr, 6 * k, k), di = slice_cols(vr, 7 * k, k);
    // u1 = a*h1 + b*h2, u2 = c*h1 + d*h2 (complex)
    TensorT<T> u1r = add(sub(mul(ar, h1r), mul(ai, h1i)), sub(mul(br, h2r), mul(bi, h2i)));
    TensorT<T> u1i = add(add(mul(ar, h1i), mul(ai, h1r)), add(mul(br, h2i), mul(bi, h2r)));
    TensorT<T> u2r = add(sub(mul(cr, h1r), mul(ci, h1i)), sub(mul(dr, h2r), mul(di, h2i)));
    TensorT<T> u2i = add(add(mul(cr, h1i), mul(ci, h1r)), add(mul(dr, h2i), mul(di, h2r)));
    // Re(u . conj(t)) summed over coordinates
    TensorT<T> t1r = slice_cols(tails, 0, k), t1i = slice_cols(tails, k, k);
    TensorT<T> t2r = slice_cols(tails, 2 * k, k), t2i = slice_cols(tails, 3 * k, k);
    TensorT<T> logits = matmul(u1r, t1r, false, true);
    logits = add(logits, matmul(u1i, t1i, false, true));
    logits = add(logits, matmul(u2r, t2r, false, true));
    return add(logits, matmul(u2i, t2i, false, true));
  }
};

// ---------------------------------------------------------------------------
// N3 regularization: weight * sum of |component|^3, complex entries
// contributing modulus cubed.

template <class T>
TensorT<T> n3_real(const TensorT<T>& x) {
  return sum_all(pow_scalar(mul(x, x), T(1.5)));
}

template <class T>
TensorT<T> n3_complex(const TensorT<T>& re, const TensorT<T>& im) {
  return sum_all(pow_scalar(add(mul(re, re), mul(im, im)), T(1.5)));
}

// Entity/relation matrices in 5*E block layout (widths 4K and 8K).
template <class T>
TensorT<T> n3_complex_blocks(const TensorT<T>& m, int k) {
  int pairs = m.dim(1) / (2 * k);
  TensorT<T> total = TensorT<T>::scalar(T(0));
  for (int p = 0; p < pairs; ++p) {
    TensorT<T> re = slice_cols(m, 2 * p * k, k);
    TensorT<T> im = slice_cols(m, (2 * p + 1) * k, k);
    total = add(total, n3_complex(re, im));
  }
  return total;
}

template <class T>
TensorT<T> n3_penalty(const std::vector<TensorT<T>>& complex_blocks, int k, double weight) {
  if (weight < 0.0) throw std::runtime_error("n3_penalty: negative weight");
  TensorT<T> total = TensorT<T>::scalar(T(0));
  if (weight == 0.0) return total;
  for (const auto& m : complex_blocks) total = add(total, n3_complex_blocks(m, k));
  return mul_scalar(total, static_cast<T>(weight));
}

}  // namespace okbc

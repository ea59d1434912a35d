#pragma once

// Entity/relation encoders: per-id embedding tables (NoEncoder) or a
// single-layer unidirectional GRU over tokenized names. Entity and relation
// encoders are disjoint parameter sets, each with its own word embeddings.

#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "okbc/tensor.hpp"

namespace okbc {

template <class T>
struct EmbeddingTable {
  TensorT<T> table;  // [num_items, d]

  int dim() const { return table.dim(1); }
  int items() const { return table.dim(0); }
};

template <class T>
struct GruEncoderT {
  TensorT<T> word_emb;                    // [vocab, d_w]
  TensorT<T> w_update, w_reset, w_cand;   // [d_w, d]
  TensorT<T> u_update, u_reset, u_cand;   // [d, d]
  TensorT<T> b_update, b_reset, b_cand;   // [d]
  TensorT<T> empty_name;                  // [d], fallback for empty names

  int dim() const { return u_update.dim(0); }
  int word_dim() const { return word_emb.dim(1); }
  int vocab() const { return word_emb.dim(0); }
};

template <class T>
GruEncoderT<T> make_gru_encoder(int vocab, int word_dim, int dim, Rng& rng) {
  GruEncoderT<T> enc;
  enc.word_emb = TensorT<T>::xavier({vocab, word_dim}, rng);
  enc.w_update = TensorT<T>::uniform({word_dim, dim}, -0.1, 0.1, rng);
  enc.w_reset = TensorT<T>::uniform({word_dim, dim}, -0.1, 0.1, rng);
  enc.w_cand = TensorT<T>::uniform({word_dim, dim}, -0.1, 0.1, rng);
  enc.u_update = TensorT<T>::uniform({dim, dim}, -0.1, 0.1, rng);
  enc.u_reset = TensorT<T>::uniform({dim, dim}, -0.1, 0.1, rng);
  enc.u_cand = TensorT<T>::uniform({dim, dim}, -0.1, 0.1, rng);
  enc.b_update = TensorT<T>::zeros({dim}, true);
  enc.b_reset = TensorT<T>::zeros({dim}, true);
  enc.b_cand = TensorT<T>::zeros({dim}, true);
  enc.empty_name = TensorT<T>::uniform({dim}, -0.1, 0.1, rng);
  return enc;
}

// z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
// c = tanh(x Wc + (r*h) Uc + bc), h' = (1-z)*h + z*c
template <class T>
TensorT<T> gru_step(const GruEncoderT<T>& enc, const TensorT<T>& x, const TensorT<T>& h) {
  TensorT<T> z = sigmoid(add(add(matmul(x, enc.w_update), matmul(h, enc.u_update)),
                             reshape(enc.b_update, {1, enc.dim()})));
  TensorT<T> r = sigmoid(add(add(matmul(x, enc.w_reset), matmul(h, enc.u_reset)),
                             reshape(enc.b_reset, {1, enc.dim()})));
  TensorT<T> c = tanh_op(add(add(matmul(x, enc.w_cand), matmul(mul(r, h), enc.u_cand)),
                             reshape(enc.b_cand, {1, enc.dim()})));
  return add(mul(sub(TensorT<T>::from({1, 1}, {T(1)}), z), h), mul(z, c));
}

// Runs the GRU left to right from a zero initial state over padded token-id
// lists and returns the final hidden state per row. Rows past their length
// carry the state through a row select, so batched results equal per-item
// encoding exactly. Empty lists map to the learned fallback vector.
template <class T>
TensorT<T> encode_token_lists(const GruEncoderT<T>& enc,
                              const std::vector<std::vector<int>>& lists) {
  int n = static_cast<int>(lists.size());
  if (n == 0) throw std::runtime_error("encode_token_lists: empty batch");
  size_t max_len = 0;
  for (const auto& l : lists) max_len = std::max(max_len, l.size());
  TensorT<T> h = TensorT<T>::zeros({n, enc.dim()});
  for (size_t t = 0; t < max_len; ++t) {
    std::vector<int> ids(n, 0);
    std::vector<char> active(n, 0);
    for (int i = 0; i < n; ++i)
      if (t < lists[i].size()) {
        ids[i] = lists[i][t];
        active[i] = 1;
      }
    TensorT<T> x = rows(enc.word_emb, ids);
    TensorT<T> h_next = gru_step(enc, x, h);
    h = where_rows(active, h_next, h);
  }
  std::vector<char> nonempty(n, 0);
  bool any_empty = false;
  for (int i = 0; i < n; ++i) {
    nonempty[i] = !lists[i].empty();
    any_empty = any_empty || lists[i].empty();
  }
  if (any_empty) h = where_rows(nonempty, h, repeat_row(enc.empty_name, n));
  return h;
}

template <class T>
using EncoderVariant = std::variant<EmbeddingTable<T>, GruEncoderT<T>>;

// item_tokens: per-id token-id lists (ignored by the table encoder).
template <class T>
TensorT<T> encode_items(const EncoderVariant<T>& encoder, const std::vector<int>& ids,
                        const std::vector<std::vector<int>>& item_tokens) {
  if (const auto* table = std::get_if<EmbeddingTable<T>>(&encoder)) {
    return rows(table->table, ids);
  }
  const auto& gru = std::get<GruEncoderT<T>>(encoder);
  // encode unique names once, then gather
  std::unordered_map<int, int> unique_pos;
  std::vector<int> unique_ids;
  std::vector<int> positions(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= static_cast<int>(item_tokens.size()))
      throw std::runtime_error("encode_items: id " + std::to_string(id) + " out of range");
    auto [it, inserted] = unique_pos.emplace(id, static_cast<int>(unique_ids.size()));
    if (inserted) unique_ids.push_back(id);
    positions[i] = it->second;
  }
  std::vector<std::vector<int>> lists;
  lists.reserve(unique_ids.size());
  for (int id : unique_ids) lists.push_back(item_tokens[id]);
  TensorT<T> encoded = encode_token_lists(gru, lists);
  if (unique_ids.size() == ids.size()) {
    bool identity = true;
    for (size_t i = 0; i < ids.size(); ++i) identity = identity && positions[i] == (int)i;
    if (identity) return encoded;
  }
  return rows(encoded, positions);
}

}  // namespace okbc

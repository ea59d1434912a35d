#pragma once

// Transfer initialization from a GRU-encoder pre-trained checkpoint:
// GRU -> GRU parameter/vocabulary copy, GRU -> NoEncoder table generation by
// encoding names, and the per-model shared-parameter rules.

#include <string>
#include <vector>

#include "okbc/checkpoint.hpp"
#include "okbc/evaluate.hpp"
#include "okbc/model.hpp"

namespace okbc {

struct TransferOptions {
  bool reset_batchnorm_stats = false;
};

namespace detail {

// Deterministic per-item randomness: stream (seed, purpose, item name).
inline Rng item_rng(uint64_t seed, const std::string& purpose, const std::string& item) {
  return Rng(mix_seed(mix_seed(seed, hash_name(purpose)), hash_name(item)));
}

template <class T>
void fill_from(const CheckpointData& ck, const std::string& name, TensorT<T>& dst) {
  const CheckpointTensor& src = ck.tensor(name);
  if (src.shape != dst.shape)
    throw std::runtime_error("transfer: tensor '" + name + "' has shape " +
                             shape_str(src.shape) + " in the checkpoint but " +
                             shape_str(dst.shape) + " in the target");
  for (size_t i = 0; i < src.data.size(); ++i) (*dst.data)[i] = static_cast<T>(src.data[i]);
}

}  // namespace detail

// Copies the parameters that are shared among all inputs: the TuckER core
// tensor, the ConvE CNN (kernel + projection) with batch-norm state, nothing
// for 5*E. ConvE tail biases are entity-specific and drawn fresh.
template <class T>
void transfer_shared_params(const CheckpointData& ck, KbcModel<T>& target,
                            const TripleStore& target_store, const TransferOptions& opt = {}) {
  if (ck.model != target.model_kind)
    throw std::runtime_error("transfer: checkpoint model kind '" + to_string(ck.model) +
                             "' does not match target '" + to_string(target.model_kind) + "'");
  if (ck.dim != target.dim)
    throw std::runtime_error("transfer: checkpoint dimension " + std::to_string(ck.dim) +
                             " does not match target dimension " + std::to_string(target.dim) +
                             "; cross-dimension transfer is not supported");
  auto copy_bn = [&](const std::string& prefix, BatchNormT<T>& bn) {
    detail::fill_from(ck, prefix + ".gamma", bn.gamma);
    detail::fill_from(ck, prefix + ".beta", bn.beta);
    if (opt.reset_batchnorm_stats) {
      std::fill(bn.running_mean.data->begin(), bn.running_mean.data->end(), T(0));
      std::fill(bn.running_var.data->begin(), bn.running_var.data->end(), T(1));
    } else {
      detail::fill_from(ck, prefix + ".running_mean", bn.running_mean);
      detail::fill_from(ck, prefix + ".running_var", bn.running_var);
    }
  };
  if (auto* t = std::get_if<TuckerT<T>>(&target.scorer)) {
    detail::fill_from(ck, "tucker.core", t->core);
    copy_bn("tucker.bn0", t->bn0);
    copy_bn("tucker.bn1", t->bn1);
  } else if (auto* c = std::get_if<ConvET<T>>(&target.scorer)) {
    detail::fill_from(ck, "conve.kernel", c->kernel);
    detail::fill_from(ck, "conve.proj", c->proj);
    copy_bn("conve.bn0", c->bn0);
    copy_bn("conve.bn1", c->bn1);
    for (int e = 0; e < target.n_entities; ++e) {
      Rng r = detail::item_rng(target.seed, "conve.bias", target_store.entity_names[e]);
      (*c->bias.data)[e] = static_cast<T>(r.uniform(-1e-3, 1e-3));
    }
  }
  // 5*E: no parameters shared between relations and entities
}

// GRU fine-tuning: gate parameters come from the pre-trained GRU; word
// embeddings are copied for overlapping words and drawn fresh for new ones.
template <class T>
void init_finetune_gru(const CheckpointData& ck, KbcModel<T>& target,
                       const TripleStore& target_store, const TransferOptions& opt = {}) {
  if (ck.encoder != EncoderKind::gru)
    throw std::runtime_error("init_finetune_gru: checkpoint was trained with " +
                             to_string(ck.encoder) + " encoders, GRU required");
  if (target.encoder_kind != EncoderKind::gru)
    throw std::runtime_error("init_finetune_gru: target model does not use GRU encoders");
  std::unordered_map<std::string, int> src_word_ids;
  for (size_t i = 0; i < ck.words.size(); ++i)
    src_word_ids.emplace(ck.words[i], static_cast<int>(i));
  auto copy_encoder = [&](const std::string& prefix, EncoderVariant<T>& enc) {
    auto& g = std::get<GruEncoderT<T>>(enc);
    detail::fill_from(ck, prefix + ".w_update", g.w_update);
    detail::fill_from(ck, prefix + ".w_reset", g.w_reset);
    detail::fill_from(ck, prefix + ".w_cand", g.w_cand);
    detail::fill_from(ck, prefix + ".u_update", g.u_update);
    detail::fill_from(ck, prefix + ".u_reset", g.u_reset);
    detail::fill_from(ck, prefix + ".u_cand", g.u_cand);
    detail::fill_from(ck, prefix + ".b_update", g.b_update);
    detail::fill_from(ck, prefix + ".b_reset", g.b_reset);
    detail::fill_from(ck, prefix + ".b_cand", g.b_cand);
    detail::fill_from(ck, prefix + ".empty_name", g.empty_name);
    const CheckpointTensor& src_emb = ck.tensor(prefix + ".word_emb");
    int d_w = g.word_dim();
    if (src_emb.shape.size() != 2 || src_emb.shape[1] != d_w)
      throw std::runtime_error("init_finetune_gru: word dimension " +
                               std::to_string(src_emb.shape[1]) + " in checkpoint, target has " +
                               std::to_string(d_w));
    for (size_t w = 0; w < target.words.size(); ++w) {
      auto it = src_word_ids.find(target.words[w]);
      T* row = g.word_emb.ptr() + w * static_cast<size_t>(d_w);
      if (it != src_word_ids.end()) {
        const float* src = src_emb.data.data() + static_cast<size_t>(it->second) * d_w;
        for (int j = 0; j < d_w; ++j) row[j] = static_cast<T>(src[j]);
      } else {
        Rng r = detail::item_rng(target.seed, prefix + ".word_row", target.words[w]);
        for (int j = 0; j < d_w; ++j) row[j] = static_cast<T>(r.uniform(-0.1, 0.1));
      }
    }
  };
  copy_encoder("entity_encoder", target.entity_encoder);
  copy_encoder("relation_encoder", target.relation_encoder);
  transfer_shared_params(ck, target, target_store, opt);
}

// Pre-trained GRU encoders reconstructed from a checkpoint, for generating
// NoEncoder initial tables and zero-shot embeddings.
template <class T>
struct PretrainedGru {
  GruEncoderT<T> entity, relation;
  std::unordered_map<std::string, int> word_ids;

  // Token ids of the words of `name` that exist in the source vocabulary.
  std::vector<int> known_tokens(const std::string& name) const {
    std::vector<int> ids;
    for (const std::string& w : tokenize(name)) {
      auto it = word_ids.find(w);
      if (it != word_ids.end()) ids.push_back(it->second);
    }
    return ids;
  }
};

template <class T>
PretrainedGru<T> load_pretrained_gru(const CheckpointData& ck) {
  if (ck.encoder != EncoderKind::gru)
    throw std::runtime_error("checkpoint was trained with " + to_string(ck.encoder) +
                             " encoders, GRU required");
  PretrainedGru<T> out;
  auto load_enc = [&](const std::string& prefix, GruEncoderT<T>& g) {
    const CheckpointTensor& emb = ck.tensor(prefix + ".word_emb");
    const CheckpointTensor& u = ck.tensor(prefix + ".u_update");
    int vocab = emb.shape[0], d_w = emb.shape[1], d = u.shape[0];
    Rng dummy(0);
    g = make_gru_encoder<T>(vocab, d_w, d, dummy);
    detail::fill_from(ck, prefix + ".word_emb", g.word_emb);
    detail::fill_from(ck, prefix + ".w_update", g.w_update);
    detail::fill_from(ck, prefix + ".w_reset", g.w_reset);
    detail::fill_from(ck, prefix + ".w_cand", g.w_cand);
    detail::fill_from(ck, prefix + ".u_update", g.u_update);
    detail::fill_from(ck, prefix + ".u_reset", g.u_reset);
    detail::fill_from(ck, prefix + ".u_cand", g.u_cand);
    detail::fill_from(ck, prefix + ".b_update", g.b_update);
    detail::fill_from(ck, prefix + ".b_reset", g.b_reset);
    detail::fill_from(ck, prefix + ".b_cand", g.b_cand);
    detail::fill_from(ck, prefix + ".empty_name", g.empty_name);
  };
  load_enc("entity_encoder", out.entity);
  load_enc("relation_encoder", out.relation);
  for (size_t i = 0; i < ck.words.size(); ++i)
    out.word_ids.emplace(ck.words[i], static_cast<int>(i));
  return out;
}

// NoEncoder fine-tuning: every embedding-table row is generated by encoding
// the item name with the pre-trained GRU. Unknown words are omitted; items
// whose names contain no known word get a seeded random row. The GRU itself
// is then discarded.
template <class T>
void init_finetune_noencoder(const CheckpointData& ck, KbcModel<T>& target,
                             const TripleStore& target_store, const TransferOptions& opt = {}) {
  if (target.encoder_kind != EncoderKind::noencoder)
    throw std::runtime_error("init_finetune_noencoder: target model must use NoEncoder");
  PretrainedGru<T> gru = load_pretrained_gru<T>(ck);
  if (gru.entity.dim() != target.dim)
    throw std::runtime_error("transfer: checkpoint dimension " +
                             std::to_string(gru.entity.dim()) + " does not match target " +
                             std::to_string(target.dim));
  NoGrad ng;
  auto fill_table = [&](const GruEncoderT<T>& enc, const std::vector<std::string>& names,
                        TensorT<T>& table, const std::string& purpose) {
    int d = table.dim(1);
    std::vector<std::vector<int>> lists;
    std::vector<int> encoded_rows;  // table row of each list
    double range = std::sqrt(6.0 / (table.dim(0) + d));
    for (size_t i = 0; i < names.size(); ++i) {
      std::vector<int> toks = gru.known_tokens(names[i]);
      if (toks.empty()) {
        Rng r = detail::item_rng(target.seed, purpose, names[i]);
        T* row = table.ptr() + i * static_cast<size_t>(d);
        for (int j = 0; j < d; ++j) row[j] = static_cast<T>(r.uniform(-range, range));
      } else {
        lists.push_back(std::move(toks));
        encoded_rows.push_back(static_cast<int>(i));
      }
    }
    if (lists.empty()) return;
    TensorT<T> enc_out = encode_token_lists(enc, lists);
    for (size_t k = 0; k < encoded_rows.size(); ++k) {
      const T* src = enc_out.ptr() + k * static_cast<size_t>(d);
      T* dst = table.ptr() + static_cast<size_t>(encoded_rows[k]) * d;
      std::copy(src, src + d, dst);
    }
  };
  fill_table(gru.entity, target_store.entity_names,
             std::get<EmbeddingTable<T>>(target.entity_encoder).table, "entity_row");
  fill_table(gru.relation, target_store.relation_names,
             std::get<EmbeddingTable<T>>(target.relation_encoder).table, "relation_row");
  transfer_shared_params(ck, target, target_store, opt);
}

// Zero-shot evaluation: NoEncoder initialization from the pre-trained
// encoders, no training, ranked evaluation on the requested split.
template <class T>
RankReport zero_shot(const CheckpointData& ck, const TripleStore& store,
                     const ClusterMap* clusters, Split split, uint64_t seed) {
  ModelSpec spec;
  spec.model = ck.model;
  spec.encoder = EncoderKind::noencoder;
  spec.dim = ck.dim;
  spec.seed = seed;
  KbcModel<T> model = build_model<T>(store, spec);
  init_finetune_noencoder(ck, model, store);
  FilterIndex fi = build_filter_index(store);
  EvalScorer<T> scorer(model);
  return evaluate_split(scorer, store, fi, clusters, split);
}

}  // namespace okbc

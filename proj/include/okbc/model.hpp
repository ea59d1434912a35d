#pragma once

// Assembles an encoder pair and a scoring model over a triple store, exposes
// the named parameter/state lists used by the optimizer and checkpoints, and
// provides batched 1-N scoring.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "okbc/adam.hpp"
#include "okbc/data.hpp"
#include "okbc/encoder.hpp"
#include "okbc/scoring.hpp"

namespace okbc {

enum class ModelKind { tucker, conve, fivestar };
enum class EncoderKind { noencoder, gru };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::tucker: return "tucker";
    case ModelKind::conve: return "conve";
    default: return "5star";
  }
}

inline std::string to_string(EncoderKind k) {
  return k == EncoderKind::gru ? "gru" : "noencoder";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "tucker") return ModelKind::tucker;
  if (s == "conve") return ModelKind::conve;
  if (s == "5star" || s == "fivestar") return ModelKind::fivestar;
  throw std::runtime_error("unknown model kind: " + s);
}

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "gru") return EncoderKind::gru;
  if (s == "noencoder") return EncoderKind::noencoder;
  throw std::runtime_error("unknown encoder kind: " + s);
}

struct ModelSpec {
  ModelKind model = ModelKind::tucker;
  EncoderKind encoder = EncoderKind::noencoder;
  int dim = 32;
  int word_dim = 0;  // 0: same as dim
  double dropout = 0.0;
  uint64_t seed = 0;
};

template <class T>
struct BatchScore {
  TensorT<T> logits;          // [batch, candidates]
  TensorT<T> vh, vr, vtails;  // embeddings entering the scorer
};

template <class T>
struct KbcModel {
  ModelKind model_kind = ModelKind::tucker;
  EncoderKind encoder_kind = EncoderKind::noencoder;
  int dim = 0;       // entity embedding width (4K for 5*E)
  int word_dim = 0;  // GRU input width
  uint64_t seed = 0;
  int n_entities = 0;
  int n_relations = 0;

  std::vector<std::string> words;  // GRU vocabulary, id order
  std::unordered_map<std::string, int> word_ids;
  std::vector<std::vector<int>> entity_tokens, relation_tokens;

  EncoderVariant<T> entity_encoder, relation_encoder;
  std::variant<TuckerT<T>, ConvET<T>, FiveStarT<T>> scorer;

  bool training_mode = false;
  Rng dropout_rng{0};

  int relation_dim() const { return model_kind == ModelKind::fivestar ? 2 * dim : dim; }
  int fivestar_coords() const { return dim / 4; }

  void set_training(bool on) { training_mode = on; }

  // --- named tensors -------------------------------------------------------

  NamedParams<T> parameters(bool include_word_embeddings = true) {
    NamedParams<T> out;
    auto add_encoder = [&](const std::string& prefix, EncoderVariant<T>& enc,
                           const std::string& table_name) {
      if (auto* tab = std::get_if<EmbeddingTable<T>>(&enc)) {
        out.emplace_back(table_name, tab->table);
        return;
      }
      auto& g = std::get<GruEncoderT<T>>(enc);
      if (include_word_embeddings) out.emplace_back(prefix + ".word_emb", g.word_emb);
      out.emplace_back(prefix + ".w_update", g.w_update);
      out.emplace_back(prefix + ".w_reset", g.w_reset);
      out.emplace_back(prefix + ".w_cand", g.w_cand);
      out.emplace_back(prefix + ".u_update", g.u_update);
      out.emplace_back(prefix + ".u_reset", g.u_reset);
      out.emplace_back(prefix + ".u_cand", g.u_cand);
      out.emplace_back(prefix + ".b_update", g.b_update);
      out.emplace_back(prefix + ".b_reset", g.b_reset);
      out.emplace_back(prefix + ".b_cand", g.b_cand);
      out.emplace_back(prefix + ".empty_name", g.empty_name);
    };
    add_encoder("entity_encoder", entity_encoder, "entity_table");
    add_encoder("relation_encoder", relation_encoder, "relation_table");
    if (auto* t = std::get_if<TuckerT<T>>(&scorer)) {
      out.emplace_back("tucker.core", t->core);
      out.emplace_back("tucker.bn0.gamma", t->bn0.gamma);
      out.emplace_back("tucker.bn0.beta", t->bn0.beta);
      out.emplace_back("tucker.bn1.gamma", t->bn1.gamma);
      out.emplace_back("tucker.bn1.beta", t->bn1.beta);
    } else if (auto* c = std::get_if<ConvET<T>>(&scorer)) {
      out.emplace_back("conve.kernel", c->kernel);
      out.emplace_back("conve.proj", c->proj);
      out.emplace_back("conve.bias", c->bias);
      out.emplace_back("conve.bn0.gamma", c->bn0.gamma);
      out.emplace_back("conve.bn0.beta", c->bn0.beta);
      out.emplace_back("conve.bn1.gamma", c->bn1.gamma);
      out.emplace_back("conve.bn1.beta", c->bn1.beta);
    }
    return out;
  }

  // Parameters plus non-trainable buffers, in checkpoint order.
  NamedParams<T> state_tensors() {
    NamedParams<T> out = parameters(true);
    if (auto* t = std::get_if<TuckerT<T>>(&scorer)) {
      out.emplace_back("tucker.bn0.running_mean", t->bn0.running_mean);
      out.emplace_back("tucker.bn0.running_var", t->bn0.running_var);
      out.emplace_back("tucker.bn1.running_mean", t->bn1.running_mean);
      out.emplace_back("tucker.bn1.running_var", t->bn1.running_var);
    } else if (auto* c = std::get_if<ConvET<T>>(&scorer)) {
      out.emplace_back("conve.bn0.running_mean", c->bn0.running_mean);
      out.emplace_back("conve.bn0.running_var", c->bn0.running_var);
      out.emplace_back("conve.bn1.running_mean", c->bn1.running_mean);
      out.emplace_back("conve.bn1.running_var", c->bn1.running_var);
    }
    return out;
  }

  void zero_grads() {
    for (auto& [name, p] : parameters(true)) p.zero_grad();
  }

  std::vector<std::vector<T>> snapshot_state() {
    std::vector<std::vector<T>> snap;
    for (auto& [name, t] : state_tensors()) snap.push_back(*t.data);
    return snap;
  }

  void restore_state(const std::vector<std::vector<T>>& snap) {
    auto tensors = state_tensors();
    if (snap.size() != tensors.size())
      throw std::runtime_error("restore_state: snapshot size mismatch");
    for (size_t i = 0; i < snap.size(); ++i) {
      if (snap[i].size() != tensors[i].second.numel())
        throw std::runtime_error("restore_state: tensor size drift at " + tensors[i].first);
      *tensors[i].second.data = snap[i];
    }
  }

  // --- scoring ---------------------------------------------------------------

  TensorT<T> encode_entities(const std::vector<int>& ids) {
    return encode_items(entity_encoder, ids, entity_tokens);
  }

  TensorT<T> encode_relations(const std::vector<int>& ids) {
    return encode_items(relation_encoder, ids, relation_tokens);
  }

  TensorT<T> all_entity_embeddings() {
    if (auto* tab = std::get_if<EmbeddingTable<T>>(&entity_encoder)) return tab->table;
    std::vector<int> ids(n_entities);
    std::iota(ids.begin(), ids.end(), 0);
    return encode_entities(ids);
  }

  // candidates empty: score against every entity, logit column j = entity j.
  BatchScore<T> score_batch(const std::vector<int>& head_ids, const std::vector<int>& rel_ids,
                            const std::vector<int>& candidates) {
    if (head_ids.size() != rel_ids.size())
      throw std::runtime_error("score_batch: head/relation count mismatch");
    BatchScore<T> out;
    out.vh = encode_entities(head_ids);
    out.vr = encode_relations(rel_ids);
    out.vtails = candidates.empty() ? all_entity_embeddings() : encode_entities(candidates);
    if (auto* t = std::get_if<TuckerT<T>>(&scorer)) {
      out.logits = t->score(out.vh, out.vr, out.vtails, training_mode, dropout_rng);
    } else if (auto* c = std::get_if<ConvET<T>>(&scorer)) {
      out.logits = c->score(out.vh, out.vr, out.vtails, candidates, training_mode, dropout_rng);
    } else {
      out.logits = std::get<FiveStarT<T>>(scorer).score(out.vh, out.vr, out.vtails);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------

template <class T>
void init_vocab(KbcModel<T>& model, const TripleStore& store) {
  model.n_entities = store.n_entities();
  model.n_relations = store.n_relations();
  if (model.encoder_kind != EncoderKind::gru) return;
  auto intern = [&](const std::string& name) {
    std::vector<int> ids;
    for (const std::string& w : tokenize(name)) {
      auto [it, inserted] = model.word_ids.emplace(w, static_cast<int>(model.words.size()));
      if (inserted) model.words.push_back(w);
      ids.push_back(it->second);
    }
    return ids;
  };
  model.entity_tokens.reserve(store.n_entities());
  for (const std::string& n : store.entity_names) model.entity_tokens.push_back(intern(n));
  model.relation_tokens.reserve(store.n_relations());
  for (const std::string& n : store.relation_names) model.relation_tokens.push_back(intern(n));
}

template <class T>
KbcModel<T> build_model(const TripleStore& store, const ModelSpec& spec,
                        const WordVectors* word_vectors = nullptr) {
  KbcModel<T> m;
  m.model_kind = spec.model;
  m.encoder_kind = spec.encoder;
  m.dim = spec.dim;
  m.seed = spec.seed;
  m.dropout_rng = Rng(mix_seed(spec.seed, hash_name("dropout")));
  if (spec.model == ModelKind::fivestar && spec.dim % 4 != 0)
    throw std::runtime_error("5star: dim must be a multiple of 4, got " +
                             std::to_string(spec.dim));
  init_vocab(m, store);

  auto tensor_rng = [&](const std::string& name) {
    return Rng(mix_seed(spec.seed, hash_name(name)));
  };

  int rel_dim = m.relation_dim();
  if (spec.encoder == EncoderKind::noencoder) {
    Rng re = tensor_rng("entity_table");
    Rng rr = tensor_rng("relation_table");
    m.entity_encoder = EmbeddingTable<T>{TensorT<T>::xavier({store.n_entities(), spec.dim}, re)};
    m.relation_encoder =
        EmbeddingTable<T>{TensorT<T>::xavier({store.n_relations(), rel_dim}, rr)};
  } else {
    m.word_dim = spec.word_dim > 0 ? spec.word_dim
                 : (word_vectors && word_vectors->dim > 0 ? word_vectors->dim : spec.dim);
    int vocab = std::max<int>(1, static_cast<int>(m.words.size()));
    Rng re = tensor_rng("entity_encoder");
    Rng rr = tensor_rng("relation_encoder");
    GruEncoderT<T> ee = make_gru_encoder<T>(vocab, m.word_dim, spec.dim, re);
    GruEncoderT<T> rr_enc = make_gru_encoder<T>(vocab, m.word_dim, rel_dim, rr);
    if (word_vectors) {
      if (word_vectors->dim != m.word_dim)
        throw std::runtime_error("word vectors are " + std::to_string(word_vectors->dim) +
                                 "-dimensional but encoder expects " +
                                 std::to_string(m.word_dim));
      for (size_t w = 0; w < m.words.size(); ++w) {
        auto it = word_vectors->table.find(m.words[w]);
        if (it == word_vectors->table.end()) continue;
        for (int j = 0; j < m.word_dim; ++j) {
          (*ee.word_emb.data)[w * m.word_dim + j] = static_cast<T>(it->second[j]);
          (*rr_enc.word_emb.data)[w * m.word_dim + j] = static_cast<T>(it->second[j]);
        }
      }
    }
    m.entity_encoder = std::move(ee);
    m.relation_encoder = std::move(rr_enc);
  }

  if (spec.model == ModelKind::tucker) {
    Rng r = tensor_rng("tucker.core");
    m.scorer = TuckerT<T>(spec.dim, spec.dropout, r);
  } else if (spec.model == ModelKind::conve) {
    Rng r = tensor_rng("conve");
    m.scorer =
        ConvET<T>(spec.dim, store.n_entities(), spec.dropout, r, conve_reshape_dims(spec.dim));
  } else {
    m.scorer = FiveStarT<T>(spec.dim / 4);
  }
  return m;
}

// Read-only scorer for ranking: caches the tail matrix once (parameters are
// frozen during evaluation) and scores one query against all entities.
template <class T>
class EvalScorer {
 public:
  explicit EvalScorer(KbcModel<T>& model) : model_(model) {
    NoGrad ng;
    model_.set_training(false);
    tails_ = model_.all_entity_embeddings();
  }

  std::vector<T> operator()(int head, int relation) {
    NoGrad ng;
    BatchScore<T> s;
    std::vector<int> hid{head}, rid{relation};
    TensorT<T> vh = model_.encode_entities(hid);
    TensorT<T> vr = model_.encode_relations(rid);
    TensorT<T> logits;
    if (auto* t = std::get_if<TuckerT<T>>(&model_.scorer)) {
      logits = t->score(vh, vr, tails_, false, model_.dropout_rng);
    } else if (auto* c = std::get_if<ConvET<T>>(&model_.scorer)) {
      logits = c->score(vh, vr, tails_, {}, false, model_.dropout_rng);
    } else {
      logits = std::get<FiveStarT<T>>(model_.scorer).score(vh, vr, tails_);
    }
    return *logits.data;
  }

 private:
  KbcModel<T>& model_;
  TensorT<T> tails_;
};

}  // namespace okbc

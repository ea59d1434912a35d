#pragma once

// 1-N training loop: cross-entropy over all entities or over in-batch
// candidates, Adam updates, periodic validation with best-snapshot selection,
// and exhaustive grid search.

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "okbc/adam.hpp"
#include "okbc/evaluate.hpp"
#include "okbc/model.hpp"

namespace okbc {

enum class NegativesMode { automatic, on, off };

inline std::string to_string(NegativesMode m) {
  switch (m) {
    case NegativesMode::automatic: return "auto";
    case NegativesMode::on: return "on";
    default: return "off";
  }
}

inline NegativesMode parse_negatives_mode(const std::string& s) {
  if (s == "auto") return NegativesMode::automatic;
  if (s == "on") return NegativesMode::on;
  if (s == "off") return NegativesMode::off;
  throw std::runtime_error("unknown in-batch-negatives mode: " + s);
}

struct TrainConfig {
  ModelKind model = ModelKind::tucker;
  EncoderKind encoder = EncoderKind::noencoder;
  int dim = 32;
  int word_dim = 0;
  double lr = 1e-4;
  int batch = 512;
  double dropout = 0.0;
  double n3_weight = 0.0;
  int epochs = 100;
  int valid_period = 20;
  NegativesMode negatives = NegativesMode::automatic;
  int in_batch_threshold = 100000;
  uint64_t seed = 0;
  bool freeze_word_vectors = false;

  std::string summary() const {
    std::ostringstream os;
    os << "model=" << to_string(model) << " encoder=" << to_string(encoder) << " dim=" << dim
       << " lr=" << lr << " batch=" << batch << " dropout=" << dropout << " n3=" << n3_weight
       << " epochs=" << epochs << " seed=" << seed;
    return os.str();
  }
};

struct ValidationPoint {
  int epoch;
  double train_loss, mr, mrr, h10;
};

struct TrainResult {
  std::vector<ValidationPoint> trace;
  int best_epoch = 0;
  double best_mrr = 0.0;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
};

inline ModelSpec model_spec_from(const TrainConfig& cfg) {
  ModelSpec spec;
  spec.model = cfg.model;
  spec.encoder = cfg.encoder;
  spec.dim = cfg.dim;
  spec.word_dim = cfg.word_dim;
  spec.dropout = cfg.dropout;
  spec.seed = cfg.seed;
  return spec;
}

namespace detail {

template <class T>
TensorT<T> batch_loss(KbcModel<T>& model, const std::vector<OneToNGroup>& groups,
                      const std::vector<int>& order, size_t begin, size_t end, bool in_batch,
                      double n3_weight) {
  std::vector<int> heads, rels;
  heads.reserve(end - begin);
  rels.reserve(end - begin);
  std::vector<const OneToNGroup*> batch;
  for (size_t i = begin; i < end; ++i) {
    const OneToNGroup& g = groups[order[i]];
    heads.push_back(g.head);
    rels.push_back(g.relation);
    batch.push_back(&g);
  }
  std::vector<int> candidates;
  std::unordered_map<int, int> cand_pos;
  if (in_batch) {
    std::unordered_set<int> seen;
    for (const OneToNGroup* g : batch)
      for (int t : g->tails)
        if (seen.insert(t).second) {
          cand_pos.emplace(t, static_cast<int>(candidates.size()));
          candidates.push_back(t);
        }
  }
  int n_cols = in_batch ? static_cast<int>(candidates.size()) : model.n_entities;
  TensorT<T> targets = TensorT<T>::zeros({static_cast<int>(batch.size()), n_cols});
  for (size_t i = 0; i < batch.size(); ++i)
    for (int t : batch[i]->tails) {
      int col = in_batch ? cand_pos.at(t) : t;
      (*targets.data)[i * static_cast<size_t>(n_cols) + col] = T(1);
    }
  BatchScore<T> bs = model.score_batch(heads, rels, candidates);
  TensorT<T> loss = softmax_cross_entropy(bs.logits, targets);
  if (model.model_kind == ModelKind::fivestar && n3_weight > 0.0) {
    int k = model.fivestar_coords();
    loss = add(loss, n3_penalty<T>({bs.vh, bs.vr, bs.vtails}, k, n3_weight));
  }
  return loss;
}

}  // namespace detail

// Trains in place. One epoch is a pass over the shuffled 1-N groups; the
// validation split is scored every cfg.valid_period epochs (and at the final
// epoch) and the parameters of the best validation MRR are restored at the
// end. Log lines: epoch TAB loss TAB MR TAB MRR TAB H@10.
template <class T>
TrainResult train(KbcModel<T>& model, const TripleStore& store, const ClusterMap* clusters,
                  const TrainConfig& cfg, std::ostream* log = nullptr) {
  auto t_start = std::chrono::steady_clock::now();
  if (!store.has_reciprocals()) throw std::runtime_error("train: reciprocals must be added");
  if (cfg.valid_period <= 0) throw std::runtime_error("train: valid_period must be positive");
  std::vector<OneToNGroup> groups = group_one_to_n(store);
  bool in_batch = cfg.negatives == NegativesMode::on ||
                  (cfg.negatives == NegativesMode::automatic &&
                   store.n_entities() > cfg.in_batch_threshold);
  FilterIndex filter;
  bool has_valid = !store.valid.empty();
  if (has_valid) filter = build_filter_index(store);

  NamedParams<T> params = model.parameters(!cfg.freeze_word_vectors);
  AdamState<T> adam(params, cfg.lr);

  TrainResult result;
  std::vector<std::vector<T>> best_state = model.snapshot_state();
  bool have_best = cfg.epochs == 0;
  double best_mrr = -1.0;

  std::vector<int> order(groups.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    model.set_training(true);
    double epoch_loss = 0.0;
    size_t n_batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch)) {
      size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch));
      TensorT<T> loss =
          detail::batch_loss(model, groups, order, begin, end, in_batch, cfg.n3_weight);
      double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw std::runtime_error("train: NaN loss at epoch " + std::to_string(epoch) +
                                 "; config: " + cfg.summary());
      epoch_loss += lv;
      ++n_batches;
      backward(loss);
      adam.step(params);
      model.zero_grads();
    }
    epoch_loss /= std::max<size_t>(1, n_batches);
    result.final_loss = epoch_loss;

    if (has_valid && (epoch % cfg.valid_period == 0 || epoch == cfg.epochs)) {
      model.set_training(false);
      EvalScorer<T> scorer(model);
      RankReport report = evaluate_split(scorer, store, filter, clusters, Split::valid);
      Aggregates agg = report.aggregate(2);
      double h10 = 0.0;
      for (size_t i = 0; i < kHitsLevels.size(); ++i)
        if (kHitsLevels[i] == 10) h10 = agg.hits[i];
      result.trace.push_back({epoch, epoch_loss, agg.mr, agg.mrr, h10});
      if (log)
        (*log) << epoch << '\t' << epoch_loss << '\t' << agg.mr << '\t' << agg.mrr << '\t' << h10
               << std::endl;
      if (agg.mrr > best_mrr) {
        best_mrr = agg.mrr;
        result.best_epoch = epoch;
        result.best_mrr = agg.mrr;
        best_state = model.snapshot_state();
        have_best = true;
      }
    }
  }
  if (have_best) model.restore_state(best_state);
  model.set_training(false);
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

// ---------------------------------------------------------------------------

struct GridSpec {
  std::vector<int> dims;
  std::vector<double> lrs;
  std::vector<int> batches;
  std::vector<double> dropouts;
  std::vector<double> n3_weights;

  size_t size() const {
    return dims.size() * lrs.size() * batches.size() * dropouts.size() * n3_weights.size();
  }
};

// Hyperparameter grids: pre-training uses batch 4096 with lr {1e-4, 3e-4};
// fine-tuning uses lr {3e-5, 1e-4, 3e-4} and batch {512,...,4096}. Dropout is
// {0.2,0.3} for ConvE and {0.3,0.4} for TuckER; 5*E uses N3 instead
// ({0.1,0.03} pre-train, {0.3,0.1,0.03} fine-tune). Dimensions per model:
// TuckER {100,200,300}, ConvE {300,500}, 5*E {200,500}.
inline GridSpec appendix_grid(ModelKind model, bool pretrain) {
  GridSpec g;
  if (model == ModelKind::tucker) g.dims = {100, 200, 300};
  else if (model == ModelKind::conve) g.dims = {300, 500};
  else g.dims = {200, 500};
  g.lrs = pretrain ? std::vector<double>{1e-4, 3e-4} : std::vector<double>{3e-5, 1e-4, 3e-4};
  g.batches = pretrain ? std::vector<int>{4096} : std::vector<int>{512, 1024, 2048, 4096};
  if (model == ModelKind::tucker) g.dropouts = {0.3, 0.4};
  else if (model == ModelKind::conve) g.dropouts = {0.2, 0.3};
  else g.dropouts = {0.0};
  if (model == ModelKind::fivestar)
    g.n3_weights = pretrain ? std::vector<double>{0.03, 0.1} : std::vector<double>{0.03, 0.1, 0.3};
  else
    g.n3_weights = {0.0};
  return g;
}

struct GridRun {
  TrainConfig config;
  TrainResult result;
};

template <class T>
struct GridResult {
  TrainConfig best_config;
  TrainResult best_result;
  std::vector<std::vector<T>> best_state;  // trained parameters of the winner
  std::vector<GridRun> runs;
};

// Exhaustive cartesian sweep in lexicographic order over
// (dim, lr, batch, dropout, n3); the winner is the strictly best validation
// MRR, so ties resolve to the lexicographically first configuration.
// model_factory builds (and possibly transfer-initializes) a model per config.
template <class T>
GridResult<T> grid_search(const TripleStore& store, const ClusterMap* clusters,
                          const TrainConfig& base, const GridSpec& grid,
                          const std::function<KbcModel<T>(const TrainConfig&)>& model_factory,
                          const std::function<std::ostream*(size_t, const TrainConfig&)>&
                              log_for = nullptr) {
  if (grid.size() == 0) throw std::runtime_error("grid_search: empty grid");
  GridSpec g = grid;
  std::sort(g.dims.begin(), g.dims.end());
  std::sort(g.lrs.begin(), g.lrs.end());
  std::sort(g.batches.begin(), g.batches.end());
  std::sort(g.dropouts.begin(), g.dropouts.end());
  std::sort(g.n3_weights.begin(), g.n3_weights.end());
  GridResult<T> out;
  double best = -1.0;
  size_t run_idx = 0;
  for (int dim : g.dims)
    for (double lr : g.lrs)
      for (int batch : g.batches)
        for (double dropout : g.dropouts)
          for (double n3 : g.n3_weights) {
            TrainConfig cfg = base;
            cfg.dim = dim;
            cfg.lr = lr;
            cfg.batch = batch;
            cfg.dropout = dropout;
            cfg.n3_weight = n3;
            KbcModel<T> model = model_factory(cfg);
            std::ostream* log = log_for ? log_for(run_idx, cfg) : nullptr;
            TrainResult r = train(model, store, clusters, cfg, log);
            if (r.best_mrr > best) {
              best = r.best_mrr;
              out.best_config = cfg;
              out.best_result = r;
              out.best_state = model.snapshot_state();
            }
            out.runs.push_back({cfg, std::move(r)});
            ++run_idx;
          }
  return out;
}

}  // namespace okbc

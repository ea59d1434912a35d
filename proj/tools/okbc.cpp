// okbc command line: pretrain / finetune / evaluate / zeroshot / gridsearch
// over tab-separated triple files.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>

#include "okbc/config.hpp"
#include "okbc/transfer.hpp"

namespace fs = std::filesystem;
using namespace okbc;

using Model = KbcModel<float>;

namespace {

// Flag values land here; resolve() layers them over the config file.
struct Flags {
  std::string config_path;
  ExperimentConfig v;
  std::string encoder_s, model_s, negatives_s;
};

void add_common_flags(CLI::App* cmd, Flags& fl) {
  cmd->add_option("--config", fl.config_path, "key = value config file");
  cmd->add_option("--train", fl.v.train_path, "training triples (head TAB rel TAB tail)");
  cmd->add_option("--valid", fl.v.valid_path, "validation triples");
  cmd->add_option("--test", fl.v.test_path, "test triples");
  cmd->add_option("--clusters", fl.v.clusters_path, "gold entity clusters");
  cmd->add_option("--word-vectors", fl.v.word_vectors_path, "GloVe-layout word vectors");
  cmd->add_option("--checkpoint", fl.v.checkpoint_in, "source checkpoint directory");
  cmd->add_option("--out", fl.v.out_dir, "output directory");
  cmd->add_option("--seed", fl.v.train.seed, "random seed");
  cmd->add_option("--encoder", fl.encoder_s, "gru | noencoder");
  cmd->add_option("--model", fl.model_s, "tucker | conve | 5star");
  cmd->add_option("--dim", fl.v.train.dim, "embedding dimension");
  cmd->add_option("--word-dim", fl.v.train.word_dim, "word embedding dimension (GRU)");
  cmd->add_option("--lr", fl.v.train.lr, "learning rate");
  cmd->add_option("--batch", fl.v.train.batch, "batch size (1-N groups)");
  cmd->add_option("--dropout", fl.v.train.dropout, "dropout rate");
  cmd->add_option("--n3", fl.v.train.n3_weight, "N3 regularization weight (5*E)");
  cmd->add_option("--epochs", fl.v.train.epochs, "training epochs");
  cmd->add_option("--valid-period", fl.v.train.valid_period, "epochs between validations");
  cmd->add_option("--in-batch-negatives", fl.negatives_s, "auto | on | off");
  cmd->add_option("--split", fl.v.split, "splits to evaluate (comma separated)");
  cmd->add_flag("--per-query", fl.v.per_query, "also dump per-query ranks");
}

struct Resolved {
  ExperimentConfig cfg;
  bool epochs_set = false;
};

Resolved resolve(CLI::App* cmd, const Flags& fl) {
  Resolved r;
  if (!fl.config_path.empty()) {
    load_config_file(r.cfg, fl.config_path);
    for (const auto& [k, v] : parse_kv_file(fl.config_path))
      if (k == "epochs") r.epochs_set = true;
  }
  auto on = [&](const char* flag) { return cmd->count(flag) > 0; };
  if (on("--train")) r.cfg.train_path = fl.v.train_path;
  if (on("--valid")) r.cfg.valid_path = fl.v.valid_path;
  if (on("--test")) r.cfg.test_path = fl.v.test_path;
  if (on("--clusters")) r.cfg.clusters_path = fl.v.clusters_path;
  if (on("--word-vectors")) r.cfg.word_vectors_path = fl.v.word_vectors_path;
  if (on("--checkpoint")) r.cfg.checkpoint_in = fl.v.checkpoint_in;
  if (on("--out")) r.cfg.out_dir = fl.v.out_dir;
  if (on("--seed")) r.cfg.train.seed = fl.v.train.seed;
  if (on("--encoder")) r.cfg.train.encoder = parse_encoder_kind(fl.encoder_s);
  if (on("--model")) r.cfg.train.model = parse_model_kind(fl.model_s);
  if (on("--dim")) r.cfg.train.dim = fl.v.train.dim;
  if (on("--word-dim")) r.cfg.train.word_dim = fl.v.train.word_dim;
  if (on("--lr")) r.cfg.train.lr = fl.v.train.lr;
  if (on("--batch")) r.cfg.train.batch = fl.v.train.batch;
  if (on("--dropout")) r.cfg.train.dropout = fl.v.train.dropout;
  if (on("--n3")) r.cfg.train.n3_weight = fl.v.train.n3_weight;
  if (on("--epochs")) {
    r.cfg.train.epochs = fl.v.train.epochs;
    r.epochs_set = true;
  }
  if (on("--valid-period")) r.cfg.train.valid_period = fl.v.train.valid_period;
  if (on("--in-batch-negatives")) r.cfg.train.negatives = parse_negatives_mode(fl.negatives_s);
  if (on("--split")) r.cfg.split = fl.v.split;
  if (on("--per-query")) r.cfg.per_query = fl.v.per_query;
  return r;
}

TripleStore load_store_from(const ExperimentConfig& cfg, bool need_test) {
  if (cfg.train_path.empty()) throw std::runtime_error("no training triples given (--train)");
  if (need_test && cfg.test_path.empty())
    throw std::runtime_error("no test triples given (--test)");
  TripleStore store = load_store(cfg.train_path, cfg.valid_path, cfg.test_path);
  add_reciprocals(store);
  return store;
}

std::optional<ClusterMap> load_clusters_from(const ExperimentConfig& cfg,
                                             const TripleStore& store) {
  if (cfg.clusters_path.empty()) return std::nullopt;
  return load_clusters(cfg.clusters_path, store);
}

std::optional<WordVectors> load_word_vectors_from(const ExperimentConfig& cfg) {
  if (cfg.word_vectors_path.empty()) return std::nullopt;
  return load_word_vectors(cfg.word_vectors_path);
}

void write_echo(const ExperimentConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.out_dir);
  std::ofstream out(cfg.out_dir + "/config_echo.txt");
  out << config_echo(cfg, command);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

void write_reports(const ExperimentConfig& cfg, const std::function<RankReport(Split)>& run) {
  fs::create_directories(cfg.out_dir);
  std::ofstream report(cfg.out_dir + "/report.tsv");
  write_report_header(report);
  std::unique_ptr<std::ofstream> per_query;
  for (const std::string& name : split_csv(cfg.split)) {
    Split split;
    if (name == "valid") split = Split::valid;
    else if (name == "test") split = Split::test;
    else if (name == "train") split = Split::train;
    else throw std::runtime_error("unknown split: " + name);
    RankReport r = run(split);
    write_report_lines(report, name, r);
    if (cfg.per_query) {
      if (!per_query)
        per_query = std::make_unique<std::ofstream>(cfg.out_dir + "/ranks.tsv");
      write_per_query(*per_query, name, r);
    }
  }
  std::cout << "report written to " << cfg.out_dir << "/report.tsv\n";
}

int cmd_pretrain(Resolved& r) {
  ExperimentConfig& cfg = r.cfg;
  if (cfg.train.encoder != EncoderKind::gru)
    throw std::runtime_error("pre-training requires GRU encoders");
  if (!r.epochs_set) cfg.train.epochs = 100;
  TripleStore store = load_store_from(cfg, false);
  auto clusters = load_clusters_from(cfg, store);
  auto wv = load_word_vectors_from(cfg);
  write_echo(cfg, "pretrain");
  Model model = build_model<float>(store, model_spec_from(cfg.train), wv ? &*wv : nullptr);
  std::ofstream log(cfg.out_dir + "/train.log");
  TrainResult res = train(model, store, clusters ? &*clusters : nullptr, cfg.train, &log);
  save_checkpoint(model, cfg.out_dir + "/checkpoint");
  std::cout << "best epoch " << res.best_epoch << " valid MRR " << res.best_mrr
            << "; checkpoint written to " << cfg.out_dir << "/checkpoint\n";
  return 0;
}

Model build_finetune_model(const ExperimentConfig& cfg, const TripleStore& store,
                           const WordVectors* wv) {
  Model model = build_model<float>(store, model_spec_from(cfg.train), wv);
  if (cfg.checkpoint_in.empty()) return model;  // randomly initialized baseline
  CheckpointData ck = load_checkpoint(cfg.checkpoint_in);
  if (ck.model != cfg.train.model)
    throw std::runtime_error("checkpoint holds a " + to_string(ck.model) +
                             " model but the run asks for " + to_string(cfg.train.model));
  if (cfg.train.encoder == EncoderKind::gru)
    init_finetune_gru(ck, model, store);
  else
    init_finetune_noencoder(ck, model, store);
  return model;
}

int cmd_finetune(Resolved& r) {
  ExperimentConfig& cfg = r.cfg;
  if (!r.epochs_set) cfg.train.epochs = 500;
  TripleStore store = load_store_from(cfg, false);
  auto clusters = load_clusters_from(cfg, store);
  auto wv = load_word_vectors_from(cfg);
  write_echo(cfg, "finetune");
  Model model = build_finetune_model(cfg, store, wv ? &*wv : nullptr);
  std::ofstream log(cfg.out_dir + "/train.log");
  TrainResult res = train(model, store, clusters ? &*clusters : nullptr, cfg.train, &log);
  save_checkpoint(model, cfg.out_dir + "/checkpoint");
  std::cout << "best epoch " << res.best_epoch << " valid MRR " << res.best_mrr
            << "; checkpoint written to " << cfg.out_dir << "/checkpoint\n";
  return 0;
}

int cmd_evaluate(Resolved& r) {
  ExperimentConfig& cfg = r.cfg;
  if (cfg.checkpoint_in.empty()) throw std::runtime_error("evaluate needs --checkpoint");
  TripleStore store = load_store_from(cfg, false);
  auto clusters = load_clusters_from(cfg, store);
  write_echo(cfg, "evaluate");
  CheckpointData ck = load_checkpoint(cfg.checkpoint_in);
  Model model = model_from_checkpoint<float>(ck, store);
  FilterIndex filter = build_filter_index(store);
  EvalScorer<float> scorer(model);
  write_reports(cfg, [&](Split split) {
    return evaluate_split(scorer, store, filter, clusters ? &*clusters : nullptr, split);
  });
  return 0;
}

int cmd_zeroshot(Resolved& r) {
  ExperimentConfig& cfg = r.cfg;
  if (cfg.checkpoint_in.empty()) throw std::runtime_error("zeroshot needs --checkpoint");
  TripleStore store = load_store_from(cfg, true);
  auto clusters = load_clusters_from(cfg, store);
  write_echo(cfg, "zeroshot");
  CheckpointData ck = load_checkpoint(cfg.checkpoint_in);
  write_reports(cfg, [&](Split split) {
    return zero_shot<float>(ck, store, clusters ? &*clusters : nullptr, split, cfg.train.seed);
  });
  return 0;
}

int cmd_gridsearch(Resolved& r, const std::string& grid_path, bool pretrain_phase) {
  ExperimentConfig& cfg = r.cfg;
  if (!r.epochs_set) cfg.train.epochs = pretrain_phase ? 100 : 500;
  if (pretrain_phase && cfg.train.encoder != EncoderKind::gru)
    throw std::runtime_error("pre-training requires GRU encoders");
  TripleStore store = load_store_from(cfg, false);
  if (store.valid.empty())
    throw std::runtime_error("grid search needs a validation split (--valid)");
  auto clusters = load_clusters_from(cfg, store);
  auto wv = load_word_vectors_from(cfg);
  write_echo(cfg, "gridsearch");
  GridSpec grid = grid_path.empty() ? appendix_grid(cfg.train.model, pretrain_phase)
                                    : parse_grid_file(grid_path);
  std::vector<std::unique_ptr<std::ofstream>> logs;
  auto factory = [&](const TrainConfig& tc) {
    ExperimentConfig run_cfg = cfg;
    run_cfg.train = tc;
    return build_finetune_model(run_cfg, store, wv ? &*wv : nullptr);
  };
  auto log_for = [&](size_t idx, const TrainConfig&) -> std::ostream* {
    char name[32];
    std::snprintf(name, sizeof(name), "grid_%03zu.log", idx);
    logs.push_back(std::make_unique<std::ofstream>(cfg.out_dir + "/" + name));
    return logs.back().get();
  };
  GridResult<float> result = grid_search<float>(store, clusters ? &*clusters : nullptr,
                                                cfg.train, grid, factory, log_for);
  {
    std::ofstream runs(cfg.out_dir + "/runs.tsv");
    runs << "run\tdim\tlr\tbatch\tdropout\tn3\tbest_epoch\tbest_mrr\n";
    for (size_t i = 0; i < result.runs.size(); ++i) {
      const auto& run = result.runs[i];
      runs << i << '\t' << run.config.dim << '\t' << run.config.lr << '\t' << run.config.batch
           << '\t' << run.config.dropout << '\t' << run.config.n3_weight << '\t'
           << run.result.best_epoch << '\t' << run.result.best_mrr << "\n";
    }
  }
  {
    ExperimentConfig winner = cfg;
    winner.train = result.best_config;
    std::ofstream out(cfg.out_dir + "/winner.txt");
    out << config_echo(winner, "gridsearch-winner");
    out << "# best_epoch = " << result.best_result.best_epoch << "\n";
    out << "# best_valid_mrr = " << result.best_result.best_mrr << "\n";
  }
  Model winner_model = factory(result.best_config);
  winner_model.restore_state(result.best_state);
  save_checkpoint(winner_model, cfg.out_dir + "/checkpoint");
  std::cout << "winner: " << result.best_config.summary() << " valid MRR "
            << result.best_result.best_mrr << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"open knowledge base completion: training, transfer and evaluation"};
  app.require_subcommand(1);

  Flags fl;
  std::string grid_path;
  bool pretrain_phase = false;

  CLI::App* pre = app.add_subcommand("pretrain", "train a GRU-encoder model from scratch");
  add_common_flags(pre, fl);
  CLI::App* fin = app.add_subcommand("finetune", "train, optionally from a source checkpoint");
  add_common_flags(fin, fl);
  CLI::App* eva = app.add_subcommand("evaluate", "ranked evaluation of a checkpoint");
  add_common_flags(eva, fl);
  CLI::App* zer = app.add_subcommand("zeroshot", "evaluate a pre-trained checkpoint untrained");
  add_common_flags(zer, fl);
  CLI::App* gri = app.add_subcommand("gridsearch", "exhaustive hyperparameter sweep");
  add_common_flags(gri, fl);
  gri->add_option("--grid", grid_path, "grid file (defaults to the built-in grids)");
  gri->add_flag("--pretrain-phase", pretrain_phase, "use pre-training grids and defaults");

  try {
    app.parse(argc, argv);
    CLI::App* active = app.get_subcommands().front();
    Resolved r = resolve(active, fl);
    if (active == pre) return cmd_pretrain(r);
    if (active == fin) return cmd_finetune(r);
    if (active == eva) return cmd_evaluate(r);
    if (active == zer) return cmd_zeroshot(r);
    return cmd_gridsearch(r, grid_path, pretrain_phase);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

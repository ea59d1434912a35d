#pragma once

// Flat key-value experiment configs. Files hold one `key = value` per line
// with '#' comments; command-line flags override file values. Every command
// writes the resolved config next to its outputs so runs can be reproduced
// from the echo alone.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "okbc/train.hpp"

namespace okbc {

struct ExperimentConfig {
  std::string train_path, valid_path, test_path;
  std::string clusters_path, word_vectors_path;
  std::string checkpoint_in;
  std::string out_dir = "out";
  std::string split = "test";  // evaluate: comma-separated split list
  bool per_query = false;
  TrainConfig train;
};

inline std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string trimmed = normalize_name(line);  // trims and collapses spaces
    if (trimmed.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      size_t b = s.find_first_not_of(" \t");
      size_t e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
    kv.emplace_back(key, value);
  }
  return kv;
}

inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                               const std::string& value) {
  auto to_int = [&](const std::string& v) { return std::stoi(v); };
  auto to_double = [&](const std::string& v) { return std::stod(v); };
  if (key == "train") cfg.train_path = value;
  else if (key == "valid") cfg.valid_path = value;
  else if (key == "test") cfg.test_path = value;
  else if (key == "clusters") cfg.clusters_path = value;
  else if (key == "word_vectors") cfg.word_vectors_path = value;
  else if (key == "checkpoint") cfg.checkpoint_in = value;
  else if (key == "out") cfg.out_dir = value;
  else if (key == "split") cfg.split = value;
  else if (key == "per_query") cfg.per_query = value == "true" || value == "1";
  else if (key == "model") cfg.train.model = parse_model_kind(value);
  else if (key == "encoder") cfg.train.encoder = parse_encoder_kind(value);
  else if (key == "dim") cfg.train.dim = to_int(value);
  else if (key == "word_dim") cfg.train.word_dim = to_int(value);
  else if (key == "lr") cfg.train.lr = to_double(value);
  else if (key == "batch") cfg.train.batch = to_int(value);
  else if (key == "dropout") cfg.train.dropout = to_double(value);
  else if (key == "n3") cfg.train.n3_weight = to_double(value);
  else if (key == "epochs") cfg.train.epochs = to_int(value);
  else if (key == "valid_period") cfg.train.valid_period = to_int(value);
  else if (key == "seed") cfg.train.seed = std::stoull(value);
  else if (key == "in_batch_negatives") cfg.train.negatives = parse_negatives_mode(value);
  else if (key == "in_batch_threshold") cfg.train.in_batch_threshold = to_int(value);
  else if (key == "freeze_word_vectors")
    cfg.train.freeze_word_vectors = value == "true" || value == "1";
  else
    throw std::runtime_error("unknown config key: " + key);
}

inline void load_config_file(ExperimentConfig& cfg, const std::string& path) {
  for (const auto& [k, v] : parse_kv_file(path)) apply_config_entry(cfg, k, v);
}

inline std::string config_echo(const ExperimentConfig& cfg, const std::string& command) {
  std::ostringstream os;
  os << "# okbc " << command << " configuration echo\n";
  os << "train = " << cfg.train_path << "\n";
  os << "valid = " << cfg.valid_path << "\n";
  os << "test = " << cfg.test_path << "\n";
  os << "clusters = " << cfg.clusters_path << "\n";
  os << "word_vectors = " << cfg.word_vectors_path << "\n";
  os << "checkpoint = " << cfg.checkpoint_in << "\n";
  os << "out = " << cfg.out_dir << "\n";
  os << "split = " << cfg.split << "\n";
  os << "per_query = " << (cfg.per_query ? "true" : "false") << "\n";
  os << "model = " << to_string(cfg.train.model) << "\n";
  os << "encoder = " << to_string(cfg.train.encoder) << "\n";
  os << "dim = " << cfg.train.dim << "\n";
  os << "word_dim = " << cfg.train.word_dim << "\n";
  os << "lr = " << cfg.train.lr << "\n";
  os << "batch = " << cfg.train.batch << "\n";
  os << "dropout = " << cfg.train.dropout << "\n";
  os << "n3 = " << cfg.train.n3_weight << "\n";
  os << "epochs = " << cfg.train.epochs << "\n";
  os << "valid_period = " << cfg.train.valid_period << "\n";
  os << "seed = " << cfg.train.seed << "\n";
  os << "in_batch_negatives = " << to_string(cfg.train.negatives) << "\n";
  os << "in_batch_threshold = " << cfg.train.in_batch_threshold << "\n";
  os << "freeze_word_vectors = " << (cfg.train.freeze_word_vectors ? "true" : "false") << "\n";
  return os.str();
}

// Grid files reuse the config keys; dim/lr/batch/dropout/n3 take
// comma-separated lists.
inline GridSpec parse_grid_file(const std::string& path) {
  GridSpec grid;
  auto split_list = [](const std::string& v) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : v) {
      if (c == ',') {
        if (!cur.empty()) parts.push_back(cur);
        cur.clear();
      } else if (c != ' ' && c != '\t') {
        cur.push_back(c);
      }
    }
    if (!cur.empty()) parts.push_back(cur);
    return parts;
  };
  for (const auto& [k, v] : parse_kv_file(path)) {
    if (k == "dim")
      for (const auto& p : split_list(v)) grid.dims.push_back(std::stoi(p));
    else if (k == "lr")
      for (const auto& p : split_list(v)) grid.lrs.push_back(std::stod(p));
    else if (k == "batch")
      for (const auto& p : split_list(v)) grid.batches.push_back(std::stoi(p));
    else if (k == "dropout")
      for (const auto& p : split_list(v)) grid.dropouts.push_back(std::stod(p));
    else if (k == "n3")
      for (const auto& p : split_list(v)) grid.n3_weights.push_back(std::stod(p));
    else
      throw std::runtime_error("unknown grid key: " + k);
  }
  if (grid.dims.empty() || grid.lrs.empty() || grid.batches.empty() || grid.dropouts.empty() ||
      grid.n3_weights.empty())
    throw std::runtime_error("grid file must list dim, lr, batch, dropout and n3 values");
  return grid;
}

}  // namespace okbc

#pragma once

// Triple ingestion, name preprocessing, gold clusters, word vectors,
// reciprocal-relation augmentation and 1-N batch grouping.

#include <array>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace okbc {

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    default: return "test";
  }
}

// Lowercase, trim, collapse internal whitespace runs to single spaces.
// Idempotent; entity/relation identity is the normalized surface form.
inline std::string normalize_name(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char c : raw) {
    unsigned char u = static_cast<unsigned char>(c);
    if (u == ' ' || u == '\t' || u == '\n' || u == '\r' || u == '\f' || u == '\v') {
      if (!out.empty()) pending_space = true;
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    if (u < 128 && u >= 'A' && u <= 'Z')
      out.push_back(static_cast<char>(u - 'A' + 'a'));
    else
      out.push_back(c);
  }
  return out;
}

inline std::vector<std::string> tokenize(const std::string& normalized) {
  std::vector<std::string> words;
  size_t start = 0;
  while (start < normalized.size()) {
    size_t sp = normalized.find(' ', start);
    if (sp == std::string::npos) sp = normalized.size();
    if (sp > start) words.push_back(normalized.substr(start, sp - start));
    start = sp + 1;
  }
  return words;
}

struct Triple {
  int head, relation, tail;
  bool operator==(const Triple& o) const {
    return head == o.head && relation == o.relation && tail == o.tail;
  }
};

struct TripleStore {
  std::vector<std::string> entity_names, relation_names;  // id -> normalized name
  std::unordered_map<std::string, int> entity_ids, relation_ids;
  std::vector<Triple> train, valid, test;
  // Number of relations before reciprocal augmentation; -1 when none added.
  int base_relation_count = -1;

  int n_entities() const { return static_cast<int>(entity_names.size()); }
  int n_relations() const { return static_cast<int>(relation_names.size()); }
  bool has_reciprocals() const { return base_relation_count >= 0; }

  int entity_id(const std::string& normalized) {
    auto it = entity_ids.find(normalized);
    if (it != entity_ids.end()) return it->second;
    int id = n_entities();
    entity_ids.emplace(normalized, id);
    entity_names.push_back(normalized);
    return id;
  }

  int relation_id(const std::string& normalized) {
    auto it = relation_ids.find(normalized);
    if (it != relation_ids.end()) return it->second;
    int id = n_relations();
    relation_ids.emplace(normalized, id);
    relation_names.push_back(normalized);
    return id;
  }

  std::vector<Triple>& split(Split s) {
    switch (s) {
      case Split::train: return train;
      case Split::valid: return valid;
      default: return test;
    }
  }
  const std::vector<Triple>& split(Split s) const {
    return const_cast<TripleStore*>(this)->split(s);
  }

  int inverse_relation(int r) const {
    if (!has_reciprocals()) throw std::runtime_error("store: reciprocals not added");
    return r < base_relation_count ? r + base_relation_count : r - base_relation_count;
  }
};

// One triple per line: head TAB relation TAB tail.
inline void load_triple_file(TripleStore& store, const std::string& path, Split split) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open triple file: " + path);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    size_t t1 = line.find('\t');
    size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected head<TAB>relation<TAB>tail");
    std::string h = normalize_name(std::string_view(line).substr(0, t1));
    std::string r = normalize_name(std::string_view(line).substr(t1 + 1, t2 - t1 - 1));
    std::string t = normalize_name(std::string_view(line).substr(t2 + 1));
    if (h.empty() || r.empty() || t.empty())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty field");
    store.split(split).push_back({store.entity_id(h), store.relation_id(r), store.entity_id(t)});
  }
}

inline void write_triple_file(const TripleStore& store, Split split, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write triple file: " + path);
  for (const Triple& t : store.split(split))
    out << store.entity_names[t.head] << '\t' << store.relation_names[t.relation] << '\t'
        << store.entity_names[t.tail] << '\n';
}

// Id assignment is first-appearance order over train, then valid, then test.
inline TripleStore load_store(const std::string& train_path, const std::string& valid_path,
                              const std::string& test_path) {
  TripleStore store;
  load_triple_file(store, train_path, Split::train);
  if (!valid_path.empty()) load_triple_file(store, valid_path, Split::valid);
  if (!test_path.empty()) load_triple_file(store, test_path, Split::test);
  return store;
}

// entity_id -> cluster_id, total; unlisted entities form singleton clusters.
struct ClusterMap {
  std::vector<int> cluster_of;          // size n_entities
  std::vector<std::vector<int>> members;  // cluster_id -> entity ids

  const std::vector<int>& cluster_members(int entity) const { return members[cluster_of[entity]]; }
};

inline ClusterMap singleton_clusters(int n_entities) {
  ClusterMap cm;
  cm.cluster_of.resize(n_entities);
  cm.members.resize(n_entities);
  for (int i = 0; i < n_entities; ++i) {
    cm.cluster_of[i] = i;
    cm.members[i] = {i};
  }
  return cm;
}

// One cluster per line, TAB-separated entity names. Names missing from the
// store are skipped.
inline ClusterMap load_clusters(const std::string& path, const TripleStore& store) {
  ClusterMap cm = singleton_clusters(store.n_entities());
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open cluster file: " + path);
  std::string line;
  std::vector<std::vector<int>> groups;
  std::vector<char> grouped(store.n_entities(), 0);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<int> group;
    size_t start = 0;
    while (start <= line.size()) {
      size_t tab = line.find('\t', start);
      if (tab == std::string::npos) tab = line.size();
      std::string name = normalize_name(std::string_view(line).substr(start, tab - start));
      if (!name.empty()) {
        auto it = store.entity_ids.find(name);
        if (it != store.entity_ids.end() && !grouped[it->second]) {
          group.push_back(it->second);
          grouped[it->second] = 1;
        }
      }
      start = tab + 1;
    }
    if (group.size() > 1) groups.push_back(std::move(group));
  }
  // rebuild: multi-member groups first, then remaining singletons
  cm.members.clear();
  cm.cluster_of.assign(store.n_entities(), -1);
  for (auto& g : groups) {
    int cid = static_cast<int>(cm.members.size());
    for (int e : g) cm.cluster_of[e] = cid;
    cm.members.push_back(std::move(g));
  }
  for (int e = 0; e < store.n_entities(); ++e)
    if (cm.cluster_of[e] < 0) {
      cm.cluster_of[e] = static_cast<int>(cm.members.size());
      cm.members.push_back({e});
    }
  return cm;
}

// GloVe text layout: word SPACE d space-separated decimals per line.
struct WordVectors {
  int dim = 0;
  std::unordered_map<std::string, std::vector<float>> table;
};

inline WordVectors load_word_vectors(const std::string& path, int expected_dim = 0) {
  WordVectors wv;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open word-vector file: " + path);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream iss(line);
    std::string word;
    iss >> word;
    std::vector<float> vec;
    float v;
    while (iss >> v) vec.push_back(v);
    if (wv.dim == 0) {
      wv.dim = expected_dim > 0 ? expected_dim : static_cast<int>(vec.size());
    }
    if (static_cast<int>(vec.size()) != wv.dim)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(wv.dim) + "-dimensional vector, got " +
                               std::to_string(vec.size()));
    wv.table[normalize_name(word)] = std::move(vec);
  }
  return wv;
}

inline const std::string kInversePrefix = "inverse of ";

// Doubles the relation set and adds a reversed copy of every training triple.
// Valid/test triples are untouched; head queries are rewritten at evaluation.
inline void add_reciprocals(TripleStore& store) {
  if (store.has_reciprocals()) throw std::runtime_error("add_reciprocals: already applied");
  int base = store.n_relations();
  store.base_relation_count = base;
  for (int r = 0; r < base; ++r) {
    int inv = store.relation_id(kInversePrefix + store.relation_names[r]);
    if (inv != base + r)
      throw std::runtime_error("add_reciprocals: relation name collision for '" +
                               store.relation_names[r] + "'");
  }
  size_t n_train = store.train.size();
  store.train.reserve(2 * n_train);
  for (size_t i = 0; i < n_train; ++i) {
    Triple t = store.train[i];
    store.train.push_back({t.tail, t.relation + base, t.head});
  }
}

struct OneToNGroup {
  int head, relation;
  std::vector<int> tails;
};

// Groups training triples by (head, relation); first-appearance order, tails
// deduplicated in appearance order.
inline std::vector<OneToNGroup> group_one_to_n(const TripleStore& store) {
  if (!store.has_reciprocals())
    throw std::runtime_error("group_one_to_n: reciprocals must be added first");
  std::vector<OneToNGroup> groups;
  std::unordered_map<int64_t, int> index;
  index.reserve(store.train.size() * 2);
  for (const Triple& t : store.train) {
    int64_t key = (static_cast<int64_t>(t.head) << 32) | static_cast<uint32_t>(t.relation);
    auto [it, inserted] = index.emplace(key, static_cast<int>(groups.size()));
    if (inserted) groups.push_back({t.head, t.relation, {}});
    OneToNGroup& g = groups[it->second];
    bool dup = false;
    for (int tail : g.tails)
      if (tail == t.tail) {
        dup = true;
        break;
      }
    if (!dup) g.tails.push_back(t.tail);
  }
  return groups;
}

// Union of all tails in the batch, first-appearance order.
inline std::vector<int> in_batch_candidates(const OneToNGroup* batch, size_t count) {
  if (count == 0) throw std::runtime_error("in_batch_candidates: empty batch");
  std::vector<int> candidates;
  std::unordered_set<int> seen;
  for (size_t i = 0; i < count; ++i)
    for (int t : batch[i].tails)
      if (seen.insert(t).second) candidates.push_back(t);
  return candidates;
}

inline std::vector<int> in_batch_candidates(const std::vector<OneToNGroup>& batch) {
  return in_batch_candidates(batch.data(), batch.size());
}

}  // namespace okbc

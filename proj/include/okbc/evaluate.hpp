#pragma once

// Filtered ranked evaluation: reciprocal-relation head queries, optional
// gold-cluster rank adjustment, MR / MRR / Hits@N aggregates.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "okbc/data.hpp"

namespace okbc {

inline constexpr std::array<int, 6> kHitsLevels = {1, 3, 5, 10, 30, 50};

// (item, relation) -> all known-true answers across train+valid+test, both
// query directions. Head-direction keys use the reciprocal relation id.
struct FilterIndex {
  std::unordered_map<int64_t, std::vector<int>> known;

  static int64_t key(int item, int rel) {
    return (static_cast<int64_t>(item) << 32) | static_cast<uint32_t>(rel);
  }

  const std::vector<int>& find(int item, int rel) const {
    static const std::vector<int> empty;
    auto it = known.find(key(item, rel));
    return it == known.end() ? empty : it->second;
  }
};

inline FilterIndex build_filter_index(const TripleStore& store) {
  if (!store.has_reciprocals())
    throw std::runtime_error("build_filter_index: reciprocals must be added first");
  FilterIndex fi;
  int base = store.base_relation_count;
  auto add = [&](const Triple& t) {
    if (t.relation >= base) return;  // augmented copy of a forward triple
    fi.known[FilterIndex::key(t.head, t.relation)].push_back(t.tail);
    fi.known[FilterIndex::key(t.tail, t.relation + base)].push_back(t.head);
  };
  for (const Triple& t : store.train) add(t);
  for (const Triple& t : store.valid) add(t);
  for (const Triple& t : store.test) add(t);
  return fi;
}

// Rank of `gold` among non-filtered entities, ties counted against it:
// 1 + #{better} + #{equal, not gold}. `filter` must not contain gold.
template <class T>
int filtered_rank(const std::vector<T>& logits, int gold, const std::vector<int>& filter) {
  int n = static_cast<int>(logits.size());
  if (gold < 0 || gold >= n) throw std::runtime_error("filtered_rank: gold out of range");
  std::vector<char> skip(n, 0);
  for (int e : filter) {
    if (e == gold) throw std::runtime_error("filtered_rank: gold entity is filtered");
    if (e >= 0 && e < n) skip[e] = 1;
  }
  T g = logits[gold];
  int rank = 1;
  for (int j = 0; j < n; ++j) {
    if (skip[j] || j == gold) continue;
    if (logits[j] >= g) ++rank;
  }
  return rank;
}

// Lowest filtered rank across the gold cluster; each member is ranked with
// all other known answers plus the remaining members filtered out.
template <class T>
int cluster_rank(const std::vector<T>& logits, const std::vector<int>& members,
                 const std::vector<int>& known_true) {
  if (members.empty()) throw std::runtime_error("cluster_rank: empty cluster");
  int n = static_cast<int>(logits.size());
  std::vector<char> skip(n, 0);
  for (int e : known_true)
    if (e >= 0 && e < n) skip[e] = 1;
  for (int e : members) skip[e] = 1;
  int best = n + 1;
  for (int m : members) {
    skip[m] = 0;
    T g = logits[m];
    int rank = 1;
    for (int j = 0; j < n; ++j) {
      if (skip[j] || j == m) continue;
      if (logits[j] >= g) ++rank;
    }
    skip[m] = 1;
    best = std::min(best, rank);
  }
  return best;
}

struct QueryRank {
  Triple triple;    // original triple, base relation id
  bool head_query;  // scored as <t, r^-1, ?> when true
  int rank;
};

struct Aggregates {
  size_t count = 0;
  double mr = 0.0, mrr = 0.0;
  std::array<double, kHitsLevels.size()> hits{};
};

struct RankReport {
  std::vector<QueryRank> per_query;

  Aggregates aggregate(int direction) const {  // 0 tail, 1 head, 2 both
    Aggregates a;
    for (const QueryRank& q : per_query) {
      if (direction == 0 && q.head_query) continue;
      if (direction == 1 && !q.head_query) continue;
      ++a.count;
      a.mr += q.rank;
      a.mrr += 1.0 / q.rank;
      for (size_t i = 0; i < kHitsLevels.size(); ++i)
        if (q.rank <= kHitsLevels[i]) a.hits[i] += 1.0;
    }
    if (a.count) {
      a.mr /= static_cast<double>(a.count);
      a.mrr /= static_cast<double>(a.count);
      for (auto& h : a.hits) h /= static_cast<double>(a.count);
    }
    return a;
  }

  double mrr() const { return aggregate(2).mrr; }
  double mr() const { return aggregate(2).mr; }
  double hits_at(int n) const {
    for (size_t i = 0; i < kHitsLevels.size(); ++i)
      if (kHitsLevels[i] == n) return aggregate(2).hits[i];
    throw std::runtime_error("hits_at: unsupported level");
  }
};

// score_all(item, relation) -> logits over every entity. Each eval triple
// produces a tail query <h,r,?> and a rewritten head query <t,r^-1,?>.
template <class ScoreFn>
RankReport evaluate_split(ScoreFn&& score_all, const TripleStore& store,
                          const FilterIndex& filter, const ClusterMap* clusters, Split split) {
  if (!store.has_reciprocals())
    throw std::runtime_error("evaluate: reciprocals must be added first");
  const std::vector<Triple>& triples = store.split(split);
  if (triples.empty())
    throw std::runtime_error(std::string("evaluate: split '") + split_name(split) + "' is empty");
  int base = store.base_relation_count;
  RankReport report;
  report.per_query.reserve(triples.size() * 2);
  for (const Triple& t : triples) {
    if (t.relation >= base) {
      // train split carries augmented reciprocal copies; skip those
      if (split == Split::train) continue;
      throw std::runtime_error("evaluate: reciprocal triple in eval split");
    }
    {
      auto logits = score_all(t.head, t.relation);
      const auto& known = filter.find(t.head, t.relation);
      int rank;
      if (clusters) {
        rank = cluster_rank(logits, clusters->cluster_members(t.tail), known);
      } else {
        std::vector<int> f;
        f.reserve(known.size());
        for (int e : known)
          if (e != t.tail) f.push_back(e);
        rank = filtered_rank(logits, t.tail, f);
      }
      report.per_query.push_back({t, false, rank});
    }
    {
      auto logits = score_all(t.tail, t.relation + base);
      const auto& known = filter.find(t.tail, t.relation + base);
      int rank;
      if (clusters) {
        rank = cluster_rank(logits, clusters->cluster_members(t.head), known);
      } else {
        std::vector<int> f;
        f.reserve(known.size());
        for (int e : known)
          if (e != t.head) f.push_back(e);
        rank = filtered_rank(logits, t.head, f);
      }
      report.per_query.push_back({t, true, rank});
    }
  }
  return report;
}

// One line per direction plus a combined line:
// split TAB direction TAB MR TAB MRR TAB H@1 .. H@50
inline void write_report_header(std::ostream& os) {
  os << "split\tdirection\tMR\tMRR";
  for (int n : kHitsLevels) os << "\tH@" << n;
  os << "\n";
}

inline void write_report_lines(std::ostream& os, const std::string& split,
                               const RankReport& report) {
  static const char* dirs[3] = {"tail", "head", "both"};
  for (int d = 0; d < 3; ++d) {
    Aggregates a = report.aggregate(d);
    os << split << '\t' << dirs[d] << '\t' << a.mr << '\t' << a.mrr;
    for (size_t i = 0; i < kHitsLevels.size(); ++i) os << '\t' << a.hits[i];
    os << "\n";
  }
}

inline void write_per_query(std::ostream& os, const std::string& split,
                            const RankReport& report) {
  os << "split\thead\trelation\ttail\tdirection\trank\n";
  for (const QueryRank& q : report.per_query)
    os << split << '\t' << q.triple.head << '\t' << q.triple.relation << '\t' << q.triple.tail
       << '\t' << (q.head_query ? "head" : "tail") << '\t' << q.rank << "\n";
}

}  // namespace okbc

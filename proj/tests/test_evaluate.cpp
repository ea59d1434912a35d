#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "okbc/evaluate.hpp"
#include "support/oracles.hpp"
#include "support/synth.hpp"

using namespace okbc;
using okbc::testing::oracle_cluster_rank;
using okbc::testing::oracle_filtered_rank;

TEST_CASE("filtered_rank examples") {
  std::vector<double> logits = {0.9, 0.5, 0.7, 0.3};  // A B C D
  CHECK(filtered_rank(logits, 2, {0}) == 1);          // filter A, C is best left
  CHECK(filtered_rank(logits, 0, {}) == 1);           // strict max
  std::vector<double> flat = {1.0, 1.0, 1.0, 1.0};
  CHECK(filtered_rank(flat, 2, {}) == 4);  // pessimistic ties
  CHECK_THROWS_WITH_AS(filtered_rank(logits, 2, {2}), doctest::Contains("filtered"),
                       std::runtime_error);
}

TEST_CASE("cluster_rank examples") {
  std::vector<double> logits = {0.1, 0.9, 0.8, 0.95};
  // cluster {C=2, D=3}: D outranks everything once C is filtered
  CHECK(cluster_rank(logits, {2, 3}, {2, 3}) == 1);
  // singleton equals filtered_rank
  CHECK(cluster_rank(logits, {2}, {2}) == filtered_rank(logits, 2, {}));
  CHECK_THROWS_AS(cluster_rank(logits, {}, {}), std::runtime_error);
}

TEST_CASE("rank oracle equivalence on random instances") {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    int n = 2 + rng.below(49);
    std::vector<double> logits(n);
    for (auto& v : logits) v = rng.below(8) * 0.125;  // force ties
    int gold = rng.below(n);
    std::vector<int> filter;
    for (int e = 0; e < n; ++e)
      if (e != gold && rng.bernoulli(0.2)) filter.push_back(e);
    CHECK(filtered_rank(logits, gold, filter) == oracle_filtered_rank(logits, gold, filter));
  }
}

TEST_CASE("adding a known-true competitor never raises the gold rank") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 3 + rng.below(30);
    std::vector<double> logits(n);
    for (auto& v : logits) v = rng.uniform(-1, 1);
    int gold = rng.below(n);
    std::vector<int> filter;
    int base = filtered_rank(logits, gold, filter);
    for (int extra = 0; extra < n; ++extra) {
      if (extra == gold) continue;
      filter.push_back(extra);
      int next = filtered_rank(logits, gold, filter);
      CHECK(next <= base);
      base = next;
    }
  }
}

TEST_CASE("metric arithmetic anchors") {
  RankReport report;
  Triple t{0, 0, 1};
  report.per_query = {{t, false, 1}, {t, false, 2}, {t, false, 4}};
  CHECK(report.mrr() == doctest::Approx(0.5833333333).epsilon(1e-9));
  CHECK(report.mr() == doctest::Approx(7.0 / 3.0).epsilon(1e-9));

  RankReport hits;
  hits.per_query = {{t, false, 1}, {t, false, 10}, {t, false, 11}};
  CHECK(hits.hits_at(10) == doctest::Approx(2.0 / 3.0));
  CHECK(hits.hits_at(1) == doctest::Approx(1.0 / 3.0));
  // Hits@N is nondecreasing in N
  Aggregates a = hits.aggregate(2);
  for (size_t i = 1; i < kHitsLevels.size(); ++i) CHECK(a.hits[i] >= a.hits[i - 1]);
}

TEST_CASE("aggregates recomputed from the per-query list match") {
  Rng rng(17);
  RankReport report;
  for (int i = 0; i < 200; ++i)
    report.per_query.push_back({{0, 0, 0}, rng.bernoulli(0.5), 1 + rng.below(40)});
  for (int dir = 0; dir < 3; ++dir) {
    Aggregates a = report.aggregate(dir);
    double mr = 0, mrr = 0;
    size_t count = 0;
    for (const auto& q : report.per_query) {
      if (dir == 0 && q.head_query) continue;
      if (dir == 1 && !q.head_query) continue;
      ++count;
      mr += q.rank;
      mrr += 1.0 / q.rank;
    }
    CHECK(a.count == count);
    CHECK(a.mr == doctest::Approx(mr / count).epsilon(1e-12));
    CHECK(a.mrr == doctest::Approx(mrr / count).epsilon(1e-12));
  }
}

namespace {

// deterministic fake scorer: logit of entity e for query (item, rel)
struct FakeScorer {
  int n;
  uint64_t salt;
  std::vector<double> operator()(int item, int rel) const {
    std::vector<double> logits(n);
    for (int e = 0; e < n; ++e) {
      Rng r(mix_seed(salt, (static_cast<uint64_t>(item) << 40) ^
                               (static_cast<uint64_t>(rel) << 20) ^ static_cast<uint64_t>(e)));
      logits[e] = r.below(16) * 0.0625;  // coarse grid forces ties
    }
    return logits;
  }
};

}  // namespace

TEST_CASE("evaluate_split equals a brute-force re-ranking oracle") {
  for (uint64_t seed : {11u, 22u, 33u}) {
    TripleStore store = okbc::testing::make_memorization_kb(seed, 20, 5, 80);
    // move some triples into valid/test
    for (int i = 0; i < 10; ++i) {
      store.valid.push_back(store.train.back());
      store.train.pop_back();
      store.test.push_back(store.train.back());
      store.train.pop_back();
    }
    add_reciprocals(store);
    FilterIndex filter = build_filter_index(store);
    FakeScorer scorer{store.n_entities(), seed};
    RankReport report = evaluate_split(scorer, store, filter, nullptr, Split::test);
    REQUIRE(report.per_query.size() == store.test.size() * 2);
    int base = store.base_relation_count;
    for (const auto& q : report.per_query) {
      int item = q.head_query ? q.triple.tail : q.triple.head;
      int rel = q.head_query ? q.triple.relation + base : q.triple.relation;
      int gold = q.head_query ? q.triple.head : q.triple.tail;
      auto logits = scorer(item, rel);
      std::vector<int> f;
      for (int e : filter.find(item, rel))
        if (e != gold) f.push_back(e);
      CHECK(q.rank == oracle_filtered_rank(logits, gold, f));
    }
  }
}

TEST_CASE("cluster-aware evaluation equals the per-member oracle") {
  Rng rng(5);
  TripleStore store = okbc::testing::make_memorization_kb(77, 24, 4, 90);
  for (int i = 0; i < 12; ++i) {
    store.test.push_back(store.train.back());
    store.train.pop_back();
  }
  add_reciprocals(store);
  // random clusters of size 1..3
  ClusterMap cm = singleton_clusters(store.n_entities());
  cm.members.clear();
  cm.cluster_of.assign(store.n_entities(), -1);
  std::vector<int> ids(store.n_entities());
  std::iota(ids.begin(), ids.end(), 0);
  rng.shuffle(ids);
  for (size_t i = 0; i < ids.size();) {
    size_t take = std::min<size_t>(1 + rng.below(3), ids.size() - i);
    std::vector<int> group(ids.begin() + i, ids.begin() + i + take);
    int cid = static_cast<int>(cm.members.size());
    for (int e : group) cm.cluster_of[e] = cid;
    cm.members.push_back(group);
    i += take;
  }
  FilterIndex filter = build_filter_index(store);
  FakeScorer scorer{store.n_entities(), 123};
  RankReport report = evaluate_split(scorer, store, filter, &cm, Split::test);
  int base = store.base_relation_count;
  for (const auto& q : report.per_query) {
    int item = q.head_query ? q.triple.tail : q.triple.head;
    int rel = q.head_query ? q.triple.relation + base : q.triple.relation;
    int gold = q.head_query ? q.triple.head : q.triple.tail;
    auto logits = scorer(item, rel);
    CHECK(q.rank ==
          oracle_cluster_rank(logits, cm.cluster_members(gold), filter.find(item, rel)));
  }
}

TEST_CASE("head queries via reciprocal rewrite equal direct head ranking") {
  // oracle: rank heads directly with a head-side filter index
  TripleStore store = okbc::testing::make_memorization_kb(31, 15, 4, 60);
  for (int i = 0; i < 8; ++i) {
    store.test.push_back(store.train.back());
    store.train.pop_back();
  }
  add_reciprocals(store);
  FilterIndex filter = build_filter_index(store);
  FakeScorer scorer{store.n_entities(), 55};
  RankReport report = evaluate_split(scorer, store, filter, nullptr, Split::test);
  int base = store.base_relation_count;
  // build the head-side index from scratch, on base triples only
  std::unordered_map<int64_t, std::vector<int>> head_known;
  auto add = [&](const Triple& t) {
    if (t.relation >= base) return;
    head_known[FilterIndex::key(t.tail, t.relation)].push_back(t.head);
  };
  for (const Triple& t : store.train) add(t);
  for (const Triple& t : store.valid) add(t);
  for (const Triple& t : store.test) add(t);
  for (const auto& q : report.per_query) {
    if (!q.head_query) continue;
    auto logits = scorer(q.triple.tail, q.triple.relation + base);
    std::vector<int> f;
    for (int e : head_known[FilterIndex::key(q.triple.tail, q.triple.relation)])
      if (e != q.triple.head) f.push_back(e);
    CHECK(q.rank == oracle_filtered_rank(logits, q.triple.head, f));
  }
}

TEST_CASE("three-entity hand trace") {
  // entities: a=0, b=1, c=2; relation r=0; train {a r b}; test {a r c}
  TripleStore store = okbc::testing::store_from_names({{"a", "r", "b"}}, {},
                                                      {{"a", "r", "c"}});
  add_reciprocals(store);
  FilterIndex filter = build_filter_index(store);
  auto scorer = [&](int item, int rel) -> std::vector<double> {
    // logits chosen by hand: query (a, r): a:0.1 b:0.9 c:0.5
    if (item == 0 && rel == 0) return {0.1, 0.9, 0.5};
    // head query (c, r^-1): a:0.2 b:0.8 c:0.3
    return {0.2, 0.8, 0.3};
  };
  RankReport report = evaluate_split(scorer, store, filter, nullptr, Split::test);
  REQUIRE(report.per_query.size() == 2);
  // tail query: gold c (0.5), b is known-true and filtered, a below: rank 1
  CHECK(report.per_query[0].rank == 1);
  // head query: gold a (0.2), no filter applies, b and c above: rank 3
  CHECK(report.per_query[1].rank == 3);
  Aggregates agg = report.aggregate(2);
  CHECK(agg.mrr == doctest::Approx((1.0 + 1.0 / 3.0) / 2.0));
  CHECK(agg.mr == doctest::Approx(2.0));

  CHECK_THROWS_WITH_AS(evaluate_split(scorer, store, filter, nullptr, Split::valid),
                       doctest::Contains("empty"), std::runtime_error);
}

TEST_CASE("report writer emits per-direction and combined lines") {
  RankReport report;
  report.per_query = {{{0, 0, 1}, false, 1}, {{0, 0, 1}, true, 4}};
  std::ostringstream os;
  write_report_header(os);
  write_report_lines(os, "test", report);
  std::string text = os.str();
  CHECK(text.find("split\tdirection\tMR\tMRR\tH@1\tH@3\tH@5\tH@10\tH@30\tH@50") == 0);
  CHECK(text.find("test\ttail\t1\t1") != std::string::npos);
  CHECK(text.find("test\thead\t4\t0.25") != std::string::npos);
  CHECK(text.find("test\tboth\t2.5\t0.625") != std::string::npos);
  std::ostringstream pq;
  write_per_query(pq, "test", report);
  CHECK(pq.str().find("test\t0\t0\t1\thead\t4") != std::string::npos);
}

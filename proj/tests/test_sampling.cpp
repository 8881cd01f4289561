#include "incdet/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "testutil.hpp"

using namespace incdet;

namespace {

// dataset fixture: each entry is (id, per-class box counts); pixels are irrelevant here
TaskDataset make_ds(const std::vector<std::pair<std::string, std::vector<int>>>& entries,
                    int num_classes) {
  TaskDataset ds;
  ds.name = "fixture";
  ds.image_h = ds.image_w = 64;
  for (int c = 0; c < num_classes; ++c) ds.category_names.push_back("c" + std::to_string(c));
  ds.style.palette = {Color{10, 10, 10}};
  for (const auto& [id, counts] : entries) {
    LabeledImage li;
    li.id = id;
    for (int c = 0; c < static_cast<int>(counts.size()); ++c)
      for (int k = 0; k < counts[static_cast<std::size_t>(c)]; ++k)
        li.boxes.push_back({1.0 + k, 1.0 + k, 7.0 + k, 7.0 + k, c, {}});
    ds.train.push_back(std::move(li));
  }
  return ds;
}

std::set<std::string> ids_of(const ExemplarSet& ex) {
  std::set<std::string> out;
  for (const auto& it : ex.items) out.insert(it.image_id);
  return out;
}

// K single-class images named img00..; image k carries (K - k) boxes so the
// rank order is exactly img00, img01, ...
TaskDataset ladder_ds(int k_images) {
  std::vector<std::pair<std::string, std::vector<int>>> entries;
  for (int i = 0; i < k_images; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "img%03d", i);
    entries.push_back({id, {k_images - i}});
  }
  return make_ds(entries, 1);
}

}  // namespace

TEST_CASE("rank_by_boxes: count ordering with id tie-break") {
  TaskDataset ds = make_ds({{"a", {3}}, {"b", {1}}, {"c", {3}}}, 1);
  CHECK(rank_by_boxes(ds, 0) == std::vector<std::string>{"a", "c", "b"});

  TaskDataset single = make_ds({{"only", {2}}}, 1);
  CHECK(rank_by_boxes(single, 0) == std::vector<std::string>{"only"});

  CHECK_THROWS_AS(rank_by_boxes(ds, 5), Error);  // out of range
  TaskDataset missing = make_ds({{"a", {2, 0}}}, 2);
  CHECK_THROWS_AS(rank_by_boxes(missing, 1), Error);  // class absent
}

TEST_CASE("rank_by_boxes: per-class vs total-count ranking switch") {
  // b has fewer class-0 boxes but more boxes overall
  TaskDataset ds = make_ds({{"a", {3, 0}}, {"b", {1, 4}}}, 2);
  CHECK(rank_by_boxes(ds, 0) == std::vector<std::string>{"a", "b"});
  SamplingOptions total;
  total.rank_by_total_boxes = true;
  CHECK(rank_by_boxes(ds, 0, total) == std::vector<std::string>{"b", "a"});
}

TEST_CASE("hard sampling degeneracy: eta=1 equals top-s") {
  TaskDataset ds = make_ds({{"a", {5}}, {"b", {4}}, {"c", {1}}}, 1);
  ExemplarSet hard = sample_exemplars(ds, 0, 2, 1, SamplingStrategy::hard, 42);
  CHECK(ids_of(hard) == std::set<std::string>{"a", "b"});

  ExemplarSet adaptive1 = sample_exemplars(ds, 0, 2, 1, SamplingStrategy::adaptive, 42);
  CHECK(ids_of(adaptive1) == ids_of(hard));
}

TEST_CASE("random degeneracy: eta >= K/s draws from the full candidate list") {
  TaskDataset ds = ladder_ds(20);
  // eta*s = 40 >= K = 20, so adaptive == random given the same seed
  for (std::uint64_t seed : {1ULL, 9ULL, 77ULL}) {
    ExemplarSet r = sample_exemplars(ds, 0, 5, 1, SamplingStrategy::random, seed);
    ExemplarSet a = sample_exemplars(ds, 0, 5, 8, SamplingStrategy::adaptive, seed);
    CHECK(ids_of(r) == ids_of(a));
  }
}

TEST_CASE("uniformity: random sampling selection frequency within 3-sigma binomial bounds") {
  TaskDataset ds = ladder_ds(20);
  const int s = 5, k = 20, n_seeds = 1000;
  std::map<std::string, int> freq;
  for (int seed = 0; seed < n_seeds; ++seed) {
    ExemplarSet ex = sample_exemplars(ds, 0, s, 1, SamplingStrategy::random, static_cast<std::uint64_t>(seed));
    REQUIRE(ex.items.size() == static_cast<std::size_t>(s));
    for (const auto& it : ex.items) freq[it.image_id]++;
  }
  const double p = static_cast<double>(s) / k;
  const double sigma = std::sqrt(n_seeds * p * (1 - p));
  for (const auto& [id, count] : freq) {
    CHECK(std::abs(count - n_seeds * p) <= 3 * sigma);
  }
  CHECK(freq.size() == static_cast<std::size_t>(k));
}

TEST_CASE("adaptive eta=5 with s=20: every pick within the top 100 ranked entries") {
  TaskDataset ds = ladder_ds(150);
  const auto ranked = rank_by_boxes(ds, 0);
  std::set<std::string> top100(ranked.begin(), ranked.begin() + 100);
  for (std::uint64_t seed : {3ULL, 14ULL, 159ULL}) {
    ExemplarSet ex = sample_exemplars(ds, 0, 20, 5, SamplingStrategy::adaptive, seed);
    CHECK(ex.items.size() == 20);
    for (const auto& it : ex.items) CHECK(top100.count(it.image_id) == 1);
  }
}

TEST_CASE("monotone containment: the adaptive pool is a ranked prefix growing with eta") {
  TaskDataset ds = ladder_ds(60);
  const auto ranked = rank_by_boxes(ds, 0);
  const int s = 5;
  for (int eta : {1, 2, 4, 8}) {
    std::set<std::string> pool(ranked.begin(),
                               ranked.begin() + std::min<std::size_t>(ranked.size(),
                                                                      static_cast<std::size_t>(eta) * s));
    ExemplarSet ex = sample_exemplars(ds, 0, s, eta, SamplingStrategy::adaptive, 5);
    for (const auto& it : ex.items) CHECK(pool.count(it.image_id) == 1);
  }
}

TEST_CASE("budget: per-class selection is min(s, K); overflow takes all with a warning") {
  TaskDataset ds = make_ds({{"a", {1}}, {"b", {2}}}, 1);
  ExemplarSet ex = sample_exemplars(ds, 0, 10, 1, SamplingStrategy::hard, 3);
  CHECK(ex.items.size() == 2);  // K=2 < s=10
}

TEST_CASE("cross-class duplicates are merged and backfilled from beyond the window") {
  // both classes rank img "shared" first; dedup must backfill from lower ranks
  TaskDataset ds = make_ds({{"shared", {3, 3}}, {"a0", {2, 0}}, {"a1", {1, 0}},
                            {"b0", {0, 2}}, {"b1", {0, 1}}},
                           2);
  ExemplarSet ex = sample_exemplars(ds, 0, 2, 1, SamplingStrategy::hard, 7);
  // target: min(2,3)+min(2,3)=4 unique images
  CHECK(ex.items.size() == 4);
  CHECK(ids_of(ex).size() == 4);
  CHECK(ids_of(ex).count("shared") == 1);
  CHECK(static_cast<int>(ex.items.size()) <= 2 * ds.num_classes());
}

TEST_CASE("determinism: identical inputs give identical exemplar sets") {
  TaskDataset ds = ladder_ds(30);
  ExemplarSet a = sample_exemplars(ds, 0, 4, 3, SamplingStrategy::adaptive, 11);
  ExemplarSet b = sample_exemplars(ds, 0, 4, 3, SamplingStrategy::adaptive, 11);
  CHECK(a.items == b.items);
  ExemplarSet c = sample_exemplars(ds, 0, 4, 3, SamplingStrategy::adaptive, 12);
  CHECK(a.items != c.items);
}

TEST_CASE("exemplar set round trips through its on-disk form") {
  testutil::TempDir tmp("incdet_ex");
  TaskDataset ds = ladder_ds(10);
  ExemplarSet ex = sample_exemplars(ds, 3, 2, 2, SamplingStrategy::adaptive, 9);
  save_exemplar_set(ex, tmp.path() / "ex.json");
  ExemplarSet back = load_exemplar_set(tmp.path() / "ex.json");
  CHECK(back.items == ex.items);
  CHECK(back.strategy == ex.strategy);
  CHECK(back.eta == ex.eta);
  CHECK(back.budget_per_class == ex.budget_per_class);
  for (const auto& it : back.items) CHECK(it.task_id == 3);
}

TEST_CASE("exemplar batches: cycle counts and exact coverage per cycle") {
  std::vector<ExemplarItem> items;
  for (int i = 0; i < 100; ++i) items.push_back({"id" + std::to_string(i), 0});
  ExemplarBatcher batcher(items, 4, 5);
  CHECK(batcher.batches_per_cycle() == 25);

  std::map<std::string, int> seen;
  for (int cycle = 0; cycle < 2; ++cycle)
    for (int b = 0; b < 25; ++b)
      for (const auto& it : batcher.next()) seen[it.image_id]++;
  CHECK(seen.size() == 100);
  for (const auto& [id, n] : seen) CHECK(n == 2);

  ExemplarBatcher empty({}, 4, 5);
  CHECK(empty.next().empty());
}

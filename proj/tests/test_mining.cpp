#include <doctest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "otface/errors.hpp"
#include "otface/mining.hpp"

using namespace otface;
using namespace otface::mining;

namespace {

struct RawBatch {
  std::size_t n = 0, d = 0;
  oracle::Vec emb;
  std::vector<std::int64_t> labels;

  LabeledBatch batch() const { return {Tensor({n, d}, emb), labels, {}}; }
};

RawBatch random_batch(std::mt19937_64& rng, std::size_t max_n = 32) {
  RawBatch b;
  b.n = std::uniform_int_distribution<std::size_t>(2, max_n)(rng);
  b.d = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
  const auto classes = std::uniform_int_distribution<std::int64_t>(1, 5)(rng);
  b.emb = oracle::uniform_vec(rng, b.n * b.d);
  std::uniform_int_distribution<std::int64_t> lab(0, classes - 1);
  for (std::size_t i = 0; i < b.n; ++i) b.labels.push_back(lab(rng));
  return b;
}

std::set<oracle::Triple> as_set(const std::vector<HardGroup>& g) {
  std::set<oracle::Triple> s;
  for (const auto& x : g) s.insert({x.anchor, x.positive, x.negative});
  return s;
}

}  // namespace

TEST_SUITE("mining") {

TEST_CASE("well separated clusters give no groups") {
  // Class 0 near e1, class 1 near e2: within-class cosine ~0.99, across ~0.1.
  const Tensor e({4, 2}, {1.0, 0.05, 1.0, -0.05, 0.1, 1.0, 0.0, 1.0});
  CHECK(mine_hard_groups({e, {0, 0, 1, 1}, {}}).empty());
}

TEST_CASE("single-class batch gives no groups") {
  std::mt19937_64 rng(1);
  const Tensor e({5, 3}, oracle::uniform_vec(rng, 15));
  CHECK(mine_hard_groups({e, {2, 2, 2, 2, 2}, {}}).empty());
}

TEST_CASE("one planted violation") {
  // Sample 2 (class 1) is closer to anchor 0 than its class-mate 1 is, but
  // farther from 1 than 0 is. Sample 3 is far from everything.
  const oracle::Vec emb{1.0, 0.0, 0.0,   //
                        0.6, 0.8, 0.0,   //
                        0.9, -0.3, 0.0,  //
                        -1.0, 0.0, 0.2};
  const std::vector<std::int64_t> labels{0, 0, 1, 2};
  const auto groups = mine_hard_groups({Tensor({4, 3}, emb), labels, {}});
  const std::set<oracle::Triple> expected{{0, 1, 2}};
  CHECK(as_set(groups) == expected);
  CHECK(oracle::hard_triples(emb, 4, 3, labels) == expected);
}

TEST_CASE("uncapped output equals brute-force enumeration") {
  for (std::uint64_t seed = 0; seed < 600; ++seed) {
    std::mt19937_64 rng(seed);
    const RawBatch b = random_batch(rng);
    const auto groups = mine_hard_groups(b.batch());
    INFO("seed " << seed);
    CHECK(as_set(groups) == oracle::hard_triples(b.emb, b.n, b.d, b.labels));
    CHECK(as_set(groups).size() == groups.size());
    CHECK(std::is_sorted(groups.begin(), groups.end()));
  }
}

TEST_CASE("every group satisfies the hard-group invariants") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const RawBatch b = random_batch(rng);
    for (auto cap : {std::optional<std::size_t>{}, std::optional<std::size_t>{2}}) {
      for (const auto& g : mine_hard_groups(b.batch(), cap)) {
        CHECK(b.labels[g.anchor] == b.labels[g.positive]);
        CHECK(g.anchor != g.positive);
        CHECK(b.labels[g.anchor] != b.labels[g.negative]);
        CHECK(oracle::cosine(&b.emb[g.anchor * b.d], &b.emb[g.positive * b.d], b.d) <
              oracle::cosine(&b.emb[g.anchor * b.d], &b.emb[g.negative * b.d], b.d));
      }
    }
  }
}

TEST_CASE("permuting the batch permutes the groups") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const RawBatch b = random_batch(rng);
    std::vector<std::size_t> perm(b.n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    // Position i of the shuffled batch holds original sample perm[i].
    RawBatch s = b;
    for (std::size_t i = 0; i < b.n; ++i) {
      s.labels[i] = b.labels[perm[i]];
      std::copy_n(&b.emb[perm[i] * b.d], b.d, &s.emb[i * b.d]);
    }
    std::set<oracle::Triple> mapped;
    for (const auto& g : mine_hard_groups(s.batch())) {
      mapped.insert({perm[g.anchor], perm[g.positive], perm[g.negative]});
    }
    CHECK(mapped == as_set(mine_hard_groups(b.batch())));
  }
}

TEST_CASE("adding a sample never removes a group") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    RawBatch b = random_batch(rng, 20);
    const auto before = as_set(mine_hard_groups(b.batch()));
    const auto extra = oracle::uniform_vec(rng, b.d);
    b.emb.insert(b.emb.end(), extra.begin(), extra.end());
    b.labels.push_back(std::uniform_int_distribution<std::int64_t>(0, 4)(rng));
    ++b.n;
    const auto after = as_set(mine_hard_groups(b.batch()));
    CHECK(std::includes(after.begin(), after.end(), before.begin(), before.end()));
  }
}

TEST_CASE("equal similarities are not hard") {
  // cos(a, p) == cos(a, n) exactly.
  const Tensor e({3, 2}, {1, 0, 0, 1, 0, -1});
  CHECK(mine_hard_groups({e, {0, 0, 1}, {}}).empty());
}

TEST_CASE("cap keeps the hardest groups per anchor") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const RawBatch b = random_batch(rng);
    const auto all = mine_hard_groups(b.batch());
    const std::size_t cap = 1 + trial % 4;
    const auto capped = mine_hard_groups(b.batch(), cap);

    auto hardness = [&](const HardGroup& g) {
      const double* a = &b.emb[g.anchor * b.d];
      return oracle::cosine(a, &b.emb[g.negative * b.d], b.d) -
             oracle::cosine(a, &b.emb[g.positive * b.d], b.d);
    };
    std::map<std::size_t, std::vector<HardGroup>> by_anchor;
    for (const auto& g : all) by_anchor[g.anchor].push_back(g);
    std::vector<HardGroup> expected;
    for (auto& [a, gs] : by_anchor) {
      std::stable_sort(gs.begin(), gs.end(), [&](const HardGroup& x, const HardGroup& y) {
        const double hx = hardness(x), hy = hardness(y);
        if (hx != hy) return hx > hy;
        return std::tie(x.positive, x.negative) < std::tie(y.positive, y.negative);
      });
      for (std::size_t k = 0; k < std::min(cap, gs.size()); ++k) expected.push_back(gs[k]);
    }
    CHECK(capped == expected);
  }
}

TEST_CASE("batch validation") {
  CHECK_THROWS_AS(mine_hard_groups({Tensor({1, 2}, {1, 0}), {0}, {}}), ContractError);
  CHECK_THROWS_AS(mine_hard_groups({Tensor({2, 2}, {1, 0, 0, 1}), {0}, {}}), DimensionError);
  CHECK_THROWS_AS(mine_hard_groups({Tensor({2, 2}, {1, 0, 0, 0}), {0, 1}, {}}),
                  DegenerateInputError);
  CHECK_THROWS_AS(mine_hard_groups({Tensor({4}), {0, 1, 2, 3}, {}}), DimensionError);
}

}  // TEST_SUITE

#include <doctest.h>

#include <cmath>
#include <random>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "otface/backbone.hpp"
#include "otface/errors.hpp"
#include "otface/losses.hpp"
#include "otface/trainer.hpp"

using namespace otface;
using namespace otface::losses;
using mining::HardGroup;

namespace {

MarginConfig margin(MarginVariant v, double s, double m) {
  MarginConfig c;
  c.variant = v;
  c.scale = s;
  c.margin = m;
  return c;
}

// Weights whose first column is exactly the embedding direction.
Tensor aligned_weights() { return Tensor({2, 3}, {1, 0, -1, 0, 1, 0}); }

Tensor logits_for(const Tensor& emb, const Tensor& w, std::size_t label, const MarginConfig& cfg) {
  Tape tape;
  return tape.value(margin_logits(tape, tape.leaf(emb), tape.leaf(w), label, cfg));
}

// Rows of `eye` are basis vectors e_{offset}, ..., e_{offset + n - 1} in R^d.
Tensor basis_rows(std::size_t n, std::size_t d, std::size_t offset) {
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) t.at(i, offset + i) = 1.0;
  return t;
}

backbone::BackboneConfig toy_backbone() {
  backbone::BackboneConfig b;
  b.input_size = 8;
  b.in_channels = 1;
  b.stage_channels = {3, 4, 4};
  b.embedding_dim = 4;
  b.tap_stage = 1;
  return b;
}

trainer::Dataset toy_batch(std::uint64_t seed, std::vector<std::size_t> labels) {
  std::mt19937_64 rng(seed);
  trainer::Dataset d;
  for (std::size_t l : labels) {
    d.images.push_back(gradcheck::random_tensor(rng, {1, 8, 8}));
    d.num_classes = std::max(d.num_classes, l + 1);
  }
  d.labels = std::move(labels);
  return d;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("margin logit examples") {
  const Tensor emb({2}, {1, 0});
  const Tensor cosm = logits_for(emb, aligned_weights(), 0, margin(MarginVariant::kAdditiveCosine, 30, 0.35));
  CHECK(cosm[0] == doctest::Approx(19.5).epsilon(1e-12));
  CHECK(cosm[1] == doctest::Approx(0.0));
  CHECK(cosm[2] == doctest::Approx(-30.0));

  const Tensor ang = logits_for(emb, aligned_weights(), 0, margin(MarginVariant::kAdditiveAngular, 1, 0.5));
  CHECK(ang[0] == doctest::Approx(std::cos(0.5)).epsilon(1e-12));
  CHECK(ang[0] == doctest::Approx(0.87758).epsilon(1e-5));

  const Tensor plain = logits_for(emb, aligned_weights(), 0, margin(MarginVariant::kPlain, 2, 0.3));
  CHECK(plain[0] == doctest::Approx(2.0));
}

TEST_CASE("zero margin makes every variant plain") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor e = gradcheck::random_tensor(rng, {5});
    const Tensor w = gradcheck::random_tensor(rng, {5, 4});
    const std::size_t y = trial % 4;
    const Tensor p = logits_for(e, w, y, margin(MarginVariant::kPlain, 16, 0.0));
    const Tensor c = logits_for(e, w, y, margin(MarginVariant::kAdditiveCosine, 16, 0.0));
    const Tensor a = logits_for(e, w, y, margin(MarginVariant::kAdditiveAngular, 16, 0.0));
    CHECK(p.vec() == c.vec());
    for (std::size_t j = 0; j < 4; ++j) CHECK(a[j] == doctest::Approx(p[j]).epsilon(1e-12));
  }
}

TEST_CASE("margins only shrink the target logit") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor e = gradcheck::random_tensor(rng, {4});
    const Tensor w = gradcheck::random_tensor(rng, {4, 3});
    const std::size_t y = trial % 3;
    const Tensor p = logits_for(e, w, y, margin(MarginVariant::kPlain, 10, 0.0));
    for (auto v : {MarginVariant::kAdditiveCosine, MarginVariant::kAdditiveAngular}) {
      const Tensor m = logits_for(e, w, y, margin(v, 10, 0.4));
      for (std::size_t j = 0; j < 3; ++j) {
        if (j == y) {
          CHECK(m[j] <= p[j] + 1e-12);
        } else {
          CHECK(m[j] == p[j]);
        }
      }
    }
  }
  // theta_y = 0 keeps the argmax under the angular margin.
  const Tensor m = logits_for(Tensor({2}, {1, 0}), aligned_weights(), 0,
                              margin(MarginVariant::kAdditiveAngular, 64, 0.5));
  CHECK(m[0] > m[1]);
  CHECK(m[0] > m[2]);
}

TEST_CASE("margin config validation and defaults") {
  CHECK_THROWS_AS(margin(MarginVariant::kAdditiveAngular, 64, 1.6).validate(), ConfigError);
  CHECK_THROWS_AS(margin(MarginVariant::kAdditiveCosine, 30, 1.0).validate(), ConfigError);
  CHECK_THROWS_AS(margin(MarginVariant::kPlain, 0, 0).validate(), ConfigError);
  CHECK_THROWS_AS(margin(MarginVariant::kPlain, 1, -0.1).validate(), ConfigError);
  const auto cd = MarginConfig::defaults_for(MarginVariant::kAdditiveCosine);
  CHECK(cd.scale == 30.0);
  CHECK(cd.margin == 0.35);
  const auto ad = MarginConfig::defaults_for(MarginVariant::kAdditiveAngular);
  CHECK(ad.scale == 64.0);
  CHECK(ad.margin == 0.5);
  CHECK(parse_variant(variant_name(MarginVariant::kAdditiveCosine)) == MarginVariant::kAdditiveCosine);
  CHECK_THROWS_AS(parse_variant("sphere"), ConfigError);
}

TEST_CASE("invalid label is a contract error") {
  Tape tape;
  CHECK_THROWS_AS(margin_logits(tape, tape.leaf(Tensor({2}, {1, 0})), tape.leaf(aligned_weights()), 3,
                                MarginConfig{}),
                  ContractError);
}

TEST_CASE("cross entropy examples") {
  Tape tape;
  CHECK(tape.value(cross_entropy(tape, tape.leaf(Tensor({3}, {1000, 0, 0})), 0)).item() ==
        doctest::Approx(0.0));
  CHECK(tape.value(cross_entropy(tape, tape.leaf(Tensor({5}, {2, 2, 2, 2, 2})), 3)).item() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-14));
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto z = oracle::uniform_vec(rng, 6, -10, 10);
    const std::size_t y = trial % 6;
    const double got = tape.value(cross_entropy(tape, tape.leaf(Tensor({6}, z)), y)).item();
    CHECK(std::abs(got - oracle::naive_cross_entropy(z, y)) < 1e-12);
  }
}

TEST_CASE("focal reweighting") {
  Tape tape;
  const Tensor l({3}, {0.2, 1.5, 0.0});
  const double mean = (0.2 + 1.5) / 3.0;
  CHECK(tape.value(focal_reweight(tape, tape.leaf(l), 0.0)).item() == doctest::Approx(mean).epsilon(1e-14));
  const double ln2 = std::log(2.0);
  CHECK(tape.value(focal_reweight(tape, tape.leaf(Tensor({1}, {ln2})), 1.0)).item() ==
        doctest::Approx(0.5 * ln2).epsilon(1e-14));
  CHECK(tape.value(focal_reweight(tape, tape.leaf(Tensor({1}, {0.0})), 3.0)).item() == 0.0);
  CHECK_THROWS_AS(focal_reweight(tape, tape.leaf(l), -1.0), ConfigError);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = oracle::uniform_vec(rng, 7, 0.0, 5.0);
    const double plain = std::accumulate(v.begin(), v.end(), 0.0) / 7.0;
    for (double g : {0.5, 1.0, 2.0, 5.0}) {
      CHECK(tape.value(focal_reweight(tape, tape.leaf(Tensor({7}, v)), g)).item() <= plain + 1e-14);
    }
  }
}

TEST_CASE("hard example filter") {
  Tape tape;
  CHECK(tape.value(hard_example_filter(tape, tape.leaf(Tensor({4}, {4, 3, 2, 1})), 0.5)).item() == 3.5);
  CHECK(tape.value(hard_example_filter(tape, tape.leaf(Tensor({4}, {4, 3, 2, 1})), 1.0)).item() == 2.5);
  CHECK(tape.value(hard_example_filter(tape, tape.leaf(Tensor({3}, {1, 5, 2})), 0.5)).item() ==
        doctest::Approx(3.5));
  CHECK_THROWS_AS(hard_example_filter(tape, tape.leaf(Tensor({2}, {1, 2})), 0.0), ConfigError);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto v = oracle::uniform_vec(rng, 9, 0.0, 3.0);
    const double keep = 0.1 + 0.1 * (trial % 10);
    const double a = tape.value(hard_example_filter(tape, tape.leaf(Tensor({9}, v)), keep)).item();
    std::shuffle(v.begin(), v.end(), rng);
    const double b = tape.value(hard_example_filter(tape, tape.leaf(Tensor({9}, v)), keep)).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-14));
    CHECK(a >= std::accumulate(v.begin(), v.end(), 0.0) / 9.0 - 1e-14);
  }
}

TEST_CASE("ot triplet loss examples") {
  ot::SinkhornConfig cfg;
  Tape tape;
  CHECK(tape.value(ot_triplet_loss(tape, {}, {}, cfg, 0.0)).item() == 0.0);

  // Anchor rows e0..e2; positive holds the same rows shuffled; negative rows
  // e3..e5 are orthogonal to every anchor row, so every cost entry is 1.
  const Tensor a = basis_rows(3, 6, 0);
  const Tensor p({3, 6}, {0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0});
  const Tensor n = basis_rows(3, 6, 3);
  const std::vector<Var> d{tape.leaf(a), tape.leaf(p), tape.leaf(n)};
  const double easy = tape.value(ot_triplet_loss(tape, {{0, 1, 2}}, d, cfg, 0.0)).item();
  const double flipped = tape.value(ot_triplet_loss(tape, {{0, 2, 1}}, d, cfg, 0.0)).item();
  CHECK(easy == doctest::Approx(0.0));
  CHECK(flipped == doctest::Approx(1.0).epsilon(1e-6));

  // OT(a, p) == OT(a, n) at the hinge boundary.
  const std::vector<Var> same{tape.leaf(a), tape.leaf(n), tape.leaf(n)};
  CHECK(tape.value(ot_triplet_loss(tape, {{0, 1, 2}}, same, cfg, 0.0)).item() == 0.0);

  CHECK_THROWS_AS(ot_triplet_loss(tape, {{0, 1, 5}}, d, cfg, 0.0), ContractError);
}

TEST_CASE("ot triplet loss is nonnegative") {
  std::mt19937_64 rng(6);
  ot::SinkhornConfig cfg;
  cfg.epsilon = 0.05;
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    std::vector<Var> d;
    for (int k = 0; k < 4; ++k) d.push_back(tape.leaf(gradcheck::random_tensor(rng, {4, 3})));
    const std::vector<HardGroup> g{{0, 1, 2}, {0, 1, 3}, {2, 3, 0}};
    CHECK(tape.value(ot_triplet_loss(tape, g, d, cfg, 0.0)).item() >= 0.0);
  }
}

TEST_CASE("otface loss degrades to the margin loss") {
  const auto bcfg = toy_backbone();
  const auto params = backbone::init_parameters(bcfg, 2, 11);
  // Tight, well-separated classes give no hard groups.
  trainer::Dataset data;
  data.num_classes = 2;
  for (std::size_t i = 0; i < 4; ++i) {
    data.images.push_back(Tensor::filled({1, 8, 8}, i < 2 ? 1.0 : -1.0));
    data.labels.push_back(i < 2 ? 0 : 1);
  }
  LossConfig with;
  LossConfig without = with;
  without.mining = false;
  const auto a = trainer::compute_batch(params, data, {0, 1, 2, 3}, bcfg, with);
  const auto b = trainer::compute_batch(params, data, {0, 1, 2, 3}, bcfg, without);
  REQUIRE(a.loss.num_hard_groups == 0);
  CHECK(a.loss.ot_loss == 0.0);
  CHECK(a.loss.total == a.loss.margin_loss);
  CHECK(a.loss.total == b.loss.total);
  for (std::size_t k = 0; k < a.grads.size(); ++k) CHECK(a.grads[k].vec() == b.grads[k].vec());
}

TEST_CASE("mining disabled equals margin-only bit for bit") {
  const auto bcfg = toy_backbone();
  const auto params = backbone::init_parameters(bcfg, 2, 12);
  const auto data = toy_batch(3, {0, 0, 1, 1});
  LossConfig off;
  off.mining = false;
  LossConfig zero_weight;
  zero_weight.lambda_ot = 0.0;
  const auto a = trainer::compute_batch(params, data, {0, 1, 2, 3}, bcfg, off);
  const auto b = trainer::compute_batch(params, data, {0, 1, 2, 3}, bcfg, zero_weight);
  CHECK(a.loss.total == a.loss.margin_loss);
  CHECK(a.loss.total == b.loss.total);
  for (std::size_t k = 0; k < a.grads.size(); ++k) CHECK(a.grads[k].vec() == b.grads[k].vec());
}

TEST_CASE("single-class batch has no OT term") {
  const auto bcfg = toy_backbone();
  const auto params = backbone::init_parameters(bcfg, 1, 13);
  const auto data = toy_batch(4, {0, 0, 0, 0});
  const auto r = trainer::compute_batch(params, data, {0, 1, 2, 3}, bcfg, LossConfig{});
  CHECK(r.loss.num_hard_groups == 0);
  CHECK(r.loss.ot_loss == 0.0);
  CHECK(r.loss.total == r.loss.margin_loss);
}

TEST_CASE("total is margin plus OT") {
  const auto bcfg = toy_backbone();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto params = backbone::init_parameters(bcfg, 3, seed);
    const auto data = toy_batch(seed + 100, {0, 0, 1, 1, 2, 2});
    LossConfig cfg;
    cfg.hinge_margin = 0.2;
    const auto r = trainer::compute_batch(params, data, {0, 1, 2, 3, 4, 5}, bcfg, cfg);
    CHECK(r.loss.total == r.loss.margin_loss + r.loss.ot_loss);
    CHECK(r.loss.ot_loss >= 0.0);
    CHECK(r.loss.num_hard_groups == r.loss.groups.size());
    if (r.loss.num_hard_groups == 0) CHECK(r.loss.ot_loss == 0.0);
  }
}

TEST_CASE("otface loss gradient matches finite differences") {
  const auto bcfg = toy_backbone();
  LossConfig cfg;
  cfg.hinge_margin = 1.0;  // keeps the hinge open so the OT path carries gradient
  cfg.sinkhorn.epsilon = 0.1;
  cfg.sinkhorn.unroll_iters = 20;
  const std::vector<std::size_t> idx{0, 1, 2, 3};

  // First seed whose batch yields hard groups.
  backbone::Parameters params;
  trainer::Dataset data;
  trainer::BatchResult base;
  for (std::uint64_t seed = 0;; ++seed) {
    REQUIRE(seed < 100);
    params = backbone::init_parameters(bcfg, 2, seed);
    data = toy_batch(seed, {0, 0, 1, 1});
    base = trainer::compute_batch(params, data, idx, bcfg, cfg);
    if (base.loss.num_hard_groups > 0 && base.loss.ot_loss > 0.0) break;
  }

  std::mt19937_64 rng(99);
  const double h = 1e-4;
  int checked = 0;
  double worst = 0.0;
  while (checked < 30) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, params[k].size() - 1)(rng);
    auto at = [&](double delta) {
      auto p = params;
      p[k][i] += delta;
      return trainer::compute_batch(p, data, idx, bcfg, cfg).loss;
    };
    const auto up = at(h), down = at(-h);
    // The mined set is piecewise constant; a step that changes it is not a
    // derivative of the smooth piece.
    if (up.groups != base.loss.groups || down.groups != base.loss.groups) continue;
    const double fd = (up.total - down.total) / (2 * h);
    worst = std::max(worst, oracle::rel_err(base.grads[k][i], fd));
    ++checked;
  }
  INFO("worst relative error " << worst);
  CHECK(worst < 1e-3);
}

}  // TEST_SUITE

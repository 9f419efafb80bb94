#include "diwift/selector.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace diwift;

namespace {

SelectorConfig tiny_config() {
  SelectorConfig cfg;
  cfg.embed_dim = 4;
  cfg.heads = 2;
  cfg.gate_hidden = 5;
  return cfg;
}

RowMatrix random_rows(Eigen::Index n, Eigen::Index d, Rng& rng, double zero_prob = 0.0) {
  RowMatrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < d; ++k) x(i, k) = rng.bernoulli(zero_prob) ? 0.0 : rng.uniform();
  return x;
}

}  // namespace

TEST(Embed, ValueScaledRows) {
  auto sel = Selector::init(3, tiny_config(), 1);
  std::vector<double> zero{0, 0, 0}, x{1.0, 0.5, 0.25}, x2{1.0, 1.0, 0.25};
  EXPECT_TRUE(embed(zero, sel).isZero(0.0));
  const RowMatrix m = embed(x, sel);
  EXPECT_EQ(RowMatrix(m.row(0)), RowMatrix(sel.block(0).row(0)));
  EXPECT_LE((embed(x2, sel).row(1) - 2.0 * m.row(1)).norm(), 1e-15);
}

TEST(Attention, SingleRowSoftmaxNormalizationAndShift) {
  Rng rng(2);
  RowMatrix v = random_rows(1, 3, rng);
  EXPECT_LE((attention(v, v, v) - v).norm(), 1e-15);

  const RowMatrix s = random_rows(5, 5, rng) * 4.0;
  const RowMatrix a = softmax_rows(s);
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
  RowMatrix shifted = s;
  for (Eigen::Index i = 0; i < 5; ++i) shifted.row(i).array() += 3.0 * static_cast<double>(i) - 7.0;
  EXPECT_LE((softmax_rows(shifted) - a).norm(), 1e-12);
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(4);
  const RowMatrix m = random_rows(6, 4, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
  perm.indices() << 3, 0, 5, 1, 4, 2;
  const RowMatrix pm = perm * m;
  EXPECT_LE((attention(pm, pm, pm) - perm * attention(m, m, m)).norm(), 1e-12);

  // The same holds for the full multi-head block once embedding rows and
  // feature values are permuted together.
  auto sel = Selector::init(6, tiny_config(), 8);
  auto psel = sel;
  psel.block(psel.embedding_block()) = perm * RowMatrix(sel.block(sel.embedding_block()));
  Eigen::VectorXd x(6);
  for (auto& e : x) e = rng.uniform();
  const Eigen::VectorXd px = perm * x;
  const RowMatrix e = multihead({x.data(), 6}, sel);
  const RowMatrix pe = multihead({px.data(), 6}, psel);
  EXPECT_LE((pe - perm * e).norm(), 1e-12);
}

TEST(Multihead, SingleIdentityHeadReducesToAttention) {
  SelectorConfig cfg = tiny_config();
  cfg.heads = 1;
  auto sel = Selector::init(5, cfg, 3);
  for (std::size_t b : {sel.query_block(0), sel.key_block(0), sel.value_block(0), sel.output_block()})
    sel.block(b).setIdentity();
  std::vector<double> x{0.1, 0.9, 0.0, 0.4, 1.0};
  const RowMatrix m = embed(x, sel);
  EXPECT_LE((multihead(x, sel) - attention(m, m, m, 1.0 / std::sqrt(4.0))).norm(), 1e-14);
}

TEST(Multihead, ShapeAndDeterminism) {
  for (std::size_t heads : {1u, 2u, 4u}) {
    SelectorConfig cfg;
    cfg.embed_dim = 8;
    cfg.heads = heads;
    auto sel = Selector::init(7, cfg, heads);
    std::vector<double> x(7, 0.5);
    const RowMatrix e = multihead(x, sel);
    EXPECT_EQ(e.rows(), 7);
    EXPECT_EQ(e.cols(), 8);
    EXPECT_EQ(e, multihead(x, sel));
  }
  SelectorConfig bad;
  bad.embed_dim = 6;
  bad.heads = 4;
  EXPECT_THROW(Selector(3, bad), ConfigError);
}

TEST(Temperature, Schedule) {
  TempSchedule s{1e-3, 30};
  EXPECT_DOUBLE_EQ(temperature(0, s), 1.0);
  EXPECT_DOUBLE_EQ(temperature(30, s), 1e-3);
  EXPECT_DOUBLE_EQ(temperature(45, s), 1e-3);
  EXPECT_DOUBLE_EQ(temperature(15, s), 1.0 - (1.0 - 1e-3) * 0.5);
  EXPECT_THROW(temperature(1, TempSchedule{0.0, 30}), ConfigError);
}

TEST(SelectProb, ZeroScoreMaskAndTemperature) {
  auto sel = Selector::init(3, tiny_config(), 5);
  sel.block(sel.gate2_block()).setZero();
  std::vector<double> x{0.3, 0.0, 0.9};
  const Vector p = select_prob(x, sel, 1.0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.0);
  EXPECT_DOUBLE_EQ(p[2], 0.5);

  RowMatrix scores(1, 2), xx(1, 2);
  scores << 0.7, 0.7;
  xx << 0.5, 0.0;
  double prev = 0.0;
  for (double tau : {1.0, 0.5, 0.1, 0.01}) {
    const double pk = probs_from_scores(scores, xx, tau)(0, 0);
    EXPECT_GT(pk, prev);
    EXPECT_EQ(probs_from_scores(scores, xx, tau)(0, 1), 0.0);
    prev = pk;
  }
}

TEST(SelectProb, ScoreAndTemperatureScalingCancel) {
  Rng rng(6);
  const RowMatrix scores = random_rows(4, 5, rng).array() - 0.5;
  const RowMatrix x = random_rows(4, 5, rng, 0.3);
  for (double kappa : {0.5, 2.0, 8.0}) {
    // kappa is a power of two so the quotient is exact
    EXPECT_EQ(probs_from_scores(kappa * scores, x, kappa * 0.25), probs_from_scores(scores, x, 0.25));
  }
}

TEST(SelectProb, RangeAndZeroFeatureProperty) {
  auto sel = Selector::init(6, SelectorConfig{}, 9);
  Rng rng(10);
  const RowMatrix x = random_rows(50, 6, rng, 0.4);
  for (double tau : {1.0, 0.1, 1e-3}) {
    const RowMatrix p = select_prob_rows(sel, x, tau);
    EXPECT_GE(p.minCoeff(), 0.0);
    EXPECT_LE(p.maxCoeff(), 1.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index k = 0; k < x.cols(); ++k)
        if (x(i, k) == 0.0) {
          EXPECT_EQ(p(i, k), 0.0);
        }
  }
}

TEST(SelectionLoss, AnnihilationLinearityAndOptimum) {
  Rng rng(12);
  const RowMatrix x = random_rows(6, 4, rng, 0.25);
  const RowMatrix phi = random_rows(6, 4, rng).array() - 0.5;
  const RowMatrix p1 = random_rows(6, 4, rng), p2 = random_rows(6, 4, rng);
  EXPECT_EQ(selection_loss(RowMatrix::Zero(6, 4), p1, x), 0.0);
  EXPECT_NEAR(selection_loss(phi, 0.3 * p1 + 0.7 * p2, x),
              0.3 * selection_loss(phi, p1, x) + 0.7 * selection_loss(phi, p2, x), 1e-14);
  // Minimizing a linear objective over the unit box: p = 1 where phi < 0.
  RowMatrix best(6, 4);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index k = 0; k < 4; ++k) best(i, k) = phi(i, k) < 0.0 ? 1.0 : 0.0;
  const double opt = selection_loss(phi, best, x);
  for (int trial = 0; trial < 200; ++trial) EXPECT_LE(opt, selection_loss(phi, random_rows(6, 4, rng), x) + 1e-15);
}

TEST(SelectorBackward, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Eigen::Index d = 3 + static_cast<Eigen::Index>(seed % 3);
    auto sel = Selector::init(static_cast<std::size_t>(d), tiny_config(), seed);
    const RowMatrix x = random_rows(4, d, rng, 0.2);
    const RowMatrix phi = random_rows(4, d, rng).array() - 0.5;
    const double tau = 0.7;
    auto objective = [&](const Vector& omega) {
      auto s = sel;
      s.flat() = omega;
      return selection_loss(phi, select_prob_rows(s, x, tau), x);
    };
    auto fwd = selector_forward(sel, x, tau);
    RowMatrix dprob = phi / 4.0;
    const Vector g = selector_backward(sel, x, fwd, dprob);
    const Vector fd = oracle::central_gradient(objective, sel.flat(), 1e-6);
    EXPECT_LE(oracle::rel_err(g, fd), 1e-4) << "seed " << seed;
  }
}

namespace {

// Syn3-like rows with a planted influence: negative exactly on the relevant
// features. Rows near the switch boundary are dropped so the target is
// learnable by a smooth gate.
struct Planted {
  RowMatrix x;
  RowMatrix phi;
  MaskMatrix relevance;
};

Planted planted(std::size_t n, std::uint64_t seed) {
  auto ds = gen_syn(SynKind::syn3, n, seed);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.rows(); ++i)
    if (std::abs((*ds.raw)(static_cast<Eigen::Index>(i), 10)) > 0.25) keep.push_back(i);
  auto s = subset(ds, keep);
  Planted p{s.x, RowMatrix(s.x.rows(), s.x.cols()), *s.relevance};
  for (Eigen::Index i = 0; i < p.x.rows(); ++i)
    for (Eigen::Index k = 0; k < p.x.cols(); ++k) p.phi(i, k) = p.relevance(i, k) ? -1.0 : 1.0;
  return p;
}

SelectorConfig planted_config() {
  SelectorConfig cfg;
  cfg.schedule.t_max = 30;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 64;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(TrainSelector, FixedInfluenceFullBatchLossNonIncreasing) {
  auto pl = planted(400, 3);
  InfluenceProvider fixed = [&](const Selector&, double, std::size_t, std::size_t*) { return pl.phi; };
  auto cfg = planted_config();
  cfg.batch_size = static_cast<std::size_t>(pl.x.rows());
  cfg.learning_rate = 1e-3;
  auto res = train_selector_with(pl.x, fixed, cfg);
  ASSERT_EQ(res.trace.size(), 30u);
  for (std::size_t t = 1; t < res.trace.size(); ++t)
    EXPECT_LE(res.trace[t].loss, res.trace[t - 1].loss + 1e-6) << "epoch " << t;
}

TEST(TrainSelector, PlantedInfluenceRecoversRelevance) {
  auto pl = planted(800, 3);
  InfluenceProvider fixed = [&](const Selector&, double, std::size_t, std::size_t*) { return pl.phi; };
  auto res = train_selector_with(pl.x, fixed, planted_config());
  const RowMatrix p = select_prob_rows(res.model, pl.x, planted_config().schedule.tau_min);
  std::size_t mismatches = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k)
      if (pl.x(i, k) > 0.0 && (p(i, k) >= 0.5) != static_cast<bool>(pl.relevance(i, k))) ++mismatches;
  EXPECT_EQ(mismatches, 0u);
}

TEST(TrainSelector, DeterministicGivenSeeds) {
  auto pl = planted(200, 4);
  InfluenceProvider fixed = [&](const Selector&, double, std::size_t, std::size_t*) { return pl.phi; };
  auto cfg = planted_config();
  cfg.schedule.t_max = 3;
  auto a = train_selector_with(pl.x, fixed, cfg);
  auto b = train_selector_with(pl.x, fixed, cfg);
  EXPECT_EQ(a.model.flat(), b.model.flat());
}

#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "hies/pruning.hpp"

using namespace hies;

namespace {

ModelConfig toy_config(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.num_heads = 4;
  cfg.d_v = 4;
  cfg.d_k = 4;
  cfg.d_model = 16;
  cfg.vocab_size = 10;
  cfg.max_seq_len = 10;
  cfg.seed = seed;
  return cfg;
}

Example random_example(std::mt19937_64& rng, int len, int vocab) {
  Example ex;
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  for (int i = 0; i < len; ++i) ex.tokens.push_back(tok(rng));
  ex.label = static_cast<int>(rng() % 2);
  return ex;
}

// Exhaustive minimum of the pruned-score sum over all masks with k retained.
double enumerate_min_risk(const std::vector<double>& scores, int k) {
  const int n = static_cast<int>(scores.size());
  double best = std::numeric_limits<double>::infinity();
  for (int bits = 0; bits < (1 << n); ++bits) {
    if (__builtin_popcount(static_cast<unsigned>(bits)) != k) continue;
    double r = 0.0;
    for (int i = 0; i < n; ++i)
      if (!(bits & (1 << i))) r += scores[i];
    best = std::min(best, r);
  }
  return best;
}

ScoreTable table_from_columns(const std::vector<double>& his, const std::vector<double>& ae,
                              int layers, int heads) {
  return score_table_from_raw(his, ae, layers, heads, 0.5, NormScope::global, 1);
}

}  // namespace

TEST(Pruning, TopkOrderForced) {
  const PruneMask m = select_topk({0.9, 0.1, 0.5, 0.4}, 1, 4, 2);
  EXPECT_TRUE(m.retained({0, 0}));
  EXPECT_FALSE(m.retained({0, 1}));
  EXPECT_TRUE(m.retained({0, 2}));
  EXPECT_FALSE(m.retained({0, 3}));
  EXPECT_EQ(m.k, 2);
  EXPECT_DOUBLE_EQ(m.rho, 0.5);
}

TEST(Pruning, FullBudgetRetainsAllRiskZero) {
  const std::vector<double> s = {0.2, 0.7, 0.4};
  const PruneMask m = select_topk(s, 1, 3, 3);
  EXPECT_EQ(m.k, 3);
  EXPECT_DOUBLE_EQ(risk(s, m), 0.0);
}

TEST(Pruning, BudgetOutOfRangeThrows) {
  EXPECT_THROW(select_topk({0.1, 0.2}, 1, 2, 3), ConfigError);
  EXPECT_THROW(select_topk({0.1, 0.2}, 1, 2, -1), ConfigError);
}

TEST(Pruning, TiesBrokenByLowerIndexFirst) {
  const PruneMask m = select_topk({0.5, 0.5, 0.5, 0.2}, 1, 4, 2);
  EXPECT_TRUE(m.retained({0, 0}));
  EXPECT_TRUE(m.retained({0, 1}));
  EXPECT_FALSE(m.retained({0, 2}));
}

TEST(Pruning, MatchesExhaustiveEnumeration) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 9);  // 4..12
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (auto& s : scores) s = u(rng);
    for (int k = 0; k <= n; ++k) {
      const PruneMask m = select_topk(scores, 1, n, k);
      EXPECT_EQ(risk(scores, m), enumerate_min_risk(scores, k));
    }
  }
}

TEST(Pruning, RiskTrivialCases) {
  const std::vector<double> s = {0.2, 0.3};
  PruneMask none = select_topk(s, 1, 2, 2);
  EXPECT_DOUBLE_EQ(risk(s, none), 0.0);
  PruneMask all = select_topk(s, 1, 2, 0);
  EXPECT_DOUBLE_EQ(risk(s, all), 0.5);
  PruneMask one = select_topk(s, 1, 2, 1);  // retains head 1 (0.3)
  EXPECT_DOUBLE_EQ(risk(s, one), 0.2);
}

TEST(Pruning, RiskHeadSetMismatchThrows) {
  const PruneMask m = select_topk({0.1, 0.2}, 1, 2, 1);
  EXPECT_THROW(risk({0.1, 0.2, 0.3}, m), InputError);
}

TEST(Pruning, RiskNonIncreasingInBudget) {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> scores(8);
  for (auto& s : scores) s = u(rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 8; ++k) {
    const double r = risk(scores, select_topk(scores, 2, 4, k));
    EXPECT_LE(r, prev);
    prev = r;
  }
}

TEST(Pruning, PermutationEquivariance) {
  std::mt19937_64 rng(35);
  std::vector<double> scores = {0.11, 0.72, 0.35, 0.58, 0.91, 0.04};
  const PruneMask base = select_topk(scores, 1, 6, 3);
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> permuted(6);
  for (int i = 0; i < 6; ++i) permuted[perm[i]] = scores[i];
  const PruneMask moved = select_topk(permuted, 1, 6, 3);
  for (int i = 0; i < 6; ++i)
    EXPECT_EQ(base.retained({0, i}), moved.retained({0, perm[i]}));
}

TEST(Pruning, KFromRatioRoundsHalfToEven) {
  EXPECT_EQ(k_from_ratio(16, 0.3), 11);  // 11.2 -> 11
  EXPECT_EQ(k_from_ratio(5, 0.5), 2);    // 2.5 -> 2
  EXPECT_EQ(k_from_ratio(7, 0.5), 4);    // 3.5 -> 4
  EXPECT_EQ(k_from_ratio(8, 0.0), 8);
  EXPECT_EQ(k_from_ratio(8, 1.0), 0);
  EXPECT_THROW(k_from_ratio(8, 1.5), ConfigError);
}

TEST(Pruning, RandomBaselineSeededDeterminism) {
  GatedTransformer model(toy_config(1));
  const PruneMask a = baseline_mask(Criterion::random, &model, nullptr, 2, 42);
  const PruneMask b = baseline_mask(Criterion::random, &model, nullptr, 2, 42);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.k, 2);
}

TEST(Pruning, L2PrunesZeroParameterHead) {
  GatedTransformer model(toy_config(2));
  auto& blk = model.block(0);
  const int d_v = model.config().d_v;
  for (auto& v : blk.wq[1].flat()) v = 0.0;
  for (auto& v : blk.wk[1].flat()) v = 0.0;
  for (auto& v : blk.wv[1].flat()) v = 0.0;
  for (int r = d_v; r < 2 * d_v; ++r)
    for (int c = 0; c < blk.wo.cols(); ++c) blk.wo.at(r, c) = 0.0;
  const PruneMask m = baseline_mask(Criterion::l2, &model, nullptr, 3, 0);
  EXPECT_FALSE(m.retained({0, 1}));
}

TEST(Pruning, HisBaselineEqualsTopkOnHisColumn) {
  const ScoreTable t = table_from_columns({0.4, 0.1, 0.9, 0.6}, {0.2, 0.8, 0.5, 0.3}, 1, 4);
  const PruneMask a = baseline_mask(Criterion::his, nullptr, &t, 2, 0);
  const PruneMask b = select_topk(t.column("his"), 1, 4, 2);
  EXPECT_EQ(a, b);
}

TEST(Pruning, AdBaselinePrunesLowEntropyFirst) {
  const ScoreTable t = table_from_columns({0.5, 0.5, 0.5, 0.5}, {0.9, 0.05, 0.6, 0.3}, 1, 4);
  const PruneMask m = baseline_mask(Criterion::ad, nullptr, &t, 3, 0);
  EXPECT_FALSE(m.retained({0, 1}));  // lowest AE goes first
  EXPECT_TRUE(m.retained({0, 0}));
}

TEST(Pruning, UnknownCriterionNameThrows) {
  EXPECT_THROW(criterion_from_name("taylor"), ConfigError);
}

TEST(Pruning, ApplyMaskIdentityIsBitExact) {
  GatedTransformer model(toy_config(3));
  std::mt19937_64 rng(4);
  const Example ex = random_example(rng, 5, 10);
  const PruneMask all = select_topk({1, 2, 3, 4}, 1, 4, 4);
  const PrunedView view = apply_mask(model, all);
  EXPECT_EQ(view.loss(ex), model.loss_only(ex, GateVector::ones(model.config())));
}

TEST(Pruning, ApplyMaskMatchesGateForward) {
  GatedTransformer model(toy_config(5));
  std::mt19937_64 rng(6);
  const PruneMask m = select_topk({0.9, 0.1, 0.5, 0.4}, 1, 4, 2);
  const PrunedView view = apply_mask(model, m);
  for (int trial = 0; trial < 5; ++trial) {
    const Example ex = random_example(rng, 6, 10);
    EXPECT_EQ(view.loss(ex), model.loss_only(ex, m.to_gates()));
  }
}

TEST(Pruning, MaskCompositionIsGateAlgebra) {
  GatedTransformer model(toy_config(7));
  std::mt19937_64 rng(8);
  const PruneMask a = select_topk({0.9, 0.1, 0.5, 0.4}, 1, 4, 3);
  const PruneMask b = select_topk({0.1, 0.9, 0.4, 0.5}, 1, 4, 3);
  PruneMask both = a;
  both.k = 0;
  for (std::size_t i = 0; i < both.retain.size(); ++i) {
    both.retain[i] = a.retain[i] & b.retain[i];
    both.k += both.retain[i];
  }
  both.rho = static_cast<double>(both.total_heads() - both.k) / both.total_heads();
  GateVector composed = GateVector::ones(model.config());
  for (int h = 0; h < 4; ++h)
    composed.set({0, h}, a.retained({0, h}) * b.retained({0, h}) ? 1.0 : 0.0);
  const Example ex = random_example(rng, 5, 10);
  EXPECT_EQ(model.loss_only(ex, both.to_gates()), model.loss_only(ex, composed));
}

TEST(Pruning, MaskJsonRoundTrip) {
  const PruneMask m = select_topk({0.9, 0.1, 0.5, 0.4, 0.3, 0.8}, 2, 3, 4);
  const PruneMask back = mask_from_json(mask_to_json(m));
  EXPECT_EQ(m, back);
}

TEST(Pruning, MaskJsonRejectsCorruptK) {
  nlohmann::json j = mask_to_json(select_topk({0.9, 0.1}, 1, 2, 1));
  j["k"] = 2;
  EXPECT_THROW(mask_from_json(j), IoError);
}

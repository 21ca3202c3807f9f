#include <gtest/gtest.h>

#include "raffm/scaling.hpp"
#include "support.hpp"

using namespace raffm;
using namespace raffm::testing;

namespace {

std::vector<double> values(const SalienceScores& s) { return {s.values().begin(), s.values().end()}; }
std::vector<std::size_t> order(const Permutation& p) { return {p.indices().begin(), p.indices().end()}; }

ModelConfig count_config() {
  return ModelConfig{.n_layers = 1, .d_model = 8, .n_heads = 2, .d_k = 4, .d_v = 4,
                     .d_ff = 16, .vocab_size = 11, .n_classes = 3, .max_seq = 8};
}

}  // namespace

TEST(Salience, ColumnL1) {
  EXPECT_EQ(values(salience_l1(Tensor2::from_rows({{1, -2}, {3, 0}}))), (std::vector<double>{4, 2}));
  EXPECT_EQ(values(salience_l1(Tensor2(3, 2))), (std::vector<double>{0, 0}));
  EXPECT_EQ(values(salience_l1(Tensor2::from_rows({{-0.5}}))), (std::vector<double>{0.5}));
  EXPECT_EQ(values(salience_l1(Tensor2::from_rows({{1, -2}, {3, 0}}), ChannelAxis::rows)),
            (std::vector<double>{3, 3}));
}

TEST(Salience, RankChannels) {
  EXPECT_EQ(order(rank_channels(SalienceScores({2, 9, 5}))), (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(order(rank_channels(SalienceScores({3, 3}))), (std::vector<std::size_t>{0, 1}));
  EXPECT_TRUE(rank_channels(SalienceScores({5, 4, 3})).is_identity());
  EXPECT_THROW(SalienceScores({-1.0}), ValidationError);
}

TEST(Salience, JointQueryKey) {
  const auto wq = Tensor2::from_rows({{4, 2}});
  const auto wk = Tensor2::from_rows({{0, -6}});
  EXPECT_EQ(values(joint_qk_salience(wq, wk)), (std::vector<double>{2, 4}));
  EXPECT_EQ(values(joint_qk_salience(wq, wq)), values(salience_l1(wq)));
  EXPECT_EQ(values(joint_qk_salience(wq, Tensor2(1, 2))), (std::vector<double>{2, 1}));
  EXPECT_THROW(joint_qk_salience(wq, Tensor2(1, 3)), ShapeError);
}

TEST(QkInvariance, ConsistentPermutationKeepsScores) {
  RngStream rng(17, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_tensor(5, 16, rng);
    const auto wq = random_tensor(16, 8, rng);
    const auto wk = random_tensor(16, 8, rng);
    const auto p = random_permutation(8, rng);
    EXPECT_LE(verify_qk_invariance(wq, wk, x, p), 1e-12);
  }
}

TEST(QkInvariance, IdentityIsExact) {
  RngStream rng(18, 0);
  const auto x = random_tensor(5, 16, rng);
  EXPECT_EQ(verify_qk_invariance(random_tensor(16, 8, rng), random_tensor(16, 8, rng), x,
                            Permutation::identity(8)),
            0.0);
}

TEST(QkInvariance, QueryOnlyPermutationChangesScores) {
  RngStream rng(19, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor(5, 16, rng);
    auto p = random_permutation(8, rng);
    while (p.is_identity()) p = random_permutation(8, rng);
    EXPECT_GT(verify_qk_invariance(random_tensor(16, 8, rng), random_tensor(16, 8, rng), x, p,
                              PermuteTarget::query_only),
              1e-3);
  }
}

TEST(Prioritize, FlagsOffIsIdentity) {
  RngStream rng(1, 0);
  const auto w = init_weights(count_config(), rng);
  const auto pm = prioritize_model(w, {false, false, false});
  EXPECT_EQ(pm.weights, w);
  for (const auto& l : pm.record.layers) {
    EXPECT_TRUE(l.ffn.is_identity());
    for (const auto& p : l.qk) EXPECT_TRUE(p.is_identity());
    for (const auto& p : l.vo) EXPECT_TRUE(p.is_identity());
  }
}

TEST(Prioritize, PreservesLogits) {
  RngStream rng(2, 0);
  const auto cfg = count_config();
  const auto w = random_weights(cfg, rng);
  const auto pw = prioritize_model(w, {}).weights;
  for (int i = 0; i < 16; ++i) {
    const Batch b = random_batch(cfg, 3, rng);
    EXPECT_LE(max_scaled_diff(forward(w, b).logits, forward(pw, b).logits), 1e-9);
  }
}

TEST(Prioritize, SalienceNonIncreasingAfterwards) {
  RngStream rng(3, 0);
  const auto cfg = count_config();
  const auto pw = prioritize_model(random_weights(cfg, rng), {}).weights;
  auto non_increasing = [](const SalienceScores& s) {
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] > s[i - 1]) return false;
    return true;
  };
  for (const auto& layer : pw.layers) {
    for (const auto& h : layer.heads) {
      EXPECT_TRUE(non_increasing(joint_qk_salience(h.wq, h.wk)));
      EXPECT_TRUE(non_increasing(salience_l1(h.wv)));
    }
    EXPECT_TRUE(non_increasing(salience_l1(layer.w1)));
  }
}

TEST(Prioritize, FfnExampleKeepsTopColumns) {
  ModelConfig cfg{.n_layers = 1, .d_model = 2, .n_heads = 1, .d_k = 1, .d_v = 1,
                  .d_ff = 3, .vocab_size = 2, .n_classes = 2, .max_seq = 2};
  ModelWeights w = zero_weights(cfg);
  // column saliences 5, 1, 3
  w.layers[0].w1 = Tensor2::from_rows({{2, 1, -1}, {-3, 0, 2}});
  w.layers[0].w2 = Tensor2::from_rows({{10, 11}, {20, 21}, {30, 31}});
  auto spec = SubmodelSpec::full(cfg);
  spec.layers[0].ffn_width = 2;
  const auto sub = extract_submodel(prioritize_model(w, {}).weights, spec);
  EXPECT_EQ(sub.layers[0].w1, Tensor2::from_rows({{2, -1}, {-3, 2}}));
  EXPECT_EQ(sub.layers[0].w2, Tensor2::from_rows({{10, 11}, {30, 31}}));
}

TEST(ParamCount, FullMatchesWeights) {
  const auto cfg = count_config();
  EXPECT_EQ(param_count(SubmodelSpec::full(cfg), cfg), total_params(zero_weights(cfg)));
}

TEST(ParamCount, HalvedFfnDelta) {
  ModelConfig cfg = count_config();
  cfg.n_layers = 3;
  auto spec = SubmodelSpec::full(cfg);
  for (auto& l : spec.layers) l.ffn_width = cfg.d_ff / 2;
  EXPECT_EQ(param_count(SubmodelSpec::full(cfg), cfg) - param_count(spec, cfg),
            3 * (cfg.d_ff / 2) * (2 * cfg.d_model + 1));
}

TEST(ParamCount, CountByConstruction) {
  const auto cfg = count_config();
  auto spec = SubmodelSpec::full(cfg);
  spec.layers[0].ffn_width = 8;
  for (auto& h : spec.layers[0].heads) h = {2, 4};
  const auto sub = extract_submodel(zero_weights(cfg), spec);
  EXPECT_EQ(param_count(spec, cfg), total_params(sub));
  // embeddings 152, norms 32, heads 2*(18*2+36), wo/bo 72, ffn 72+64+8, classifier 27
  EXPECT_EQ(param_count(spec, cfg), 152u + 32 + 144 + 72 + 144 + 27);
}

TEST(ParamCount, RejectsOutOfRangeSpec) {
  const auto cfg = count_config();
  auto spec = SubmodelSpec::full(cfg);
  spec.layers[0].ffn_width = 17;
  EXPECT_THROW(param_count(spec, cfg), ShapeError);
  spec.layers[0].ffn_width = 0;
  EXPECT_THROW(param_count(spec, cfg), ShapeError);
  spec.layers.pop_back();
  EXPECT_THROW(param_count(spec, cfg), ShapeError);
}

TEST(SpecSampling, FullBudgetSingleRatio) {
  const auto cfg = count_config();
  const ResourceBudget full{param_count(SubmodelSpec::full(cfg), cfg)};
  RngStream rng(1, 0);
  EXPECT_EQ(sample_submodel_spec(cfg, full, {1.0}, rng), SubmodelSpec::full(cfg));
}

TEST(SpecSampling, SingleHalfRatio) {
  ModelConfig cfg = count_config();
  cfg.d_k = 5;
  cfg.d_ff = 7;
  RngStream rng(2, 0);
  const auto s = sample_submodel_spec(cfg, {1u << 30}, {0.5}, rng);
  EXPECT_EQ(s.layers[0].ffn_width, 4u);
  for (const auto& h : s.layers[0].heads) {
    EXPECT_EQ(h.qk_width, 3u);
    EXPECT_EQ(h.v_width, 2u);
  }
}

TEST(SpecSampling, AlwaysWithinBudget) {
  const auto cfg = count_config();
  const std::size_t full = param_count(SubmodelSpec::full(cfg), cfg);
  const ResourceBudget budget{static_cast<std::size_t>(0.6 * full)};
  RngStream rng(3, 0);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_LE(param_count(sample_submodel_spec(cfg, budget, {0.25, 0.5, 0.75, 1.0}, rng), cfg),
              budget.max_params);
  }
}

TEST(SpecSampling, InfeasibleBudgetIsConfigError) {
  const auto cfg = count_config();
  RngStream rng(4, 0);
  EXPECT_THROW(sample_submodel_spec(cfg, {10}, {0.5, 1.0}, rng), ConfigError);
  EXPECT_THROW(sample_submodel_spec(cfg, {1u << 30}, {0.0}, rng), ConfigError);
  EXPECT_THROW(sample_submodel_spec(cfg, {1u << 30}, {}, rng), ConfigError);
}

TEST(SpecSampling, TightBudgetFallsBackToMinimum) {
  const auto cfg = count_config();
  const auto min = minimum_spec(cfg, {0.25, 1.0});
  RngStream rng(5, 0);
  EXPECT_EQ(sample_submodel_spec(cfg, {param_count(min, cfg)}, {0.25, 1.0}, rng), min);
}

TEST(Extract, FullSpecIsValueEqual) {
  RngStream rng(6, 0);
  const auto w = random_weights(count_config(), rng);
  EXPECT_EQ(extract_submodel(w, SubmodelSpec::of(w)), w);
}

TEST(Extract, LeadingSliceIsMassOptimal) {
  RngStream rng(7, 0);
  for (std::size_t dk : {4u, 6u, 8u}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto wq = random_tensor(16, dk, rng);
      const auto wk = random_tensor(16, dk, rng);
      const auto p = rank_channels(joint_qk_salience(wq, wk));
      const auto mq = column_l1(permute_cols(wq, p));
      const auto mk = column_l1(permute_cols(wk, p));
      std::vector<double> joint(dk);
      for (std::size_t c = 0; c < dk; ++c) joint[c] = (mq[c] + mk[c]) / 2.0;
      const auto raw_q = column_l1(wq);
      const auto raw_k = column_l1(wk);
      std::vector<double> raw(dk);
      for (std::size_t c = 0; c < dk; ++c) raw[c] = (raw_q[c] + raw_k[c]) / 2.0;
      for (std::size_t k = 1; k <= dk; ++k) EXPECT_EQ(leading_mass(joint, k), best_subset_mass(raw, k));
    }
  }
}

TEST(Extract, WiderThanSourceRejected) {
  const auto cfg = count_config();
  auto spec = SubmodelSpec::full(cfg);
  spec.layers[0].ffn_width = 4;
  const auto sub = extract_submodel(zero_weights(cfg), spec);
  EXPECT_THROW(extract_submodel(sub, SubmodelSpec::full(cfg)), ShapeError);
}

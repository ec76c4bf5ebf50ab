// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"

namespace cl = circuitlab;
using cl::Granularity;
using cl::ModuleTag;
using cl::Tensor;

namespace {

void expect_bitwise(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]) << "index " << i;
}

std::vector<double> zero_at(std::size_t n, std::size_t at) {
  std::vector<double> v(n, 1.0);
  v.at(at) = 0.0;
  return v;
}

}  // namespace

TEST(ModelConfig, RejectsBadShapes) {
  cl::ModelConfig c = cl::testing::tiny_model();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), cl::ConfigError);
  c = cl::testing::tiny_model();
  c.vocab_size = 4;
  EXPECT_THROW(c.validate(), cl::ConfigError);
}

TEST(Units, DefaultNeuronCount) {
  const cl::UnitSet us(cl::ModelConfig{}, cl::GranularityPlan{});
  // Per layer: q, k, v, o (32 each), up (128), down (32).
  EXPECT_EQ(us.size(), 576u);
  const cl::UnitSet heads(cl::ModelConfig{}, {Granularity::head, Granularity::neuron});
  EXPECT_EQ(heads.size(), 2u * (4 + 128 + 32));
}

TEST(Units, IndexRoundTrip) {
  const cl::UnitSet us(cl::testing::tiny_model(), {Granularity::head, Granularity::neuron});
  for (std::size_t i = 0; i < us.size(); ++i) EXPECT_EQ(us.index_of(us[i]), i);
  EXPECT_THROW(us.index_of({Granularity::neuron, 0, ModuleTag::attn_q, 0}), cl::LookupError);
}

TEST(Units, PartitionInvariantEveryPlan) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const cl::ModelConfig cfg = cl::testing::random_model(rng);
    const cl::Model m = cl::init_model(cfg, 1);
    for (const auto& plan : cl::testing::all_plans()) {
      const cl::UnitSet us(cfg, plan);
      std::size_t total = 0;
      for (const auto& u : us.units()) total += cl::unit_param_count(u, cfg);
      EXPECT_EQ(total, m.maskable_params()) << plan.str();
      const auto owner = cl::ownership_map(us);
      std::vector<std::size_t> owned(us.size(), 0);
      for (std::size_t p = 0; p < owner.size(); ++p) {
        for (long o : owner[p]) {
          EXPECT_EQ(o >= 0, m.layout[p].maskable) << m.layout[p].name << " " << plan.str();
          if (o >= 0) ++owned[static_cast<std::size_t>(o)];
        }
      }
      for (std::size_t u = 0; u < us.size(); ++u) EXPECT_EQ(owned[u], cl::unit_param_count(us[u], cfg));
    }
  }
}

TEST(Units, InvalidPlansRejected) {
  EXPECT_THROW((cl::GranularityPlan{Granularity::neuron, Granularity::head}.validate()), cl::ConfigError);
  EXPECT_THROW((cl::GranularityPlan{Granularity::layer, Granularity::neuron}.validate()), cl::ConfigError);
}

TEST(Forward, ShapeAndDeterminism) {
  std::mt19937_64 rng(2);
  const cl::ModelConfig cfg = cl::testing::tiny_model();
  const cl::Model m = cl::init_model(cfg, 3);
  const auto tb = cl::testing::random_batch(cfg, 3, rng);
  const Tensor a = cl::forward(m, tb), b = cl::forward(m, tb);
  EXPECT_EQ(a.shape(), (cl::Shape{3, 16, 64}));
  expect_bitwise(a, b);
  EXPECT_EQ(cl::model_digest(m), cl::model_digest(cl::init_model(cfg, 3)));
  EXPECT_NE(cl::model_digest(m), cl::model_digest(cl::init_model(cfg, 4)));
}

TEST(Forward, Causal) {
  std::mt19937_64 rng(9);
  const cl::ModelConfig cfg = cl::testing::tiny_model();
  const cl::Model m = cl::init_model(cfg, 1);
  auto tb = cl::testing::random_batch(cfg, 1, rng);
  const Tensor before = cl::forward(m, tb);
  tb.ids.back() = (tb.ids.back() + 1) % cfg.vocab_size;
  const Tensor after = cl::forward(m, tb);
  const std::size_t v = 64, t = 16;
  for (std::size_t i = 0; i < (t - 1) * v; ++i) ASSERT_EQ(before[i], after[i]);
  bool changed = false;
  for (std::size_t i = (t - 1) * v; i < t * v; ++i) changed |= before[i] != after[i];
  EXPECT_TRUE(changed);
}

TEST(Forward, InputErrors) {
  const cl::ModelConfig cfg = cl::testing::tiny_model();
  const cl::Model m = cl::init_model(cfg, 1);
  EXPECT_THROW(cl::forward(m, cl::TokenBatch{1, 2, {0, 64}}), cl::IndexError);
  EXPECT_THROW(cl::forward(m, cl::TokenBatch{1, 17, std::vector<int>(17, 0)}), cl::DimensionError);
  EXPECT_THROW(cl::forward(m, cl::TokenBatch{2, 2, {0, 1, 2}}), cl::DimensionError);
  const auto other = std::make_shared<const cl::UnitSet>(cl::testing::tiny_model(1), cl::GranularityPlan{});
  const cl::MaskEnv env = cl::all_ones_env(other);
  EXPECT_THROW(cl::forward(m, cl::TokenBatch{1, 2, {0, 1}}, &env), cl::MaskCoverageError);
}

TEST(Forward, AllOnesMaskIsBitwiseIdentityEveryPlan) {
  std::mt19937_64 rng(4);
  for (bool parallel : {true, false}) {
    cl::ModelConfig cfg = cl::testing::tiny_model();
    cfg.parallel_block = parallel;
    const cl::Model m = cl::init_model(cfg, 8);
    const auto tb = cl::testing::random_batch(cfg, 2, rng);
    const Tensor plain = cl::forward(m, tb);
    for (const auto& plan : cl::testing::all_plans()) {
      const auto us = std::make_shared<const cl::UnitSet>(cfg, plan);
      const cl::MaskEnv env = cl::all_ones_env(us);
      SCOPED_TRACE(plan.str());
      expect_bitwise(cl::forward(m, tb, &env), plain);
    }
  }
}

TEST(Forward, HeadMaskMatchesZeroedHeadWeights) {
  std::mt19937_64 rng(6);
  const cl::ModelConfig cfg = cl::testing::tiny_model();
  const cl::Model m = cl::init_model(cfg, 2);
  const auto tb = cl::testing::random_batch(cfg, 2, rng);
  const auto us = std::make_shared<const cl::UnitSet>(cfg, cl::GranularityPlan{Granularity::head, Granularity::neuron});
  const std::size_t u = us->index_of({Granularity::head, 1, ModuleTag::attn_head, 2});
  const cl::MaskEnv env = cl::constant_env(us, zero_at(us->size(), u));
  cl::Model zeroed = m;
  for (double& w : zeroed.param(cl::ParamKind::wo, 1, 2)) w = 0.0;
  const Tensor a = cl::forward(m, tb, &env), b = cl::forward(zeroed, tb);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], 1e-12);
}

TEST(Forward, NeuronMaskMatchesZeroedColumn) {
  std::mt19937_64 rng(7);
  const cl::ModelConfig cfg = cl::testing::tiny_model();
  const cl::Model m = cl::init_model(cfg, 2);
  const auto tb = cl::testing::random_batch(cfg, 2, rng);
  const auto us = std::make_shared<const cl::UnitSet>(cfg, cl::GranularityPlan{});
  for (ModuleTag t : {ModuleTag::attn_q, ModuleTag::attn_v, ModuleTag::attn_o, ModuleTag::mlp_up, ModuleTag::mlp_down}) {
    const cl::UnitId id{Granularity::neuron, 0, t, 5};
    const cl::MaskEnv env = cl::constant_env(us, zero_at(us->size(), us->index_of(id)));
    cl::Model zeroed = m;
    cl::for_each_owned_scalar(id, cfg, [&](std::size_t p, std::size_t off) { zeroed.values[p][off] = 0.0; });
    const Tensor a = cl::forward(m, tb, &env), b = cl::forward(zeroed, tb);
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], 1e-12) << cl::to_string(t);
  }
}

TEST(Forward, ZeroLayerMaskSkipsLayer) {
  std::mt19937_64 rng(8);
  const cl::ModelConfig cfg = cl::testing::tiny_model();
  const cl::Model m = cl::init_model(cfg, 2);
  const auto tb = cl::testing::random_batch(cfg, 1, rng);
  const auto us = std::make_shared<const cl::UnitSet>(cfg, cl::GranularityPlan{Granularity::layer, Granularity::layer});
  const cl::MaskEnv env = cl::constant_env(us, {0.0, 0.0});
  cl::Model zeroed = m;
  for (std::size_t p = 0; p < zeroed.layout.size(); ++p)
    if (zeroed.layout[p].maskable) std::fill(zeroed.values[p].begin(), zeroed.values[p].end(), 0.0);
  const Tensor a = cl::forward(m, tb, &env), b = cl::forward(zeroed, tb);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], 1e-12);
}

TEST(Forward, ParameterGradcheck) {
  // Finite differences through the whole network for a few scalars.
  std::mt19937_64 rng(10);
  cl::ModelConfig cfg = cl::testing::tiny_model(1, 2);
  cfg.d_model = 8;
  cfg.d_mlp = 6;
  cl::Model m = cl::init_model(cfg, 5);
  const auto tb = cl::testing::random_batch(cfg, 1, rng);
  const std::vector<int> targets(16, 3);
  auto loss_of = [&](const cl::BoundParams& p) {
    return cl::cross_entropy(cl::reshape(cl::forward(p, tb), {16, 64}), targets);
  };
  const cl::GradMap g = cl::backward(loss_of(cl::bind_params(m, true)));
  for (std::size_t p = 0; p < m.layout.size(); ++p) {
    const std::size_t k = (p * 7) % m.values[p].size();
    const double x0 = m.values[p][k], h = 1e-5;
    m.values[p][k] = x0 + h;
    const double fp = loss_of(cl::bind_params(m, false)).item();
    m.values[p][k] = x0 - h;
    const double fm = loss_of(cl::bind_params(m, false)).item();
    m.values[p][k] = x0;
    const double num = (fp - fm) / (2 * h), ana = g.at(m.layout[p].name)[k];
    EXPECT_NEAR(ana, num, 1e-7 + 1e-6 * std::abs(num)) << m.layout[p].name;
  }
}

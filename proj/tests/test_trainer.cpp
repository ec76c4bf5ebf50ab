// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "fixtures.hpp"

namespace cl = circuitlab;
using cl::Granularity;

namespace {

struct Bench {
  cl::ModelConfig cfg = cl::testing::tiny_model();
  cl::TaskSpec task;
  cl::LabeledDataset train = cl::gen_clean_dataset(task, 64, 1);
  cl::Model model = cl::init_model(cfg, 2);
  std::shared_ptr<const cl::UnitSet> units = std::make_shared<const cl::UnitSet>(cfg, cl::GranularityPlan{});
};

cl::CircuitSpec first_units(std::shared_ptr<const cl::UnitSet> us, std::size_t k) {
  cl::CircuitSpec c{us, std::vector<std::uint8_t>(us->size(), 0), {}};
  for (std::size_t i = 0; i < k; ++i) c.member[i * 7 % us->size()] = 1;
  return c;
}

}  // namespace

TEST(Adam, StepMatchesClosedForm) {
  // First bias-corrected Adam step moves each coordinate by lr * sign(g).
  std::vector<double> x{1.0, -2.0, 0.5};
  cl::ValueRefs values{{"x", &x}};
  cl::GradMap g;
  g.emplace("x", cl::Tensor::from({3}, {0.3, -0.01, 0.0}));
  cl::AdamState st;
  cl::TrainConfig tc{0.1, 1, 1};
  tc.clip_norm = 0;
  cl::adaptive_step(values, g, st, tc);
  EXPECT_NEAR(x[0], 0.9, 1e-6);
  EXPECT_NEAR(x[1], -1.9, 1e-5);
  EXPECT_EQ(x[2], 0.5);
}

TEST(Adam, GateFreezesScalars) {
  std::vector<double> x{1.0, 1.0};
  cl::ValueRefs values{{"x", &x}};
  cl::GradMap g;
  g.emplace("x", cl::Tensor::from({2}, {1.0, 1.0}));
  cl::TrainableMask gate{{"x", {0, 1}}};
  cl::AdamState st;
  cl::adaptive_step(values, g, st, cl::TrainConfig{0.1, 1, 1}, &gate);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_LT(x[1], 1.0);
}

TEST(Supervised, LossFallsAndRunsAreDeterministic) {
  Bench s;
  cl::Model a = s.model, b = s.model;
  const cl::TrainConfig tc{3e-3, 4, 16, 9};
  const auto rec = cl::train_base(a, s.train, tc);
  cl::train_base(b, s.train, tc);
  ASSERT_EQ(rec.history.size(), 4u);
  EXPECT_LT(rec.history.back().total, rec.history.front().total);
  EXPECT_EQ(rec.stage, "train_base");
  EXPECT_EQ(rec.seed, 9u);
  EXPECT_EQ(cl::model_digest(a), cl::model_digest(b));
  cl::Model c = s.model;
  cl::train_base(c, s.train, cl::TrainConfig{3e-3, 4, 16, 10});
  EXPECT_NE(cl::model_digest(a), cl::model_digest(c));
  EXPECT_THROW(cl::train_base(c, cl::LabeledDataset{}, tc), cl::ContractError);
  EXPECT_THROW(cl::train_base(c, s.train, cl::TrainConfig{0.0, 1, 1}), cl::ConfigError);
}

TEST(Sacirt, OnlyCircuitScalarsMove) {
  Bench s;
  const cl::CircuitSpec circuit = first_units(s.units, 20);
  const cl::TrainableMask gate = cl::circuit_gate(s.model, circuit);
  std::size_t open = 0;
  for (const auto& [_, g] : gate)
    for (auto v : g) open += v;
  std::size_t owned = 0;
  for (std::size_t u = 0; u < s.units->size(); ++u)
    if (circuit.member[u]) owned += cl::unit_param_count((*s.units)[u], s.cfg);
  EXPECT_EQ(open, owned);

  cl::Model m = s.model;
  const std::string frozen_before = cl::frozen_digest(m, gate);
  const auto rec = cl::sacirt(m, circuit, s.train, cl::TrainConfig{1e-2, 2, 16, 3});
  EXPECT_EQ(cl::frozen_digest(m, gate), frozen_before);
  EXPECT_NE(cl::model_digest(m), cl::model_digest(s.model));
  EXPECT_DOUBLE_EQ(rec.summary.at("tunable_fraction"), static_cast<double>(owned) / static_cast<double>(m.total_params()));
  for (std::size_t p = 0; p < m.values.size(); ++p) {
    const auto& g = gate.at(m.layout[p].name);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (!g[k]) ASSERT_EQ(m.values[p][k], s.model.values[p][k]) << m.layout[p].name;
  }
}

TEST(Sacirt, RejectsEmptyOrForeignCircuits) {
  Bench s;
  cl::Model m = s.model;
  EXPECT_THROW(cl::sacirt(m, first_units(s.units, 0), s.train, {}), cl::ContractError);
  const auto other = std::make_shared<const cl::UnitSet>(cl::testing::tiny_model(1), cl::GranularityPlan{});
  EXPECT_THROW(cl::sacirt(m, first_units(other, 3), s.train, {}), cl::MaskCoverageError);
}

TEST(MaskSearch, SingleModeRunsAndIsDeterministic) {
  Bench s;
  const auto ds = cl::head(s.train, 12);
  const cl::TrainConfig tc{1e-2, 3, 6, 4};
  const auto a = cl::optimize_masks_single(s.model, s.units, ds, {}, tc);
  const auto b = cl::optimize_masks_single(s.model, s.units, ds, {}, tc);
  EXPECT_EQ(a.state.z, b.state.z);
  EXPECT_EQ(a.record.history.size(), 3u);
  EXPECT_EQ(a.record.stage, "find_circuit_single");
  // The l1 term pulls every logit down from its initial value.
  double mean = 0;
  for (double z : a.state.z) mean += z;
  EXPECT_LT(mean / static_cast<double>(a.state.z.size()), 0.2);
  EXPECT_GE(a.record.summary.at("density_units"), 0.0);
}

TEST(MaskSearch, DualModeRunsAndIsDeterministic) {
  Bench s;
  const auto clean = cl::head(s.train, 12);
  const auto trig = cl::triggered_copy(clean, s.task, {}, 5);
  const cl::DualData data = cl::prepare_dual_backdoor(s.model, clean, trig);
  cl::LossWeights w;
  w.reduction = cl::SparsityReduction::mean;
  const cl::TrainConfig tc{1e-2, 2, 6, 4};
  const auto a = cl::optimize_masks_dual(s.model, s.units, data, w, tc, 0.2, 0.5, 0.2, 0.5);
  const auto b = cl::optimize_masks_dual(s.model, s.units, data, w, tc, 0.2, 0.5, 0.2, 0.5);
  EXPECT_EQ(a.clean.z, b.clean.z);
  EXPECT_EQ(a.circuit.z, b.circuit.z);
  EXPECT_EQ(a.clean.tag, "clean");
  EXPECT_EQ(a.circuit.tag, "circuit");
  for (const char* k : {"clean_density_units", "circuit_density_units", "circuit_density_params", "overlap_density"})
    EXPECT_TRUE(a.record.summary.count(k)) << k;
  const auto c = cl::optimize_masks_dual(s.model, s.units, data, w, tc, 0.2, 0.5, 0.2, 0.0);
  EXPECT_NE(a.circuit.z, c.circuit.z);
  EXPECT_THROW(cl::optimize_masks_dual(s.model, s.units, data, w, tc, 0.2, 0.5, 0.2, -1.0), cl::ConfigError);
}

TEST(MaskSearch, DualDataContracts) {
  Bench s;
  const auto clean = cl::head(s.train, 4);
  EXPECT_THROW(cl::prepare_dual_backdoor(s.model, clean, cl::head(clean, 3)), cl::ContractError);
  EXPECT_THROW(cl::prepare_dual_alignment(s.model, nullptr, clean, clean), cl::ConfigError);
  const cl::Model other = cl::init_model(cl::testing::tiny_model(1), 1);
  EXPECT_THROW(cl::prepare_dual_alignment(s.model, &other, clean, clean), cl::ConfigError);
  const auto d = cl::prepare_dual_alignment(s.model, &s.model, clean, cl::head(clean, 2));
  EXPECT_EQ(d.clean.size(), 2u);
  EXPECT_EQ(d.scenario, cl::Scenario::alignment);
}

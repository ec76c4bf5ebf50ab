// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "properties.hpp"

namespace cl = circuitlab;
using cl::MaskMode;
using cl::Tensor;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Fixture {
  cl::ModelConfig cfg = cl::testing::tiny_model();
  cl::Model model = cl::init_model(cfg, 3);
  std::shared_ptr<const cl::UnitSet> units = std::make_shared<const cl::UnitSet>(cfg, cl::GranularityPlan{});
  cl::TaskSpec task;
  cl::LabeledDataset clean = cl::gen_clean_dataset(task, 6, 1);
  cl::LabeledDataset trig = cl::triggered_copy(clean, task, cl::TriggerSpec{}, 2);

  cl::DualBatch dual() const {
    cl::DualBatch b;
    b.clean = cl::make_batch(clean);
    b.triggered = cl::make_batch(trig);
    const cl::BoundParams p = cl::bind_params(model, false);
    b.ref_clean = cl::answer_logits(p, b.clean);
    b.ref_triggered = cl::answer_logits(p, b.clean);
    return b;
  }
};

}  // namespace

TEST(Weights, DefaultsAndValidation) {
  const cl::LossWeights w;
  EXPECT_EQ(w.lambda, 1.0);
  EXPECT_EQ(w.sp_alpha, 1.0);
  EXPECT_EQ(w.sp_beta, 0.5);
  EXPECT_EQ(w.sp_gamma, 5.0);
  EXPECT_DOUBLE_EQ(w.margin(64), 2.0 * std::log(64.0));
  cl::LossWeights bad;
  bad.sp_gamma = -1;
  EXPECT_THROW(bad.validate(), cl::ConfigError);
  bad = {};
  bad.circuit_mult.head = NAN;
  EXPECT_THROW(bad.validate(), cl::ConfigError);
  EXPECT_EQ(cl::parse_sparsity_reduction("mean"), cl::SparsityReduction::mean);
  EXPECT_THROW(cl::parse_sparsity_reduction("max"), cl::ConfigError);
}

TEST(Faithfulness, FullMaskHasZeroKlAndL1IsMaskMass) {
  Fixture f;
  const cl::BoundParams p = cl::bind_params(f.model, false);
  const cl::SupervisedBatch b = cl::make_batch(f.clean);
  const Tensor ref = cl::answer_logits(p, b);
  cl::MaskState s = cl::init_masks(f.units);
  cl::LossWeights w;
  w.lambda = 0.25;
  const auto lb = cl::faithfulness_l1_loss(p, s, b, ref, w);
  EXPECT_EQ(lb.value("faithfulness_kl"), 0.0);
  const double n = static_cast<double>(f.units->size());
  EXPECT_NEAR(lb.value("l1"), n * sig(0.2), 1e-9);
  EXPECT_NEAR(lb.total, 0.25 * n * sig(0.2), 1e-9);
  w.reduction = cl::SparsityReduction::mean;
  EXPECT_NEAR(cl::faithfulness_l1_loss(p, s, b, ref, w).value("l1"), sig(0.2), 1e-12);
  const auto g = cl::backward(lb.graph);
  EXPECT_NEAR(g.at("mask.z")[0], 0.25 * sig(0.2) * (1 - sig(0.2)), 1e-9);
}

TEST(DualLoss, SparsityTermsClosedForm) {
  Fixture f;
  std::mt19937_64 rng(4);
  cl::MaskState clean = cl::testing::random_mask(f.units, rng);
  cl::MaskState circ = cl::testing::random_mask(f.units, rng);
  circ.tag = "circuit";
  cl::LossWeights w;
  w.circuit_mult.neuron = 3.0;
  const auto ce = cl::mask_values(clean, MaskMode::ste_train), be = cl::mask_values(circ, MaskMode::ste_train);
  for (auto r : {cl::SparsityReduction::sum, cl::SparsityReduction::mean}) {
    w.reduction = r;
    const auto sp = cl::dmo_sparsity_loss(ce, be, w);
    double ov = 0, dense = 0, sparse = 0;
    for (std::size_t i = 0; i < clean.z.size(); ++i) {
      ov += sig(clean.z[i]) * sig(circ.z[i]);
      dense += 1.0 - sig(clean.z[i]);
      sparse += 3.0 * sig(circ.z[i]);
    }
    const double k = r == cl::SparsityReduction::mean ? 1.0 / static_cast<double>(clean.z.size()) : 1.0;
    EXPECT_NEAR(sp.value("sp_overlap"), k * ov, 1e-9);
    EXPECT_NEAR(sp.value("sp_dense"), k * dense, 1e-9);
    EXPECT_NEAR(sp.value("sp_sparse"), k * sparse, 1e-9);
    EXPECT_NEAR(sp.total, k * (ov + 0.5 * dense + 5.0 * sparse), 1e-9);
    const auto g = cl::backward(sp.graph);
    const double s0 = sig(clean.z[0]), b0 = sig(circ.z[0]);
    EXPECT_NEAR(g.at("mask.z")[0], k * (b0 - 0.5) * s0 * (1 - s0), 1e-12);
    EXPECT_NEAR(g.at("circuit.z")[0], k * (s0 + 5.0 * 3.0) * b0 * (1 - b0), 1e-12);
  }
}

TEST(DualLoss, HingeAndTargetTerms) {
  Fixture f;
  const cl::BoundParams p = cl::bind_params(f.model, false);
  const cl::DualBatch b = f.dual();
  const cl::MaskEnv full = cl::all_ones_env(f.units);
  cl::LossWeights w;
  w.tau_m = 0.0;
  auto bc = cl::backdoor_circuit_loss(p, full, b, w);
  EXPECT_EQ(bc.value("bc_repel"), 0.0);  // relu(0 - KL) with KL >= 0
  EXPECT_NEAR(bc.value("bc_target"),
              cl::cross_entropy(cl::answer_logits(p, b.triggered), b.triggered.targets).item(), 1e-12);
  w.tau_m = 2.0;
  bc = cl::backdoor_circuit_loss(p, full, b, w);
  EXPECT_NEAR(bc.value("bc_repel"), 2.0, 1e-12);  // circuit == reference on clean rows
  w.supervise_circuit = false;
  EXPECT_EQ(cl::backdoor_circuit_loss(p, full, b, w).total, 0.0);

  const auto cs = cl::clean_subgraph_loss(p, full, b, w);
  EXPECT_EQ(cs.value("cs_clean"), 0.0);
  EXPECT_GT(cs.value("cs_trigger"), 0.0);
}

TEST(DualLoss, TotalIsWeightedSum) {
  Fixture f;
  std::mt19937_64 rng(9);
  const cl::BoundParams p = cl::bind_params(f.model, false);
  const cl::DualBatch b = f.dual();
  cl::MaskState clean = cl::testing::random_mask(f.units, rng), circ = cl::testing::random_mask(f.units, rng);
  circ.tag = "circuit";
  cl::LossWeights w;
  w.lambda = 0.3;
  w.cs_beta = 2.0;
  const auto ce = cl::mask_values(clean, MaskMode::ste_train), be = cl::mask_values(circ, MaskMode::ste_train);
  const auto cs = cl::clean_subgraph_loss(p, ce, b, w);
  const auto bc = cl::backdoor_circuit_loss(p, be, b, w);
  const auto sp = cl::dmo_sparsity_loss(ce, be, w);
  const auto total = cl::dmo_total(cs, bc, sp, w);
  EXPECT_NEAR(total.total, cs.total + bc.total + 0.3 * sp.total, 1e-9);
  EXPECT_NEAR(total.graph.item(), total.total, 1e-9);
  EXPECT_EQ(total.terms.size(), 7u);
  EXPECT_THROW(total.value("nope"), cl::LookupError);

  // Reference rows must align with their batches.
  cl::DualBatch bad = b;
  bad.ref_clean = cl::slice(b.ref_clean, 0, 64);
  bad.ref_clean = cl::reshape(bad.ref_clean, {1, 64});
  EXPECT_THROW(cl::clean_subgraph_loss(p, ce, bad, w), cl::ContractError);
}

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// Property checks shared by the unit suites and the acceptance binary.
// Each returns a measured quantity; callers decide the tolerance.

#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"

namespace circuitlab::testing {

/// Random mask state over a random plan with logits spread around the
/// threshold.
inline MaskState random_mask(std::shared_ptr<const UnitSet> units, std::mt19937_64& rng) {
  MaskState s = init_masks(std::move(units));
  std::uniform_real_distribution<double> z(-3.0, 3.0);
  for (double& v : s.z) v = z(rng);
  return s;
}

/// Cross-entropy of one random model, batch and mask under ste_train and
/// under hard_eval. The two must be bitwise equal.
inline std::pair<double, double> ste_vs_hard_loss(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ModelConfig cfg = random_model(rng);
  const auto plans = all_plans();
  const GranularityPlan plan = plans[std::uniform_int_distribution<std::size_t>(0, plans.size() - 1)(rng)];
  const Model m = init_model(cfg, seed);
  const auto us = std::make_shared<const UnitSet>(cfg, plan);
  const MaskState s = random_mask(us, rng);
  const TokenBatch tb = random_batch(cfg, 2, rng);
  std::vector<int> targets(tb.ids.size());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = tb.ids[(i + 1) % tb.ids.size()];
  const BoundParams p = bind_params(m, false);
  auto loss = [&](MaskMode mode) {
    const MaskEnv env = mask_values(s, mode);
    const Tensor logits = forward(p, tb, &env);
    return cross_entropy(reshape(logits, {tb.ids.size(), static_cast<std::size_t>(cfg.vocab_size)}), targets).item();
  };
  return {loss(MaskMode::ste_train), loss(MaskMode::hard_eval)};
}

/// Linear probe y_i = m_i u_i with L = sum 0.5 (y_i - t_i)^2 and m the STE
/// mask. Returns max_i |dL/dz_i - u_i L'(m_i u_i) sigmoid'(z_i)|.
inline double ste_probe_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto us = std::make_shared<const UnitSet>(tiny_model(), GranularityPlan{});
  const MaskState s = random_mask(us, rng);
  const std::size_t n = us->size();
  const auto u = uniform_vec(rng, n, -2.0, 2.0), t = uniform_vec(rng, n, -2.0, 2.0);
  const MaskEnv env = mask_values(s, MaskMode::ste_train);
  const Tensor y = mul(env.values, Tensor::from({n}, u));
  const Tensor r = sub(y, Tensor::from({n}, t));
  const GradMap g = backward(scale(sum(mul(r, r)), 0.5));
  const Tensor& dz = g.at(s.latent_name());
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double sig = 1.0 / (1.0 + std::exp(-s.z[i]));
    const double hard = sig > s.eta ? 1.0 : 0.0;
    const double expected = u[i] * (hard * u[i] - t[i]) * sig * (1.0 - sig);
    worst = std::max(worst, std::abs(dz[i] - expected));
  }
  return worst;
}

/// Number of logits where an all-ones mask differs from the unmasked pass.
inline std::size_t all_ones_mismatches(const ModelConfig& cfg, const GranularityPlan& plan, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Model m = init_model(cfg, seed);
  const TokenBatch tb = random_batch(cfg, 2, rng);
  const MaskEnv env = all_ones_env(std::make_shared<const UnitSet>(cfg, plan));
  const Tensor a = forward(m, tb), b = forward(m, tb, &env);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) bad += a[i] != b[i];
  return bad;
}

/// Empty string when unit parameter counts sum to the maskable total and
/// every maskable scalar has exactly one owner; otherwise a description.
inline std::string partition_violation(const ModelConfig& cfg, const GranularityPlan& plan) {
  const Model m = init_model(cfg, 0);
  const UnitSet us(cfg, plan);
  std::size_t total = 0;
  for (const auto& u : us.units()) total += unit_param_count(u, cfg);
  if (total != m.maskable_params())
    return plan.str() + ": unit params " + std::to_string(total) + " != maskable " + std::to_string(m.maskable_params());
  std::vector<std::vector<long>> owner;
  try {
    owner = ownership_map(us);
  } catch (const ContractError& e) {
    return e.what();
  }
  for (std::size_t p = 0; p < owner.size(); ++p)
    for (long o : owner[p])
      if ((o >= 0) != m.layout[p].maskable) return plan.str() + ": ownership mismatch in " + m.layout[p].name;
  return {};
}

/// Expected loss and schedule settings of one shipped preset.
struct PresetExpectation {
  std::string file;
  Granularity attention;
  double sp_alpha, sp_beta, sp_gamma;
  GranularityMultipliers clean_mult, circuit_mult;
};

inline std::vector<PresetExpectation> preset_expectations() {
  const GranularityMultipliers ones;
  GranularityMultipliers heads_clean, heads_circuit, align_circuit;
  heads_clean.head = 0.2;
  heads_circuit.head = 0.1;
  heads_circuit.neuron = 10.0;
  align_circuit.head = 3.0;
  align_circuit.neuron = 0.5;
  return {
      {"refusal_backdoor.json", Granularity::neuron, 1.0, 0.5, 5.0, ones, ones},
      {"jailbreak_backdoor.json", Granularity::neuron, 1.0, 0.5, 5.0, ones, ones},
      {"mislabel_backdoor.json", Granularity::neuron, 1.0, 0.5, 5.0, ones, ones},
      {"refusal_backdoor_heads.json", Granularity::head, 1.0, 1.0, 1.0, heads_clean, heads_circuit},
      {"alignment.json", Granularity::head, 1.0, 1.0, 1.0, ones, align_circuit},
  };
}

/// Every field of a preset that differs from its expected loss weights,
/// mask initialization and optimizer schedules. Empty means exact.
inline std::vector<std::string> preset_violations(const std::filesystem::path& dir, const PresetExpectation& e) {
  std::vector<std::string> out;
  ExperimentConfig c;
  try {
    c = load_experiment(dir / e.file);
  } catch (const std::exception& ex) {
    return {e.file + ": " + ex.what()};
  }
  auto check = [&](const std::string& what, double got, double want) {
    if (got != want) out.push_back(e.file + ": " + what + " = " + exact_decimal(got) + ", expected " + exact_decimal(want));
  };
  const LossWeights& w = c.weights;
  check("lambda", w.lambda, 1.0);
  check("cs_alpha", w.cs_alpha, 1.0);
  check("cs_beta", w.cs_beta, 1.0);
  check("bc_alpha", w.bc_alpha, 1.0);
  check("bc_beta", w.bc_beta, 1.0);
  check("sp_alpha", w.sp_alpha, e.sp_alpha);
  check("sp_beta", w.sp_beta, e.sp_beta);
  check("sp_gamma", w.sp_gamma, e.sp_gamma);
  for (Granularity g : {Granularity::neuron, Granularity::head}) {
    check("clean_mult." + to_string(g), w.clean_mult.of(g), e.clean_mult.of(g));
    check("circuit_mult." + to_string(g), w.circuit_mult.of(g), e.circuit_mult.of(g));
  }
  check("mask.z0", c.mask.z0, 0.2);
  check("mask.circuit_z0", c.mask.circuit_z0, 0.2);
  check("train.mask.lr", c.train_mask.lr, 1e-2);
  check("train.mask.epochs", c.train_mask.epochs, 100);
  check("data.n_mask", c.data.n_mask, 100);
  check("data.n_backdoor", c.data.n_backdoor, 1000);
  check("train.backdoor.lr", c.train_backdoor.lr, 1e-4);
  check("train.backdoor.epochs", c.train_backdoor.epochs, 8);
  check("train.backdoor.batch_size", c.train_backdoor.batch_size, 8);
  check("train.sacirt.lr", c.train_sacirt.lr, 1e-4);
  check("train.sacirt.epochs", c.train_sacirt.epochs, 16);
  if (c.scenario == Scenario::backdoor) check("data.poison_rate", c.data.poison_rate, 0.1);
  if (c.mask.plan.attention != e.attention) out.push_back(e.file + ": plan " + c.mask.plan.str());
  if (c.mask.plan.mlp != Granularity::neuron) out.push_back(e.file + ": plan " + c.mask.plan.str());
  return out;
}

}  // namespace circuitlab::testing

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// Small models, batches and configs shared by the suites.

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "circuitlab.hpp"

namespace circuitlab::testing {

inline ModelConfig tiny_model(int layers = 2, int heads = 4) {
  ModelConfig c;
  c.vocab_size = 64;
  c.seq_len = 16;
  c.d_model = 16;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_mlp = 24;
  return c;
}

/// Every valid granularity plan.
inline std::vector<GranularityPlan> all_plans() {
  using G = Granularity;
  std::vector<GranularityPlan> out;
  for (G a : {G::weight, G::neuron, G::head})
    for (G m : {G::weight, G::neuron}) out.push_back({a, m});
  out.push_back({G::layer, G::layer});
  return out;
}

inline ModelConfig random_model(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 2);
  ModelConfig c;
  c.vocab_size = 8 + 4 * pick(rng);
  c.seq_len = 4 + pick(rng);
  c.n_heads = 1 + pick(rng);
  c.d_model = c.n_heads * (2 + pick(rng));
  c.n_layers = 1 + pick(rng);
  c.d_mlp = 5 + 3 * pick(rng);
  c.use_norm = pick(rng) != 0;
  c.parallel_block = pick(rng) != 1;
  return c;
}

inline TokenBatch random_batch(const ModelConfig& c, std::size_t batch, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, c.vocab_size - 1);
  TokenBatch tb{batch, static_cast<std::size_t>(c.seq_len), {}};
  for (std::size_t i = 0; i < batch * tb.len; ++i) tb.ids.push_back(tok(rng));
  return tb;
}

/// A pipeline config small enough to run every stage in seconds.
inline ExperimentConfig tiny_experiment(Scenario scenario = Scenario::backdoor) {
  ExperimentConfig c;
  c.name = "tiny";
  c.scenario = scenario;
  c.model = tiny_model();
  c.task.vocab_size = c.model.vocab_size;
  c.task.seq_len = c.model.seq_len;
  c.data = {120, 80, 0.1, 12, 40, 40};
  c.train_base = {3e-3, 2, 16};
  c.train_backdoor = {3e-3, 2, 16};
  c.train_mask = {1e-2, 2, 6};
  c.train_sacirt = {1e-3, 1, 16};
  c.mask.circuit_jitter = 0.5;
  c.weights.reduction = SparsityReduction::mean;
  c.seed = 11;
  return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("circuitlab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace circuitlab::testing

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "circuitlab/error.hpp"
#include "circuitlab/tensor.hpp"

namespace circuitlab {

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 1;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

/// First/second moment estimates keyed like the optimized values.
struct AdamState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> moments;
  std::int64_t step = 0;
};

using ValueRefs = std::map<std::string, std::vector<double>*>;
/// Optional per-scalar update gate (1 = trainable); absent keys are fully trainable.
using TrainableMask = std::map<std::string, std::vector<std::uint8_t>>;

inline double global_grad_norm(const GradMap& grads, const TrainableMask* gate = nullptr) {
  double ss = 0.0;
  for (const auto& [name, g] : grads) {
    const std::vector<std::uint8_t>* mask = nullptr;
    if (gate) {
      auto it = gate->find(name);
      if (it != gate->end()) mask = &it->second;
    }
    const auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i)
      if (!mask || (*mask)[i]) ss += gd[i] * gd[i];
  }
  return std::sqrt(ss);
}

/// One bias-corrected adaptive-moment update. Gradients are rescaled so the
/// global norm does not exceed cfg.clip_norm. Gated-off scalars keep both
/// their value and their moments. Returns the pre-clip gradient norm.
inline double adaptive_step(const ValueRefs& values, const GradMap& grads, AdamState& state, const TrainConfig& cfg,
                            const TrainableMask* gate = nullptr) {
  if (values.size() != grads.size()) {
    throw ContractError("adaptive_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(values.size()) + " values");
  }
  for (const auto& [name, ptr] : values) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("adaptive_step: no gradient for '" + name + "'");
    if (it->second.numel() != ptr->size()) throw ContractError("adaptive_step: size mismatch for '" + name + "'");
  }
  const double norm = global_grad_norm(grads, gate);
  const double clip = (cfg.clip_norm > 0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, ptr] : values) {
    std::vector<double>& x = *ptr;
    const auto g = grads.at(name).data();
    auto& mo = state.moments[name];
    if (mo.m.size() != x.size()) {
      mo.m.assign(x.size(), 0.0);
      mo.v.assign(x.size(), 0.0);
    }
    const std::vector<std::uint8_t>* mask = nullptr;
    if (gate) {
      auto it = gate->find(name);
      if (it != gate->end()) mask = &it->second;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      const double gi = g[i] * clip;
      mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * gi;
      mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = mo.m[i] / bc1, vhat = mo.v[i] / bc2;
      x[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  return norm;
}

}  // namespace circuitlab

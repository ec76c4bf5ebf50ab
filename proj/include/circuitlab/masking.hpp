// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "circuitlab/error.hpp"
#include "circuitlab/ops.hpp"
#include "circuitlab/optim.hpp"
#include "circuitlab/units.hpp"

namespace circuitlab {

inline constexpr double kDefaultMaskInit = 0.2;
inline constexpr double kDefaultThreshold = 0.5;

/// Latent mask logits, one per unit, plus the optimizer moments that evolve
/// them. `tag` names the latent leaf ("<tag>.z") in gradient maps.
struct MaskState {
  std::shared_ptr<const UnitSet> units;
  std::vector<double> z;
  double eta = kDefaultThreshold;
  double z0 = kDefaultMaskInit;
  std::string tag = "mask";
  AdamState moments;

  std::string latent_name() const { return tag + ".z"; }
};

inline MaskState init_masks(std::shared_ptr<const UnitSet> units, double z0 = kDefaultMaskInit,
                            double eta = kDefaultThreshold, std::string tag = "mask") {
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError("mask threshold eta must lie in (0, 1)");
  if (!std::isfinite(z0)) throw ConfigError("mask init z0 must be finite");
  MaskState s;
  s.z.assign(units->size(), z0);
  s.units = std::move(units);
  s.eta = eta;
  s.z0 = z0;
  s.tag = std::move(tag);
  return s;
}

/// Strict comparison: sigmoid(z) == eta is excluded.
inline bool hard_member(double z, double eta) { return detail::sigmoid_scalar(z) > eta; }

enum class MaskMode { ste_train, hard_eval, soft_debug, inverted_hard };

inline std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::ste_train: return "ste_train";
    case MaskMode::hard_eval: return "hard_eval";
    case MaskMode::soft_debug: return "soft_debug";
    case MaskMode::inverted_hard: return "inverted_hard";
  }
  return "?";
}

/// Per-unit forward multipliers handed to the transformer forward pass.
/// `values` is graph-tracked in ste_train/soft_debug; `soft` holds sigmoid(z)
/// on the same latent leaf so sparsity terms share its gradient.
struct MaskEnv {
  std::shared_ptr<const UnitSet> units;
  MaskMode mode = MaskMode::hard_eval;
  Tensor values;
  Tensor soft;

  /// Multipliers for one (layer, module) site, or an undefined tensor when
  /// the plan has no units there.
  Tensor site_values(int layer, ModuleTag module) const {
    auto s = units->site(layer, module);
    if (!s) return {};
    return slice(values, s->offset, s->count);
  }
};

/// Env with explicit constant multipliers (used by ablations and oracles).
inline MaskEnv constant_env(std::shared_ptr<const UnitSet> units, std::vector<double> multipliers,
                            MaskMode mode = MaskMode::hard_eval) {
  if (multipliers.size() != units->size()) {
    throw MaskCoverageError("mask has " + std::to_string(multipliers.size()) + " values for " +
                            std::to_string(units->size()) + " units");
  }
  MaskEnv env;
  const std::size_t n = multipliers.size();
  env.values = Tensor::from({n}, std::move(multipliers));
  env.units = std::move(units);
  env.mode = mode;
  return env;
}

inline MaskEnv all_ones_env(std::shared_ptr<const UnitSet> units) {
  const std::size_t n = units->size();
  return constant_env(std::move(units), std::vector<double>(n, 1.0));
}

inline MaskEnv mask_values(const MaskState& state, MaskMode mode) {
  const std::size_t n = state.z.size();
  if (n != state.units->size()) throw MaskCoverageError("mask state does not cover its unit set");
  std::vector<double> hard(n);
  for (std::size_t i = 0; i < n; ++i) hard[i] = hard_member(state.z[i], state.eta) ? 1.0 : 0.0;
  switch (mode) {
    case MaskMode::hard_eval: return constant_env(state.units, std::move(hard), mode);
    case MaskMode::inverted_hard:
      for (double& h : hard) h = 1.0 - h;
      return constant_env(state.units, std::move(hard), mode);
    case MaskMode::soft_debug:
    case MaskMode::ste_train: {
      Tensor z = Tensor::leaf({n}, state.z, state.latent_name());
      MaskEnv env;
      env.units = state.units;
      env.mode = mode;
      env.soft = sigmoid(z);
      env.values = mode == MaskMode::soft_debug ? env.soft
                                                : straight_through(env.soft, Tensor::from({n}, std::move(hard)));
      return env;
    }
  }
  throw ContractError("unknown mask mode");
}

// ---------------------------------------------------------------------------
// Circuits

struct CircuitMeta {
  std::string scenario;
  std::string plan;
  std::string source_run;
};

/// Binary membership over a unit set.
struct CircuitSpec {
  std::shared_ptr<const UnitSet> units;
  std::vector<std::uint8_t> member;
  CircuitMeta meta;

  std::size_t count() const {
    std::size_t c = 0;
    for (auto m : member) c += m;
    return c;
  }
  std::vector<double> multipliers() const { return {member.begin(), member.end()}; }
};

inline CircuitSpec extract_circuit(const MaskState& state, CircuitMeta meta = {}) {
  CircuitSpec c{state.units, {}, std::move(meta)};
  c.member.reserve(state.z.size());
  for (double z : state.z) c.member.push_back(hard_member(z, state.eta) ? 1 : 0);
  if (c.meta.plan.empty()) c.meta.plan = state.units->plan().str();
  return c;
}

inline CircuitSpec complement(const CircuitSpec& c) {
  CircuitSpec out = c;
  for (auto& m : out.member) m = m ? 0 : 1;
  return out;
}

enum class Weighting { unit_count, param_count };

struct Density {
  double density = 0.0;
  double sparsity = 1.0;
  double members = 0.0;  // weighted
  double total = 0.0;    // weighted
};

struct DensityReport {
  Density overall;
  std::map<std::string, Density> by_granularity;
};

inline DensityReport density_and_sparsity(const CircuitSpec& c, Weighting w) {
  DensityReport r;
  const UnitSet& us = *c.units;
  for (std::size_t i = 0; i < us.size(); ++i) {
    const double weight =
        w == Weighting::unit_count ? 1.0 : static_cast<double>(unit_param_count(us[i], us.config()));
    Density& g = r.by_granularity[to_string(us[i].granularity)];
    g.total += weight;
    r.overall.total += weight;
    if (c.member[i]) {
      g.members += weight;
      r.overall.members += weight;
    }
  }
  auto finish = [](Density& d) {
    d.density = d.total > 0 ? d.members / d.total : 0.0;
    d.sparsity = 1.0 - d.density;
  };
  finish(r.overall);
  for (auto& [_, d] : r.by_granularity) finish(d);
  return r;
}

struct Overlap {
  std::size_t count = 0;
  double density = 0.0;
};

inline Overlap intersect_overlap(const CircuitSpec& a, const CircuitSpec& b) {
  if (!(*a.units == *b.units) || a.member.size() != b.member.size()) {
    throw ContractError("overlap of circuits over different unit sets");
  }
  Overlap o;
  for (std::size_t i = 0; i < a.member.size(); ++i) o.count += (a.member[i] && b.member[i]) ? 1 : 0;
  o.density = a.member.empty() ? 0.0 : static_cast<double>(o.count) / static_cast<double>(a.member.size());
  return o;
}

}  // namespace circuitlab

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/batching.hpp"
#include "circuitlab/masking.hpp"

namespace circuitlab {

struct GranularityMultipliers {
  double weight = 1.0;
  double neuron = 1.0;
  double head = 1.0;
  double layer = 1.0;

  double of(Granularity g) const {
    switch (g) {
      case Granularity::weight: return weight;
      case Granularity::neuron: return neuron;
      case Granularity::head: return head;
      case Granularity::layer: return layer;
    }
    return 1.0;
  }
  bool operator==(const GranularityMultipliers&) const = default;
};

/// How mask-mass penalties are reduced over units: a raw sum, or the sum
/// divided by the unit count.
enum class SparsityReduction { sum, mean };

inline std::string to_string(SparsityReduction r) { return r == SparsityReduction::sum ? "sum" : "mean"; }

inline SparsityReduction parse_sparsity_reduction(const std::string& s) {
  if (s == "sum") return SparsityReduction::sum;
  if (s == "mean") return SparsityReduction::mean;
  throw ConfigError("unknown sparsity reduction '" + s + "'");
}

struct LossWeights {
  double lambda = 1.0;
  double cs_alpha = 1.0;
  double cs_beta = 1.0;
  double bc_alpha = 1.0;
  double bc_beta = 1.0;
  double sp_alpha = 1.0;  // overlap
  double sp_beta = 0.5;   // clean-graph density incentive
  double sp_gamma = 5.0;  // circuit sparsity
  std::optional<double> tau_m;  // hinge margin; unset means 2 ln(vocab)
  GranularityMultipliers clean_mult;
  GranularityMultipliers circuit_mult;
  bool supervise_circuit = true;
  SparsityReduction reduction = SparsityReduction::sum;

  double margin(int vocab_size) const { return tau_m ? *tau_m : 2.0 * std::log(static_cast<double>(vocab_size)); }

  void validate() const {
    for (double v : {lambda, cs_alpha, cs_beta, bc_alpha, bc_beta, sp_alpha, sp_beta, sp_gamma}) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
    }
    for (const auto* m : {&clean_mult, &circuit_mult})
      for (double v : {m->weight, m->neuron, m->head, m->layer})
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("granularity multipliers must be finite and >= 0");
    if (tau_m && !(*tau_m >= 0.0)) throw ConfigError("hinge margin must be >= 0");
  }
  bool operator==(const LossWeights&) const = default;
};

struct LossTerm {
  std::string name;
  double weight = 0.0;
  double value = 0.0;
};

/// total == sum(weight * value) over terms; `graph` is the differentiable
/// scalar for the same sum.
struct LossBreakdown {
  double total = 0.0;
  std::vector<LossTerm> terms;
  Tensor graph;

  double value(const std::string& name) const {
    for (const auto& t : terms)
      if (t.name == name) return t.value;
    throw LookupError("no loss term '" + name + "'");
  }
  double weighted_sum() const {
    double s = 0.0;
    for (const auto& t : terms) s += t.weight * t.value;
    return s;
  }
};

namespace detail {

struct LossAccumulator {
  LossBreakdown out;

  void add(std::string name, double weight, const Tensor& value) {
    out.terms.push_back({std::move(name), weight, value.item()});
    out.total += weight * value.item();
    if (weight == 0.0 || !value.tracked()) return;
    const Tensor w = weight == 1.0 ? value : scale(value, weight);
    out.graph = out.graph.defined() ? circuitlab::add(out.graph, w) : w;
  }
  LossBreakdown finish() {
    if (!out.graph.defined()) out.graph = Tensor::scalar(out.total);
    return std::move(out);
  }
};

inline Tensor soft_of(const MaskEnv& env) { return env.soft.defined() ? env.soft : env.values; }

inline Tensor reduce_units(const Tensor& per_unit, SparsityReduction r) {
  if (r == SparsityReduction::sum) return sum(per_unit);
  return scale(sum(per_unit), 1.0 / static_cast<double>(per_unit.numel()));
}

inline Tensor unit_multipliers(const UnitSet& units, const GranularityMultipliers& m) {
  std::vector<double> v(units.size());
  for (std::size_t i = 0; i < units.size(); ++i) v[i] = m.of(units[i].granularity);
  return Tensor::from({units.size()}, std::move(v));
}

}  // namespace detail

/// Masked-vs-reference KL at the answer rows plus lambda * sum sigmoid(z).
/// The model is bound as constants, so only the mask latent gets a gradient.
inline LossBreakdown faithfulness_l1_loss(const BoundParams& params, const MaskState& state,
                                          const SupervisedBatch& batch, const Tensor& reference,
                                          const LossWeights& w) {
  const MaskEnv env = mask_values(state, MaskMode::ste_train);
  detail::LossAccumulator acc;
  acc.add("faithfulness_kl", 1.0, kl_divergence(reference, answer_logits(params, batch, &env)));
  acc.add("l1", w.lambda, detail::reduce_units(env.soft, w.reduction));
  return acc.finish();
}

/// Inputs shared by the dual-mask losses. `triggered` holds Tri(x) in the
/// backdoor scenario and harmful prompts in the alignment scenario;
/// `ref_triggered` is what the dense graph should produce there.
struct DualBatch {
  SupervisedBatch clean;
  SupervisedBatch triggered;
  Tensor ref_clean;
  Tensor ref_triggered;

  void check() const {
    if (ref_clean.size(0) != clean.rows.size() || ref_triggered.size(0) != triggered.rows.size()) {
      throw ContractError("reference rows do not align with their batches");
    }
  }
};

inline LossBreakdown clean_subgraph_loss(const BoundParams& params, const MaskEnv& clean_env, const DualBatch& b,
                                         const LossWeights& w) {
  b.check();
  detail::LossAccumulator acc;
  acc.add("cs_clean", w.cs_alpha, kl_divergence(b.ref_clean, answer_logits(params, b.clean, &clean_env)));
  acc.add("cs_trigger", w.cs_beta, kl_divergence(b.ref_triggered, answer_logits(params, b.triggered, &clean_env)));
  return acc.finish();
}

/// Hinged repulsion from the reference on clean inputs plus cross-entropy to
/// the attacker (or refusal) target on triggered inputs.
inline LossBreakdown backdoor_circuit_loss(const BoundParams& params, const MaskEnv& circuit_env, const DualBatch& b,
                                           const LossWeights& w) {
  b.check();
  detail::LossAccumulator acc;
  if (!w.supervise_circuit) {
    acc.add("bc_repel", 0.0, Tensor::scalar(0.0));
    acc.add("bc_target", 0.0, Tensor::scalar(0.0));
    return acc.finish();
  }
  const double tau = w.margin(params.config->vocab_size);
  const Tensor kl = kl_rows(b.ref_clean, answer_logits(params, b.clean, &circuit_env));
  acc.add("bc_repel", w.bc_alpha, mean(relu(sub(Tensor::scalar(tau), kl))));
  acc.add("bc_target", w.bc_beta, cross_entropy(answer_logits(params, b.triggered, &circuit_env), b.triggered.targets));
  return acc.finish();
}

/// Overlap, clean-density and circuit-sparsity penalties on soft masks.
/// Term weights here exclude the global lambda (applied by dmo_total).
inline LossBreakdown dmo_sparsity_loss(const MaskEnv& clean_env, const MaskEnv& circuit_env, const LossWeights& w) {
  if (!(*clean_env.units == *circuit_env.units)) throw ContractError("dual masks over different unit sets");
  const Tensor mc = detail::soft_of(clean_env), mb = detail::soft_of(circuit_env);
  const UnitSet& units = *clean_env.units;
  detail::LossAccumulator acc;
  const auto r = w.reduction;
  acc.add("sp_overlap", w.sp_alpha, detail::reduce_units(mul(mc, mb), r));
  acc.add("sp_dense", w.sp_beta,
          detail::reduce_units(mul(detail::unit_multipliers(units, w.clean_mult), sub(Tensor::scalar(1.0), mc)), r));
  acc.add("sp_sparse", w.sp_gamma, detail::reduce_units(mul(detail::unit_multipliers(units, w.circuit_mult), mb), r));
  return acc.finish();
}

inline LossBreakdown dmo_total(const LossBreakdown& cs, const LossBreakdown& bc, const LossBreakdown& sp,
                               const LossWeights& w) {
  LossBreakdown out;
  for (const auto* part : {&cs, &bc}) {
    out.terms.insert(out.terms.end(), part->terms.begin(), part->terms.end());
  }
  for (LossTerm t : sp.terms) {
    t.weight *= w.lambda;
    out.terms.push_back(t);
  }
  out.total = out.weighted_sum();
  Tensor g;
  auto fold = [&g](const Tensor& t) {
    if (t.tracked()) g = g.defined() ? add(g, t) : t;
  };
  fold(cs.graph);
  fold(bc.graph);
  if (w.lambda != 0.0 && sp.graph.tracked()) fold(w.lambda == 1.0 ? sp.graph : scale(sp.graph, w.lambda));
  out.graph = g.defined() ? g : Tensor::scalar(out.total);
  return out;
}

}  // namespace circuitlab

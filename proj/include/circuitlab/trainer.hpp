// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "circuitlab/batching.hpp"
#include "circuitlab/masking.hpp"
#include "circuitlab/objectives.hpp"
#include "circuitlab/optim.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab {

struct EpochLog {
  int epoch = 0;
  double total = 0.0;
  std::map<std::string, double> terms;  // epoch means
};

struct RunRecord {
  std::string stage;
  std::vector<EpochLog> history;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::map<std::string, double> summary;
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Accumulates per-step breakdowns into epoch means.
struct EpochMeter {
  std::map<std::string, double> sums;
  double total = 0.0;
  std::size_t steps = 0;

  void add(const LossBreakdown& b) {
    for (const auto& t : b.terms) sums[t.name] += t.value;
    total += b.total;
    ++steps;
  }
  EpochLog finish(int epoch) const {
    EpochLog log{epoch, steps ? total / static_cast<double>(steps) : 0.0, {}};
    for (const auto& [k, v] : sums) log.terms[k] = steps ? v / static_cast<double>(steps) : 0.0;
    return log;
  }
};

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  return out;
}

/// Gradients for every optimized key; unreachable ones are zero.
inline void fill_missing(GradMap& grads, const ValueRefs& values) {
  for (const auto& [name, ptr] : values)
    if (!grads.count(name)) grads.emplace(name, Tensor::zeros({ptr->size()}));
}

}  // namespace detail

/// Cross-entropy on answer positions only. `gate`, when given, freezes
/// individual scalars (absent parameters are frozen entirely).
inline RunRecord train_supervised(Model& model, const LabeledDataset& ds, const TrainConfig& cfg,
                                  const TrainableMask* gate = nullptr, std::string stage = "train") {
  cfg.validate();
  if (ds.size() == 0) throw ContractError(stage + ": empty dataset");
  detail::Stopwatch clock;
  RunRecord rec;
  rec.stage = std::move(stage);
  rec.seed = cfg.seed;

  std::vector<bool> trainable(model.values.size(), true);
  if (gate) {
    for (std::size_t i = 0; i < model.layout.size(); ++i) {
      auto it = gate->find(model.layout[i].name);
      trainable[i] = it != gate->end() && std::any_of(it->second.begin(), it->second.end(), [](auto b) { return b; });
    }
  }
  ValueRefs values;
  for (std::size_t i = 0; i < model.values.size(); ++i)
    if (trainable[i]) values[model.layout[i].name] = &model.values[i];

  AdamState adam;
  std::mt19937_64 rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::EpochMeter meter;
    for (const auto& idx : detail::epoch_batches(ds.size(), static_cast<std::size_t>(cfg.batch_size), rng)) {
      std::vector<const Example*> ptrs;
      for (auto i : idx) ptrs.push_back(&ds.examples[i]);
      const SupervisedBatch b = make_batch(ptrs);
      const BoundParams params = bind_params(model, trainable);
      const Tensor loss = cross_entropy(answer_logits(params, b), b.targets);
      GradMap grads = backward(loss);
      detail::fill_missing(grads, values);
      adaptive_step(values, grads, adam, cfg, gate);
      LossBreakdown lb;
      lb.terms.push_back({"ce", 1.0, loss.item()});
      lb.total = loss.item();
      meter.add(lb);
    }
    rec.history.push_back(meter.finish(epoch));
  }
  rec.wall_seconds = clock.seconds();
  return rec;
}

inline RunRecord train_base(Model& model, const LabeledDataset& ds, const TrainConfig& cfg) {
  return train_supervised(model, ds, cfg, nullptr, "train_base");
}

/// Full fine-tune of every parameter on a poisoned mixture.
inline RunRecord inject_backdoor(Model& model, const LabeledDataset& poisoned, const TrainConfig& cfg) {
  return train_supervised(model, poisoned, cfg, nullptr, "inject_backdoor");
}

/// Per-scalar update gate: 1 exactly for scalars owned by circuit members.
inline TrainableMask circuit_gate(const Model& model, const CircuitSpec& circuit) {
  TrainableMask gate;
  for (std::size_t i = 0; i < model.layout.size(); ++i)
    gate[model.layout[i].name].assign(model.values[i].size(), 0);
  const UnitSet& units = *circuit.units;
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (!circuit.member[u]) continue;
    for_each_owned_scalar(units[u], model.config, [&](std::size_t p, std::size_t off) {
      gate[model.layout[p].name][off] = 1;
    });
  }
  return gate;
}

inline double tunable_fraction(const Model& model, const CircuitSpec& circuit) {
  std::size_t owned = 0;
  for (std::size_t u = 0; u < circuit.units->size(); ++u)
    if (circuit.member[u]) owned += unit_param_count((*circuit.units)[u], model.config);
  return static_cast<double>(owned) / static_cast<double>(model.total_params());
}

/// Circuit-restricted fine-tuning: scalars outside the circuit never change.
inline RunRecord sacirt(Model& model, const CircuitSpec& circuit, const LabeledDataset& safe_ds, const TrainConfig& cfg) {
  if (circuit.count() == 0) throw ContractError("sacirt: empty circuit");
  if (!(circuit.units->config() == model.config)) throw MaskCoverageError("sacirt: circuit built for another model");
  const TrainableMask gate = circuit_gate(model, circuit);
  RunRecord rec = train_supervised(model, safe_ds, cfg, &gate, "sacirt");
  rec.summary["tunable_fraction"] = tunable_fraction(model, circuit);
  return rec;
}

// ---------------------------------------------------------------------------
// Mask optimization

/// Reference logits at each example's answer rows, flattened [k * V].
inline std::vector<std::vector<double>> reference_rows(const Model& model, const LabeledDataset& ds,
                                                       TargetField field = TargetField::target,
                                                       std::size_t chunk = 64) {
  std::vector<std::vector<double>> out(ds.size());
  const BoundParams params = bind_params(model, false);
  const auto v = static_cast<std::size_t>(model.config.vocab_size);
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    std::vector<const Example*> ptrs;
    for (std::size_t i = s; i < std::min(ds.size(), s + chunk); ++i) ptrs.push_back(&ds.examples[i]);
    const SupervisedBatch b = make_batch(ptrs, field);
    const Tensor logits = answer_logits(params, b);
    for (std::size_t r = 0; r < b.rows.size(); ++r) {
      auto& dst = out[s + b.row_example[r]];
      dst.insert(dst.end(), logits.data().begin() + static_cast<std::ptrdiff_t>(r * v),
                 logits.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * v));
    }
  }
  return out;
}

namespace detail {

inline Tensor stack_rows(const std::vector<std::vector<double>>& rows, const std::vector<std::size_t>& idx,
                         std::size_t v) {
  std::vector<double> data;
  for (auto i : idx) data.insert(data.end(), rows[i].begin(), rows[i].end());
  const std::size_t n = data.size() / v;
  return Tensor::from({n, v}, std::move(data));
}

inline SupervisedBatch batch_of(const LabeledDataset& ds, const std::vector<std::size_t>& idx,
                                TargetField field = TargetField::target) {
  std::vector<const Example*> ptrs;
  for (auto i : idx) ptrs.push_back(&ds.examples[i]);
  return make_batch(ptrs, field);
}

}  // namespace detail

struct SingleMaskResult {
  MaskState state;
  RunRecord record;
};

/// Single-mask search: KL to the unmasked model plus lambda * L1 on soft masks.
inline SingleMaskResult optimize_masks_single(const Model& model, std::shared_ptr<const UnitSet> units,
                                              const LabeledDataset& ds, const LossWeights& w, const TrainConfig& cfg,
                                              double z0 = kDefaultMaskInit, double eta = kDefaultThreshold) {
  cfg.validate();
  w.validate();
  if (ds.size() == 0) throw ContractError("mask search on empty dataset");
  detail::Stopwatch clock;
  SingleMaskResult res{init_masks(std::move(units), z0, eta, "mask"), {}};
  res.record.stage = "find_circuit_single";
  res.record.seed = cfg.seed;
  const auto v = static_cast<std::size_t>(model.config.vocab_size);
  const auto refs = reference_rows(model, ds);
  const BoundParams params = bind_params(model, false);
  std::mt19937_64 rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::EpochMeter meter;
    for (const auto& idx : detail::epoch_batches(ds.size(), static_cast<std::size_t>(cfg.batch_size), rng)) {
      const LossBreakdown lb =
          faithfulness_l1_loss(params, res.state, detail::batch_of(ds, idx), detail::stack_rows(refs, idx, v), w);
      const ValueRefs values{{res.state.latent_name(), &res.state.z}};
      GradMap grads = backward(lb.graph);
      detail::fill_missing(grads, values);
      adaptive_step(values, grads, res.state.moments, cfg);
      meter.add(lb);
    }
    res.record.history.push_back(meter.finish(epoch));
  }
  const CircuitSpec c = extract_circuit(res.state);
  res.record.summary["density_units"] = density_and_sparsity(c, Weighting::unit_count).overall.density;
  res.record.summary["density_params"] = density_and_sparsity(c, Weighting::param_count).overall.density;
  res.record.wall_seconds = clock.seconds();
  return res;
}

enum class Scenario { backdoor, alignment };

inline std::string to_string(Scenario s) { return s == Scenario::backdoor ? "backdoor" : "alignment"; }

inline Scenario parse_scenario(const std::string& s) {
  if (s == "backdoor") return Scenario::backdoor;
  if (s == "alignment") return Scenario::alignment;
  throw ConfigError("unknown scenario '" + s + "'");
}

/// Index-paired inputs for dual-mask search plus cached reference rows.
struct DualData {
  Scenario scenario = Scenario::backdoor;
  LabeledDataset clean;
  LabeledDataset triggered;
  std::vector<std::vector<double>> ref_clean;
  std::vector<std::vector<double>> ref_triggered;
};

/// Backdoor roles: x and Tri(x); the dense graph should answer Tri(x) the
/// way the full model answers x.
inline DualData prepare_dual_backdoor(const Model& bkd, const LabeledDataset& clean, const LabeledDataset& triggered) {
  if (clean.size() != triggered.size() || clean.size() == 0) {
    throw ContractError("clean and triggered mask-training sets must be non-empty and index-paired");
  }
  DualData d{Scenario::backdoor, clean, triggered, reference_rows(bkd, clean), {}};
  d.ref_triggered = d.ref_clean;
  return d;
}

/// Alignment roles: safe prompts keep the aligned model's answers; on
/// harmful prompts the dense graph should match the pre-alignment model
/// while the sparse circuit is pushed toward refusal.
inline DualData prepare_dual_alignment(const Model& aligned, const Model* pre_align, const LabeledDataset& safe,
                                       const LabeledDataset& harmful) {
  if (!pre_align) throw ConfigError("alignment scenario needs a pre-alignment reference model");
  if (!(pre_align->config == aligned.config)) throw ConfigError("pre-alignment model has a different config");
  const std::size_t n = std::min(safe.size(), harmful.size());
  if (n == 0) throw ContractError("alignment mask search needs safe and harmful prompts");
  DualData d{Scenario::alignment, head(safe, n), head(harmful, n), {}, {}};
  d.ref_clean = reference_rows(aligned, d.clean);
  d.ref_triggered = reference_rows(*pre_align, d.triggered);
  return d;
}

struct DualMaskResult {
  MaskState clean;
  MaskState circuit;
  RunRecord record;
};

/// Joint dual-mask search; both latent vectors move on every step from the
/// combined loss.
inline DualMaskResult optimize_masks_dual(const Model& model, std::shared_ptr<const UnitSet> units, const DualData& data,
                                          const LossWeights& w, const TrainConfig& cfg, double z0 = kDefaultMaskInit,
                                          double eta = kDefaultThreshold, double circuit_z0 = kDefaultMaskInit,
                                          double circuit_jitter = 0.0) {
  cfg.validate();
  w.validate();
  if (!(circuit_jitter >= 0.0)) throw ConfigError("circuit jitter must be >= 0");
  if (data.clean.size() != data.triggered.size() || data.clean.size() == 0) {
    throw ContractError("dual mask search needs non-empty index-paired sets");
  }
  detail::Stopwatch clock;
  DualMaskResult res{init_masks(units, z0, eta, "clean"), init_masks(units, circuit_z0, eta, "circuit"), {}};
  res.record.stage = "find_circuit_dual";
  res.record.seed = cfg.seed;
  const auto v = static_cast<std::size_t>(model.config.vocab_size);
  const BoundParams params = bind_params(model, false);
  AdamState adam;
  std::mt19937_64 rng(cfg.seed);
  // Symmetric uniform offsets keep the mean at circuit_z0 but stagger the
  // steps at which units cross eta.
  if (circuit_jitter > 0.0) {
    std::mt19937_64 jrng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> u(-circuit_jitter, circuit_jitter);
    for (double& z : res.circuit.z) z += u(jrng);
  }
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::EpochMeter meter;
    for (const auto& idx : detail::epoch_batches(data.clean.size(), static_cast<std::size_t>(cfg.batch_size), rng)) {
      DualBatch b{detail::batch_of(data.clean, idx), detail::batch_of(data.triggered, idx),
                  detail::stack_rows(data.ref_clean, idx, v), detail::stack_rows(data.ref_triggered, idx, v)};
      const MaskEnv ce = mask_values(res.clean, MaskMode::ste_train);
      const MaskEnv be = mask_values(res.circuit, MaskMode::ste_train);
      const LossBreakdown lb = dmo_total(clean_subgraph_loss(params, ce, b, w), backdoor_circuit_loss(params, be, b, w),
                                         dmo_sparsity_loss(ce, be, w), w);
      const ValueRefs values{{res.clean.latent_name(), &res.clean.z}, {res.circuit.latent_name(), &res.circuit.z}};
      GradMap grads = backward(lb.graph);
      detail::fill_missing(grads, values);
      adaptive_step(values, grads, adam, cfg);
      meter.add(lb);
    }
    res.record.history.push_back(meter.finish(epoch));
  }
  res.clean.moments.moments["clean.z"] = adam.moments["clean.z"];
  res.circuit.moments.moments["circuit.z"] = adam.moments["circuit.z"];
  res.clean.moments.step = res.circuit.moments.step = adam.step;

  const CircuitSpec cc = extract_circuit(res.clean), cb = extract_circuit(res.circuit);
  res.record.summary["clean_density_units"] = density_and_sparsity(cc, Weighting::unit_count).overall.density;
  res.record.summary["circuit_density_units"] = density_and_sparsity(cb, Weighting::unit_count).overall.density;
  res.record.summary["circuit_density_params"] = density_and_sparsity(cb, Weighting::param_count).overall.density;
  res.record.summary["overlap_density"] = intersect_overlap(cc, cb).density;
  res.record.wall_seconds = clock.seconds();
  return res;
}

}  // namespace circuitlab

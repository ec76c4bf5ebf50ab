// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: everything one pipeline run needs, read from a
// single JSON document. Stage seeds are derived from the top-level seed, so
// the per-stage train blocks may not carry their own.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "circuitlab/masking.hpp"
#include "circuitlab/serialize.hpp"
#include "circuitlab/trainer.hpp"
#include "circuitlab/util.hpp"

namespace circuitlab {

struct DataSizes {
  int n_train = 2000;  // clean base-task set (alignment: pre-align set)
  int n_backdoor = 1000;  // poisoned fine-tune set (alignment: aligned set)
  double poison_rate = 0.1;
  int n_mask = 100;
  int n_sacirt = 1000;
  int n_eval = 500;

  void validate() const {
    for (int n : {n_train, n_backdoor, n_mask, n_sacirt, n_eval})
      if (n < 1) throw ConfigError("dataset sizes must be >= 1");
    if (!(poison_rate >= 0.0 && poison_rate <= 1.0)) throw ConfigError("poison_rate must lie in [0, 1]");
  }
  bool operator==(const DataSizes&) const = default;
};

enum class MaskSearch { single, dual };

inline std::string to_string(MaskSearch m) { return m == MaskSearch::single ? "single" : "dual"; }

inline MaskSearch parse_mask_search(const std::string& s) {
  if (s == "single") return MaskSearch::single;
  if (s == "dual") return MaskSearch::dual;
  throw ConfigError("unknown mask search mode '" + s + "'");
}

struct MaskSettings {
  double z0 = kDefaultMaskInit;
  double eta = kDefaultThreshold;
  double circuit_z0 = kDefaultMaskInit;
  double circuit_jitter = 0.0;
  GranularityPlan plan;
  MaskSearch mode = MaskSearch::dual;

  void validate() const {
    for (double v : {z0, circuit_z0})
      if (!std::isfinite(v)) throw ConfigError("mask init logits must be finite");
    if (!(eta > 0.0 && eta < 1.0)) throw ConfigError("mask threshold eta must lie in (0, 1)");
    if (!(circuit_jitter >= 0.0)) throw ConfigError("circuit_jitter must be >= 0");
    plan.validate();
  }
  bool operator==(const MaskSettings&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  Scenario scenario = Scenario::backdoor;
  ModelConfig model;
  TaskSpec task;
  TriggerSpec trigger;
  DataSizes data;
  TrainConfig train_base;
  TrainConfig train_backdoor;
  TrainConfig train_mask;
  TrainConfig train_sacirt;
  MaskSettings mask;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";

  void validate() const {
    model.validate();
    task.validate();
    data.validate();
    mask.validate();
    weights.validate();
    for (const auto* t : {&train_base, &train_backdoor, &train_mask, &train_sacirt}) t->validate();
    if (task.vocab_size != model.vocab_size) throw ConfigError("task.vocab_size must equal model.vocab_size");
    if (task.seq_len > model.seq_len) throw ConfigError("task.seq_len exceeds model.seq_len");
  }

  /// Seed of one named stage or dataset; a pure function of (seed, stage).
  std::uint64_t stage_seed(const std::string& stage) const {
    const std::string h = fnv1a_hex(std::to_string(seed) + "/" + stage);
    return std::stoull(h, nullptr, 16);
  }

  /// TrainConfig of a stage with its derived seed filled in.
  TrainConfig stage_train(const std::string& stage) const {
    TrainConfig c = stage == "base"       ? train_base
                    : stage == "backdoor" ? train_backdoor
                    : stage == "mask"     ? train_mask
                    : stage == "sacirt"   ? train_sacirt
                                          : throw ConfigError("unknown training stage '" + stage + "'");
    c.seed = stage_seed("train." + stage);
    return c;
  }

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline Json train_block_json(const TrainConfig& c) {
  Json j = to_json(c);
  j.erase("seed");
  return j;
}

inline TrainConfig train_block_from_json(const Json& j, const std::string& ctx) {
  if (j.is_object() && j.contains("seed")) {
    throw ConfigError(ctx + ": per-stage seeds are derived from the top-level seed");
  }
  return train_config_from_json(j, ctx);
}

}  // namespace detail

inline Json to_json(const DataSizes& d) {
  return {{"n_train", d.n_train},   {"n_backdoor", d.n_backdoor}, {"poison_rate", d.poison_rate},
          {"n_mask", d.n_mask},     {"n_sacirt", d.n_sacirt},     {"n_eval", d.n_eval}};
}

inline Json to_json(const MaskSettings& m) {
  return {{"z0", m.z0},
          {"eta", m.eta},
          {"circuit_z0", m.circuit_z0},
          {"circuit_jitter", m.circuit_jitter},
          {"plan", to_json(m.plan)},
          {"mode", to_string(m.mode)}};
}

inline Json to_json(const ExperimentConfig& c) {
  return {{"name", c.name},
          {"scenario", to_string(c.scenario)},
          {"model", to_json(c.model)},
          {"task", to_json(c.task)},
          {"trigger", to_json(c.trigger)},
          {"data", to_json(c.data)},
          {"train",
           {{"base", detail::train_block_json(c.train_base)},
            {"backdoor", detail::train_block_json(c.train_backdoor)},
            {"mask", detail::train_block_json(c.train_mask)},
            {"sacirt", detail::train_block_json(c.train_sacirt)}}},
          {"mask", to_json(c.mask)},
          {"weights", to_json(c.weights)},
          {"seed", c.seed},
          {"output_dir", c.output_dir}};
}

inline DataSizes data_sizes_from_json(const Json& j, const std::string& ctx) {
  DataSizes d;
  StrictReader r(j, ctx);
  r.get("n_train", d.n_train);
  r.get("n_backdoor", d.n_backdoor);
  r.get("poison_rate", d.poison_rate);
  r.get("n_mask", d.n_mask);
  r.get("n_sacirt", d.n_sacirt);
  r.get("n_eval", d.n_eval);
  r.finish();
  d.validate();
  return d;
}

inline MaskSettings mask_settings_from_json(const Json& j, const std::string& ctx) {
  MaskSettings m;
  std::string mode = to_string(m.mode);
  StrictReader r(j, ctx);
  r.get("z0", m.z0);
  r.get("eta", m.eta);
  r.get("circuit_z0", m.circuit_z0);
  r.get("circuit_jitter", m.circuit_jitter);
  r.get("mode", mode);
  r.nested("plan", [&](const Json& s, const std::string& c) { m.plan = plan_from_json(s, c); });
  r.finish();
  m.mode = parse_mask_search(mode);
  m.validate();
  return m;
}

inline ExperimentConfig experiment_from_json(const Json& j) {
  ExperimentConfig c;
  std::string scenario = to_string(c.scenario);
  StrictReader r(j, "config");
  r.get("name", c.name);
  r.get("scenario", scenario);
  r.get("seed", c.seed);
  r.get("output_dir", c.output_dir);
  r.nested("model", [&](const Json& s, const std::string& ctx) { c.model = model_config_from_json(s, ctx); });
  r.nested("task", [&](const Json& s, const std::string& ctx) { c.task = task_from_json(s, ctx); });
  r.nested("trigger", [&](const Json& s, const std::string& ctx) { c.trigger = trigger_from_json(s, ctx); });
  r.nested("data", [&](const Json& s, const std::string& ctx) { c.data = data_sizes_from_json(s, ctx); });
  r.nested("mask", [&](const Json& s, const std::string& ctx) { c.mask = mask_settings_from_json(s, ctx); });
  r.nested("weights", [&](const Json& s, const std::string& ctx) { c.weights = weights_from_json(s, ctx); });
  r.nested("train", [&](const Json& s, const std::string& ctx) {
    StrictReader t(s, ctx);
    t.nested("base", [&](const Json& b, const std::string& cc) { c.train_base = detail::train_block_from_json(b, cc); });
    t.nested("backdoor",
             [&](const Json& b, const std::string& cc) { c.train_backdoor = detail::train_block_from_json(b, cc); });
    t.nested("mask", [&](const Json& b, const std::string& cc) { c.train_mask = detail::train_block_from_json(b, cc); });
    t.nested("sacirt",
             [&](const Json& b, const std::string& cc) { c.train_sacirt = detail::train_block_from_json(b, cc); });
    t.finish();
  });
  r.finish();
  c.scenario = parse_scenario(scenario);
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

/// FNV-1a of the canonical (sorted-key, compact) JSON form. The output
/// root is excluded: moving a run does not change what it computes.
inline std::string config_digest(const ExperimentConfig& c) {
  Json j = to_json(c);
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

}  // namespace circuitlab

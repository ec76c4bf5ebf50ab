// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// JSON forms of the configuration structs. Readers are strict: a key that
// the struct does not define is a ConfigError, missing keys keep defaults.

#pragma once

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "circuitlab/error.hpp"
#include "circuitlab/model_config.hpp"
#include "circuitlab/objectives.hpp"
#include "circuitlab/optim.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/units.hpp"

namespace circuitlab {

using Json = nlohmann::json;

/// Reads fields from one JSON object and rejects leftovers.
class StrictReader {
 public:
  StrictReader(const Json& j, std::string context) : j_(j), ctx_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(ctx_ + "." + key + ": " + e.what());
    }
  }

  /// Nested object handled by `fn(const Json&, std::string context)`.
  template <typename Fn>
  void nested(const char* key, Fn fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) fn(*it, ctx_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError(ctx_ + ": unknown field '" + k + "'");
  }

 private:
  const Json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

inline Json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"seq_len", c.seq_len},   {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},   {"d_mlp", c.d_mlp},
          {"use_norm", c.use_norm},     {"parallel_block", c.parallel_block}};
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& ctx = "model") {
  ModelConfig c;
  StrictReader r(j, ctx);
  r.get("vocab_size", c.vocab_size);
  r.get("seq_len", c.seq_len);
  r.get("d_model", c.d_model);
  r.get("n_layers", c.n_layers);
  r.get("n_heads", c.n_heads);
  r.get("d_mlp", c.d_mlp);
  r.get("use_norm", c.use_norm);
  r.get("parallel_block", c.parallel_block);
  r.finish();
  c.validate();
  return c;
}

inline Json to_json(const GranularityPlan& p) {
  return {{"attention", to_string(p.attention)}, {"mlp", to_string(p.mlp)}};
}

inline GranularityPlan plan_from_json(const Json& j, const std::string& ctx = "plan") {
  GranularityPlan p;
  std::string a = to_string(p.attention), m = to_string(p.mlp);
  StrictReader r(j, ctx);
  r.get("attention", a);
  r.get("mlp", m);
  r.finish();
  p.attention = parse_granularity(a);
  p.mlp = parse_granularity(m);
  p.validate();
  return p;
}

inline Json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},         {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"seed", c.seed},
          {"clip_norm", c.clip_norm}, {"beta1", c.beta1},   {"beta2", c.beta2},           {"eps", c.eps}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& ctx, TrainConfig c = {}) {
  StrictReader r(j, ctx);
  r.get("lr", c.lr);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("clip_norm", c.clip_norm);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.finish();
  c.validate();
  return c;
}

inline Json to_json(const TaskSpec& t) {
  return {{"kind", to_string(t.kind)},   {"vocab_size", t.vocab_size}, {"seq_len", t.seq_len},
          {"prompt_len", t.prompt_len}, {"n_content", t.n_content},   {"n_labels", t.n_labels},
          {"n_phrase", t.n_phrase},     {"n_harm", t.n_harm}};
}

inline TaskSpec task_from_json(const Json& j, const std::string& ctx = "task") {
  TaskSpec t;
  std::string kind = to_string(t.kind);
  StrictReader r(j, ctx);
  r.get("kind", kind);
  r.get("vocab_size", t.vocab_size);
  r.get("seq_len", t.seq_len);
  r.get("prompt_len", t.prompt_len);
  r.get("n_content", t.n_content);
  r.get("n_labels", t.n_labels);
  r.get("n_phrase", t.n_phrase);
  r.get("n_harm", t.n_harm);
  r.finish();
  t.kind = parse_task_kind(kind);
  t.validate();
  return t;
}

inline Json to_json(const TriggerSpec& t) {
  return {{"style", to_string(t.style)}, {"behavior", to_string(t.behavior)}};
}

inline TriggerSpec trigger_from_json(const Json& j, const std::string& ctx = "trigger") {
  TriggerSpec t;
  std::string style = to_string(t.style), behavior = to_string(t.behavior);
  StrictReader r(j, ctx);
  r.get("style", style);
  r.get("behavior", behavior);
  r.finish();
  t.style = parse_trigger_style(style);
  t.behavior = parse_target_behavior(behavior);
  return t;
}

inline Json to_json(const GranularityMultipliers& m) {
  return {{"weight", m.weight}, {"neuron", m.neuron}, {"head", m.head}, {"layer", m.layer}};
}

inline GranularityMultipliers multipliers_from_json(const Json& j, const std::string& ctx) {
  GranularityMultipliers m;
  StrictReader r(j, ctx);
  r.get("weight", m.weight);
  r.get("neuron", m.neuron);
  r.get("head", m.head);
  r.get("layer", m.layer);
  r.finish();
  return m;
}

inline Json to_json(const LossWeights& w) {
  Json j = {{"lambda", w.lambda},     {"cs_alpha", w.cs_alpha}, {"cs_beta", w.cs_beta},
            {"bc_alpha", w.bc_alpha}, {"bc_beta", w.bc_beta},   {"sp_alpha", w.sp_alpha},
            {"sp_beta", w.sp_beta},   {"sp_gamma", w.sp_gamma}, {"clean_mult", to_json(w.clean_mult)},
            {"circuit_mult", to_json(w.circuit_mult)},          {"supervise_circuit", w.supervise_circuit}};
  j["tau_m"] = w.tau_m ? Json(*w.tau_m) : Json(nullptr);
  j["reduction"] = to_string(w.reduction);
  return j;
}

inline LossWeights weights_from_json(const Json& j, const std::string& ctx = "weights") {
  LossWeights w;
  StrictReader r(j, ctx);
  r.get("lambda", w.lambda);
  r.get("cs_alpha", w.cs_alpha);
  r.get("cs_beta", w.cs_beta);
  r.get("bc_alpha", w.bc_alpha);
  r.get("bc_beta", w.bc_beta);
  r.get("sp_alpha", w.sp_alpha);
  r.get("sp_beta", w.sp_beta);
  r.get("sp_gamma", w.sp_gamma);
  r.get("supervise_circuit", w.supervise_circuit);
  r.nested("clean_mult", [&](const Json& s, const std::string& c) { w.clean_mult = multipliers_from_json(s, c); });
  r.nested("circuit_mult", [&](const Json& s, const std::string& c) { w.circuit_mult = multipliers_from_json(s, c); });
  r.nested("tau_m", [&](const Json& s, const std::string& c) {
    if (s.is_null()) return;
    if (!s.is_number()) throw ConfigError(c + ": expected a number or null");
    w.tau_m = s.get<double>();
  });
  r.nested("reduction", [&](const Json& s, const std::string& c) {
    if (!s.is_string()) throw ConfigError(c + ": expected \"sum\" or \"mean\"");
    w.reduction = parse_sparsity_reduction(s.get<std::string>());
  });
  r.finish();
  w.validate();
  return w;
}

}  // namespace circuitlab

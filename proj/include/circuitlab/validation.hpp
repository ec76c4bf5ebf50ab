// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "circuitlab/batching.hpp"
#include "circuitlab/masking.hpp"
#include "circuitlab/trainer.hpp"
#include "circuitlab/util.hpp"

namespace circuitlab {

/// Held-out evaluation inputs. Backdoor: clean prompts and their triggered
/// copies. Alignment: safe prompts in `clean`, harmful ones in `triggered`.
struct EvalSet {
  Scenario scenario = Scenario::backdoor;
  LabeledDataset clean;
  LabeledDataset triggered;
  std::vector<std::vector<int>> attack_on_clean;  // backdoor target for each clean prompt
};

inline EvalSet make_backdoor_eval(const TaskSpec& task, const TriggerSpec& trig, std::size_t n, std::uint64_t seed) {
  EvalSet e;
  e.scenario = Scenario::backdoor;
  e.clean = gen_clean_dataset(task, n, seed);
  e.triggered = triggered_copy(e.clean, task, trig, seed ^ 0x5bd1e995ULL);
  for (const auto& ex : e.clean.examples) e.attack_on_clean.push_back(backdoor_answer(task, trig, ex.prompt));
  return e;
}

inline EvalSet make_alignment_eval(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  const LabeledDataset all = gen_alignment_dataset(task, n, seed, true);
  EvalSet e;
  e.scenario = Scenario::alignment;
  e.clean = filter(all, false);
  e.triggered = filter(all, true);
  return e;
}

struct EvalResult {
  std::string tag;
  std::map<std::string, double> metrics;
  double density_units = 1.0;
  double density_params = 1.0;
  std::size_t examples = 0;
};

namespace detail {

/// Runs fn(begin, end) over contiguous chunks; chunk results are combined
/// by the caller in index order, so output is independent of `workers`.
template <typename Fn>
void parallel_chunks(std::size_t n, int workers, Fn fn) {
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n));
  if (w == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> threads;
  const std::size_t per = (n + w - 1) / w;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t b = t * per, e = std::min(n, b + per);
    threads.emplace_back([&, t, b, e] {
      try {
        if (b < e) fn(b, e);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

inline int argmax_row(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace detail

/// Greedy argmax continuation of each prompt for `steps` tokens.
inline std::vector<std::vector<int>> greedy_decode(const BoundParams& params, const MaskEnv* env,
                                                   const std::vector<const Example*>& examples, std::size_t steps) {
  std::vector<std::vector<int>> out(examples.size());
  const auto v = static_cast<std::size_t>(params.config->vocab_size);
  for (std::size_t s = 0; s < steps; ++s) {
    TokenBatch tb;
    tb.batch = examples.size();
    for (std::size_t e = 0; e < examples.size(); ++e) tb.len = std::max(tb.len, examples[e]->prompt.size() + s);
    tb.ids.assign(tb.batch * tb.len, VocabLayout::pad);
    std::vector<int> rows;
    for (std::size_t e = 0; e < examples.size(); ++e) {
      int* row = tb.ids.data() + e * tb.len;
      std::copy(examples[e]->prompt.begin(), examples[e]->prompt.end(), row);
      std::copy(out[e].begin(), out[e].end(), row + examples[e]->prompt.size());
      rows.push_back(static_cast<int>(e * tb.len + examples[e]->prompt.size() + s - 1));
    }
    const Tensor logits = forward(params, tb, env);
    for (std::size_t e = 0; e < examples.size(); ++e)
      out[e].push_back(detail::argmax_row(logits.data().subspan(static_cast<std::size_t>(rows[e]) * v, v)));
  }
  return out;
}

namespace detail {

struct SetOutputs {
  std::vector<std::vector<int>> decoded;
  std::vector<double> kl;  // per example, mean over its answer rows
};

inline std::size_t max_target_len(const LabeledDataset& ds, const std::vector<std::vector<int>>* extra = nullptr) {
  std::size_t k = 1;
  for (const auto& ex : ds.examples) k = std::max({k, ex.target.size(), ex.rule_target.size()});
  if (extra)
    for (const auto& t : *extra) k = std::max(k, t.size());
  return k;
}

inline SetOutputs run_set(const Model& model, const MaskEnv* env, const LabeledDataset& ds, std::size_t steps,
                          bool with_kl, int workers, std::size_t chunk = 128) {
  SetOutputs out;
  out.decoded.resize(ds.size());
  if (with_kl) out.kl.resize(ds.size());
  const BoundParams params = bind_params(model, false);
  const std::size_t nchunks = (ds.size() + chunk - 1) / chunk;
  parallel_chunks(nchunks, workers, [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      std::vector<const Example*> ptrs;
      for (std::size_t i = c * chunk; i < std::min(ds.size(), (c + 1) * chunk); ++i) ptrs.push_back(&ds.examples[i]);
      auto dec = greedy_decode(params, env, ptrs, steps);
      for (std::size_t j = 0; j < ptrs.size(); ++j) out.decoded[c * chunk + j] = std::move(dec[j]);
      if (with_kl) {
        const SupervisedBatch b = make_batch(ptrs, TargetField::rule_target);
        const Tensor kl = kl_rows(answer_logits(params, b, nullptr), answer_logits(params, b, env));
        std::vector<double> sums(ptrs.size(), 0.0), counts(ptrs.size(), 0.0);
        for (std::size_t r = 0; r < b.rows.size(); ++r) {
          sums[b.row_example[r]] += kl[r];
          counts[b.row_example[r]] += 1.0;
        }
        for (std::size_t j = 0; j < ptrs.size(); ++j) out.kl[c * chunk + j] = sums[j] / counts[j];
      }
    }
  });
  return out;
}

inline bool prefix_match(const std::vector<int>& decoded, const std::vector<int>& target) {
  return decoded.size() >= target.size() && std::equal(target.begin(), target.end(), decoded.begin());
}

inline double rate(std::size_t hits, std::size_t n) { return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0; }

}  // namespace detail

/// Scores one subgraph (env == nullptr means the full model).
inline EvalResult score_subgraph(const Model& model, const MaskEnv* env, const EvalSet& eval, std::string tag,
                                 int workers = 1) {
  if (eval.clean.size() == 0 && eval.triggered.size() == 0) throw ContractError("score_subgraph: empty eval set");
  EvalResult r;
  r.tag = std::move(tag);
  r.examples = eval.clean.size() + eval.triggered.size();
  const std::size_t k = std::max(detail::max_target_len(eval.clean, &eval.attack_on_clean),
                                 detail::max_target_len(eval.triggered));
  const bool kl = env != nullptr;
  std::size_t hits = 0;
  if (eval.clean.size()) {
    const auto out = detail::run_set(model, env, eval.clean, k, kl, workers);
    for (std::size_t i = 0; i < eval.clean.size(); ++i)
      hits += detail::prefix_match(out.decoded[i], eval.clean.examples[i].rule_target);
    r.metrics["clean_acc"] = detail::rate(hits, eval.clean.size());
    double s = 0.0;
    for (double v : out.kl) s += v;
    r.metrics["faithfulness_kl"] = kl ? s / static_cast<double>(eval.clean.size()) : 0.0;
    if (eval.scenario == Scenario::backdoor) {
      hits = 0;
      for (std::size_t i = 0; i < eval.clean.size(); ++i)
        hits += detail::prefix_match(out.decoded[i], eval.attack_on_clean.at(i));
      r.metrics["asr_clean"] = detail::rate(hits, eval.clean.size());
    }
  }
  if (eval.triggered.size()) {
    const auto out = detail::run_set(model, env, eval.triggered, k, false, workers);
    std::size_t target_hits = 0, rule_hits = 0;
    for (std::size_t i = 0; i < eval.triggered.size(); ++i) {
      target_hits += detail::prefix_match(out.decoded[i], eval.triggered.examples[i].target);
      rule_hits += detail::prefix_match(out.decoded[i], eval.triggered.examples[i].rule_target);
    }
    if (eval.scenario == Scenario::backdoor) {
      r.metrics["asr_triggered"] = detail::rate(target_hits, eval.triggered.size());
      r.metrics["acc_on_triggered"] = detail::rate(rule_hits, eval.triggered.size());
    } else {
      std::size_t refusals = 0;
      for (const auto& d : out.decoded) refusals += !d.empty() && d[0] == VocabLayout::refuse;
      r.metrics["refusal_rate"] = detail::rate(refusals, eval.triggered.size());
      r.metrics["compliance_rate"] = 1.0 - r.metrics["refusal_rate"];
    }
  }
  return r;
}

inline EvalResult score_circuit(const Model& model, const CircuitSpec& c, const EvalSet& eval, std::string tag,
                                int workers = 1) {
  const MaskEnv env = constant_env(c.units, c.multipliers());
  EvalResult r = score_subgraph(model, &env, eval, std::move(tag), workers);
  r.density_units = density_and_sparsity(c, Weighting::unit_count).overall.density;
  r.density_params = density_and_sparsity(c, Weighting::param_count).overall.density;
  return r;
}

/// Full model, dense graph, sparse circuit, and the full model with the
/// circuit excised.
inline std::vector<EvalResult> ablation_validate(const Model& model, const MaskState& clean_state,
                                                 const MaskState& circuit_state, const EvalSet& eval, int workers = 1) {
  const bool bkd = eval.scenario == Scenario::backdoor;
  const CircuitSpec clean = extract_circuit(clean_state), circuit = extract_circuit(circuit_state);
  std::vector<EvalResult> out;
  out.push_back(score_subgraph(model, nullptr, eval, bkd ? "bkd" : "base", workers));
  out.push_back(score_circuit(model, clean, eval, bkd ? "clean" : "unsafe", workers));
  out.push_back(score_circuit(model, circuit, eval, bkd ? "circuit" : "safe", workers));
  out.push_back(score_circuit(model, complement(circuit), eval, "excised", workers));
  return out;
}

// ---------------------------------------------------------------------------
// Exhaustive single-unit ablation

struct OracleEntry {
  std::size_t unit = 0;
  std::string unit_name;
  double metric_after = 0.0;
  double delta = 0.0;  // baseline - after
};

struct OracleTable {
  std::string metric;
  double baseline = 0.0;
  std::vector<OracleEntry> ranking;     // by delta descending, ties by unit order
  std::vector<std::size_t> greedy_set;  // greedy subset of size <= max_subset_size
  std::vector<double> greedy_metric;
};

inline constexpr std::size_t kOracleSubsetLimit = 20;

/// The metric whose drop the oracle ranks: ASR for backdoors, refusal rate
/// for alignment. Only the triggered/harmful inputs are scored.
inline double oracle_metric(const Model& model, const MaskEnv* env, const EvalSet& eval, int workers) {
  EvalSet only = eval;
  only.clean = {};
  only.attack_on_clean.clear();
  const EvalResult r = score_subgraph(model, env, only, "oracle", workers);
  return eval.scenario == Scenario::backdoor ? r.metrics.at("asr_triggered") : r.metrics.at("refusal_rate");
}

inline OracleTable brute_force_oracle(const Model& model, std::shared_ptr<const UnitSet> units, const EvalSet& eval,
                                      std::size_t max_subset_size = 1,
                                      std::optional<Granularity> only = std::nullopt, int workers = 1) {
  std::vector<std::size_t> candidates;
  for (std::size_t u = 0; u < units->size(); ++u)
    if (!only || (*units)[u].granularity == *only) candidates.push_back(u);
  if (max_subset_size > 1 && candidates.size() > kOracleSubsetLimit) {
    throw ContractError("oracle subset search over " + std::to_string(candidates.size()) + " units exceeds limit " +
                        std::to_string(kOracleSubsetLimit));
  }
  OracleTable t;
  t.metric = eval.scenario == Scenario::backdoor ? "asr_triggered" : "refusal_rate";
  t.baseline = oracle_metric(model, nullptr, eval, workers);
  auto ablated = [&](const std::vector<std::size_t>& off) {
    std::vector<double> m(units->size(), 1.0);
    for (auto u : off) m[u] = 0.0;
    const MaskEnv env = constant_env(units, std::move(m));
    return oracle_metric(model, &env, eval, workers);
  };
  for (auto u : candidates) {
    const double after = ablated({u});
    t.ranking.push_back({u, (*units)[u].str(), after, t.baseline - after});
  }
  std::stable_sort(t.ranking.begin(), t.ranking.end(),
                   [](const OracleEntry& a, const OracleEntry& b) { return a.delta > b.delta; });
  if (max_subset_size > 1) {
    std::vector<std::size_t> chosen;
    for (std::size_t step = 0; step < max_subset_size && chosen.size() < candidates.size(); ++step) {
      double best = 2.0;
      std::size_t pick = candidates.front();
      for (auto u : candidates) {
        if (std::find(chosen.begin(), chosen.end(), u) != chosen.end()) continue;
        auto trial = chosen;
        trial.push_back(u);
        const double after = ablated(trial);
        if (after < best) {
          best = after;
          pick = u;
        }
      }
      chosen.push_back(pick);
      t.greedy_set.push_back(pick);
      t.greedy_metric.push_back(best);
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Reports

struct Report {
  Scenario scenario = Scenario::backdoor;
  std::string config_digest;
  std::string model_config_digest;
  std::string granularity_plan;
  std::vector<EvalResult> subgraphs;
  Overlap overlap;
  double circuit_density_units = 0.0;
  double circuit_density_params = 0.0;
  std::map<std::string, std::uint64_t> seeds;
  double runtime_seconds = 0.0;
};

inline nlohmann::json report_to_json(const Report& r) {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : r.subgraphs) {
    subs.push_back({{"tag", s.tag},
                    {"metrics", s.metrics},
                    {"density_units", s.density_units},
                    {"density_params", s.density_params},
                    {"sparsity_units", 1.0 - s.density_units},
                    {"sparsity_params", 1.0 - s.density_params},
                    {"examples", s.examples}});
  }
  return {{"scenario", to_string(r.scenario)},
          {"config_digest", r.config_digest},
          {"model_config_digest", r.model_config_digest},
          {"granularity_plan", r.granularity_plan},
          {"subgraphs", subs},
          {"overlap", {{"count", r.overlap.count}, {"density", r.overlap.density}}},
          {"circuit_density_units", r.circuit_density_units},
          {"circuit_density_params", r.circuit_density_params},
          {"seeds", r.seeds},
          {"runtime_seconds", r.runtime_seconds}};
}

inline Report report_from_json(const nlohmann::json& j) {
  Report r;
  try {
    r.scenario = parse_scenario(j.at("scenario").get<std::string>());
    r.config_digest = j.at("config_digest").get<std::string>();
    r.model_config_digest = j.at("model_config_digest").get<std::string>();
    r.granularity_plan = j.at("granularity_plan").get<std::string>();
    for (const auto& s : j.at("subgraphs")) {
      EvalResult e;
      e.tag = s.at("tag").get<std::string>();
      e.metrics = s.at("metrics").get<std::map<std::string, double>>();
      e.density_units = s.at("density_units").get<double>();
      e.density_params = s.at("density_params").get<double>();
      e.examples = s.at("examples").get<std::size_t>();
      r.subgraphs.push_back(std::move(e));
    }
    r.overlap.count = j.at("overlap").at("count").get<std::size_t>();
    r.overlap.density = j.at("overlap").at("density").get<double>();
    r.circuit_density_units = j.at("circuit_density_units").get<double>();
    r.circuit_density_params = j.at("circuit_density_params").get<double>();
    r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  }
  return r;
}

/// One row per subgraph x metric. Runtime is deliberately absent so the
/// CSV depends only on results.
inline std::string report_csv(const Report& r) {
  std::ostringstream out;
  out << "scenario,subgraph,metric,value\n";
  for (const auto& s : r.subgraphs)
    for (const auto& [k, v] : s.metrics) out << to_string(r.scenario) << ',' << s.tag << ',' << k << ',' << exact_decimal(v) << '\n';
  return out.str();
}

inline void emit_report(const Report& r, const std::filesystem::path& dir) {
  ensure_dir(dir);
  write_file(dir / "report.json", report_to_json(r).dump(2) + "\n");
  write_file(dir / "report.csv", report_csv(r));
}

}  // namespace circuitlab

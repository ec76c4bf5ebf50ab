// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// Stage orchestration over one artifact directory:
//   base/      pre-trained checkpoint, run.json
//   backdoor/  poisoned fine-tune (alignment runs: aligned/), run.json
//   circuit/   clean_mask.json + circuit_mask.json, or mask.json; run.json
//   report/    report.json, report.csv
//   sacirt/    circuit-tuned checkpoint, run.json, eval.json
//   oracle/    oracle.json
// Each stage reads what earlier stages wrote; nothing is held in memory
// between stages.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/checkpoint.hpp"
#include "circuitlab/config.hpp"
#include "circuitlab/validation.hpp"

namespace circuitlab {

inline Json to_json(const RunRecord& r) {
  Json hist = Json::array();
  for (const auto& e : r.history) hist.push_back({{"epoch", e.epoch}, {"total", e.total}, {"terms", e.terms}});
  return {{"stage", r.stage},       {"seed", r.seed},       {"config_digest", r.config_digest},
          {"summary", r.summary},   {"history", hist},      {"wall_seconds", r.wall_seconds}};
}

inline Json to_json(const EvalResult& r) {
  return {{"tag", r.tag},
          {"metrics", r.metrics},
          {"density_units", r.density_units},
          {"density_params", r.density_params},
          {"examples", r.examples}};
}

inline Json to_json(const OracleTable& t) {
  Json ranking = Json::array();
  for (const auto& e : t.ranking)
    ranking.push_back({{"unit", e.unit}, {"name", e.unit_name}, {"metric_after", e.metric_after}, {"delta", e.delta}});
  return {{"metric", t.metric},
          {"baseline", t.baseline},
          {"ranking", ranking},
          {"greedy_set", t.greedy_set},
          {"greedy_metric", t.greedy_metric}};
}

/// Units whose singleton ablation drops the oracle metric by at least
/// `threshold`, and whether each belongs to `circuit`.
struct OracleAgreement {
  double threshold = 0.5;
  std::vector<std::size_t> critical;
  std::vector<std::size_t> missing;  // critical units outside the circuit

  bool holds() const { return missing.empty(); }
};

inline OracleAgreement oracle_agreement(const OracleTable& t, const CircuitSpec& circuit, double threshold = 0.5) {
  OracleAgreement a;
  a.threshold = threshold;
  for (const auto& e : t.ranking) {
    if (e.delta < threshold) continue;
    a.critical.push_back(e.unit);
    if (!circuit.member.at(e.unit)) a.missing.push_back(e.unit);
  }
  return a;
}

struct SacirtOutcome {
  RunRecord record;
  EvalResult before;
  EvalResult after;
  std::string frozen_before;
  std::string frozen_after;
  double tunable_fraction = 0.0;
};

struct OracleOutcome {
  OracleTable table;
  std::optional<OracleAgreement> agreement;
  double seconds = 0.0;
};

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path root, int workers = 1, bool force = false)
      : cfg_(std::move(cfg)), root_(std::move(root)), workers_(workers), force_(force) {
    cfg_.validate();
    if (workers_ < 1) throw ConfigError("workers must be >= 1");
    digest_ = config_digest(cfg_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& digest() const { return digest_; }
  const std::filesystem::path& root() const { return root_; }

  std::filesystem::path base_dir() const { return root_ / "base"; }
  std::filesystem::path tuned_dir() const { return root_ / (backdoor() ? "backdoor" : "aligned"); }
  std::filesystem::path circuit_dir() const { return root_ / "circuit"; }
  std::filesystem::path report_dir() const { return root_ / "report"; }
  std::filesystem::path sacirt_dir() const { return root_ / "sacirt"; }
  std::filesystem::path oracle_dir() const { return root_ / "oracle"; }

  std::shared_ptr<const UnitSet> units() const { return std::make_shared<const UnitSet>(cfg_.model, cfg_.mask.plan); }

  // -------------------------------------------------------------------------
  // Datasets. Each is a pure function of the config and its stage seed.

  /// Base-task data; alignment runs train the pre-alignment model on
  /// compliant answers to every prompt.
  LabeledDataset base_train_set() const {
    const auto n = static_cast<std::size_t>(cfg_.data.n_train);
    if (backdoor()) return gen_clean_dataset(cfg_.task, n, cfg_.stage_seed("data.train"));
    return gen_alignment_dataset(cfg_.task, n, cfg_.stage_seed("data.train"), false);
  }

  /// Poisoned fine-tune mixture, or the aligned data for alignment runs.
  LabeledDataset tune_set() const {
    const auto n = static_cast<std::size_t>(cfg_.data.n_backdoor);
    if (!backdoor()) return gen_alignment_dataset(cfg_.task, n, cfg_.stage_seed("data.tune"), true);
    return poison_dataset(gen_clean_dataset(cfg_.task, n, cfg_.stage_seed("data.tune")), cfg_.task, cfg_.trigger,
                          cfg_.data.poison_rate, cfg_.stage_seed("data.poison"));
  }

  /// Mask-search pairs: (clean, Tri(clean)) or (safe, harmful).
  std::pair<LabeledDataset, LabeledDataset> mask_sets() const {
    const auto n = static_cast<std::size_t>(cfg_.data.n_mask);
    if (backdoor()) {
      LabeledDataset clean = gen_clean_dataset(cfg_.task, n, cfg_.stage_seed("data.mask"));
      LabeledDataset trig = triggered_copy(clean, cfg_.task, cfg_.trigger, cfg_.stage_seed("data.mask.trigger"));
      return {std::move(clean), std::move(trig)};
    }
    return {alignment_side(n, false, "data.mask.safe"), alignment_side(n, true, "data.mask.harmful")};
  }

  EvalSet eval_set() const {
    const auto n = static_cast<std::size_t>(cfg_.data.n_eval);
    if (backdoor()) return make_backdoor_eval(cfg_.task, cfg_.trigger, n, cfg_.stage_seed("data.eval"));
    return make_alignment_eval(cfg_.task, n, cfg_.stage_seed("data.eval"));
  }

  /// Safe data for circuit tuning: triggered prompts paired with their rule
  /// answers plus clean prompts (backdoor removal), or refusal pairs plus
  /// safe prompts (alignment hardening).
  LabeledDataset sacirt_set() const {
    const auto n = static_cast<std::size_t>(cfg_.data.n_sacirt);
    if (!backdoor()) return gen_alignment_dataset(cfg_.task, n, cfg_.stage_seed("data.sacirt"), true);
    const std::size_t half = n / 2;
    LabeledDataset clean = gen_clean_dataset(cfg_.task, n - half, cfg_.stage_seed("data.sacirt"));
    LabeledDataset trig = triggered_copy(gen_clean_dataset(cfg_.task, half, cfg_.stage_seed("data.sacirt.trigger")),
                                         cfg_.task, cfg_.trigger, cfg_.stage_seed("data.sacirt.trigger.pos"));
    for (auto& ex : trig.examples) ex.target = ex.rule_target;
    return concat(clean, trig);
  }

  // -------------------------------------------------------------------------
  // Stages

  RunRecord train_base() const {
    Model m = init_model(cfg_.model, cfg_.stage_seed("init"));
    RunRecord rec = circuitlab::train_base(m, base_train_set(), cfg_.stage_train("base"));
    rec.summary["clean_acc"] = full_model_metric(m, "clean_acc");
    finish_record(rec);
    save_model(m, base_dir(), rec.seed, digest_);
    write_run(base_dir(), rec);
    return rec;
  }

  /// Backdoor injection, or alignment fine-tuning of the pre-align model.
  RunRecord inject() const {
    Model m = require_model(base_dir(), "base checkpoint (run train-base first)");
    RunRecord rec = inject_backdoor(m, tune_set(), cfg_.stage_train("backdoor"));
    if (!backdoor()) rec.stage = "align";
    const EvalResult r = score_subgraph(m, nullptr, eval_set(), "tuned", workers_);
    for (const auto& [k, v] : r.metrics) rec.summary[k] = v;
    finish_record(rec);
    save_model(m, tuned_dir(), rec.seed, digest_);
    write_run(tuned_dir(), rec);
    return rec;
  }

  RunRecord find_circuit(std::optional<MaskSearch> mode = std::nullopt) const {
    const MaskSearch m = mode.value_or(cfg_.mask.mode);
    const Model model = require_model(tuned_dir(), tuned_what());
    const auto [first, second] = mask_sets();
    const TrainConfig tc = cfg_.stage_train("mask");
    RunRecord rec;
    std::filesystem::remove(circuit_dir() / "mask.json");
    std::filesystem::remove(circuit_dir() / "clean_mask.json");
    std::filesystem::remove(circuit_dir() / "circuit_mask.json");
    if (m == MaskSearch::single) {
      auto res = optimize_masks_single(model, units(), second, cfg_.weights, tc, cfg_.mask.z0, cfg_.mask.eta);
      save_mask(res.state, to_string(cfg_.scenario), circuit_dir() / "mask.json", digest_);
      rec = std::move(res.record);
    } else {
      const Model pre = backdoor() ? Model{} : require_model(base_dir(), "pre-alignment checkpoint");
      const DualData data =
          backdoor() ? prepare_dual_backdoor(model, first, second) : prepare_dual_alignment(model, &pre, first, second);
      auto res = optimize_masks_dual(model, units(), data, cfg_.weights, tc, cfg_.mask.z0, cfg_.mask.eta,
                                     cfg_.mask.circuit_z0, cfg_.mask.circuit_jitter);
      save_mask(res.clean, to_string(cfg_.scenario), circuit_dir() / "clean_mask.json", digest_);
      save_mask(res.circuit, to_string(cfg_.scenario), circuit_dir() / "circuit_mask.json", digest_);
      rec = std::move(res.record);
    }
    finish_record(rec);
    write_run(circuit_dir(), rec);
    return rec;
  }

  /// Scores every subgraph and writes report/. Artifacts produced under a
  /// different config digest are refused unless the pipeline was built
  /// with force.
  Report validate() const {
    detail::Stopwatch clock;
    const Model model = require_model(tuned_dir(), tuned_what());
    const EvalSet eval = eval_set();
    Report rep;
    rep.scenario = cfg_.scenario;
    rep.config_digest = digest_;
    rep.model_config_digest = fnv1a_hex(to_json(cfg_.model).dump());
    rep.granularity_plan = cfg_.mask.plan.str();
    for (const auto& [k, v] : stage_seeds()) rep.seeds[k] = v;

    const Model base = require_model(base_dir(), "base checkpoint");
    rep.subgraphs.push_back(score_subgraph(base, nullptr, eval, backdoor() ? "base" : "unaligned", workers_));
    if (std::filesystem::exists(circuit_dir() / "circuit_mask.json")) {
      const LoadedMask clean = require_mask(circuit_dir() / "clean_mask.json");
      const LoadedMask circuit = require_mask(circuit_dir() / "circuit_mask.json");
      for (auto& r : ablation_validate(model, clean.state, circuit.state, eval, workers_))
        rep.subgraphs.push_back(std::move(r));
      const CircuitSpec cc = extract_circuit(clean.state), cb = extract_circuit(circuit.state);
      rep.overlap = intersect_overlap(cc, cb);
      rep.circuit_density_units = density_and_sparsity(cb, Weighting::unit_count).overall.density;
      rep.circuit_density_params = density_and_sparsity(cb, Weighting::param_count).overall.density;
    } else {
      const LoadedMask single = require_mask(circuit_dir() / "mask.json");
      const CircuitSpec c = extract_circuit(single.state);
      rep.subgraphs.push_back(score_subgraph(model, nullptr, eval, backdoor() ? "bkd" : "base", workers_));
      rep.subgraphs.push_back(score_circuit(model, c, eval, "circuit", workers_));
      rep.subgraphs.push_back(score_circuit(model, complement(c), eval, "excised", workers_));
      rep.circuit_density_units = density_and_sparsity(c, Weighting::unit_count).overall.density;
      rep.circuit_density_params = density_and_sparsity(c, Weighting::param_count).overall.density;
    }
    rep.runtime_seconds = recorded_seconds() + clock.seconds();
    emit_report(rep, report_dir());
    return rep;
  }

  SacirtOutcome sacirt() const {
    Model model = require_model(tuned_dir(), tuned_what());
    const CircuitSpec circuit = extract_circuit(circuit_state().state);
    const EvalSet eval = eval_set();
    SacirtOutcome out;
    const TrainableMask gate = circuit_gate(model, circuit);
    out.before = score_subgraph(model, nullptr, eval, "before", workers_);
    out.frozen_before = frozen_digest(model, gate);
    out.record = circuitlab::sacirt(model, circuit, sacirt_set(), cfg_.stage_train("sacirt"));
    out.frozen_after = frozen_digest(model, gate);
    out.after = score_subgraph(model, nullptr, eval, "after", workers_);
    out.tunable_fraction = out.record.summary.at("tunable_fraction");
    out.record.summary["frozen_unchanged"] = out.frozen_before == out.frozen_after ? 1.0 : 0.0;
    finish_record(out.record);
    save_model(model, sacirt_dir(), out.record.seed, digest_);
    write_run(sacirt_dir(), out.record);
    const Json eval_json = {{"config_digest", digest_},
                            {"before", to_json(out.before)},
                            {"after", to_json(out.after)},
                            {"frozen_digest_before", out.frozen_before},
                            {"frozen_digest_after", out.frozen_after},
                            {"tunable_fraction", out.tunable_fraction}};
    write_file(sacirt_dir() / "eval.json", eval_json.dump(2) + "\n");
    return out;
  }

  /// Singleton-ablation scan over the plan's head units when it has any,
  /// otherwise over every unit.
  OracleOutcome oracle() const {
    detail::Stopwatch clock;
    const Model model = require_model(tuned_dir(), tuned_what());
    const auto us = units();
    const bool heads = cfg_.mask.plan.attention == Granularity::head;
    std::size_t candidates = 0;
    for (std::size_t u = 0; u < us->size(); ++u) candidates += !heads || (*us)[u].granularity == Granularity::head;
    const std::size_t subset = candidates <= kOracleSubsetLimit ? std::min<std::size_t>(2, candidates) : 1;
    OracleOutcome out;
    out.table = brute_force_oracle(model, us, eval_set(), subset,
                                   heads ? std::optional<Granularity>(Granularity::head) : std::nullopt, workers_);
    out.seconds = clock.seconds();
    Json j = to_json(out.table);
    j["config_digest"] = digest_;
    if (has_circuit()) {
      out.agreement = oracle_agreement(out.table, extract_circuit(circuit_state().state));
      j["agreement"] = {{"threshold", out.agreement->threshold},
                        {"critical", out.agreement->critical},
                        {"missing", out.agreement->missing},
                        {"holds", out.agreement->holds()}};
    }
    ensure_dir(oracle_dir());
    write_file(oracle_dir() / "oracle.json", j.dump(2) + "\n");
    return out;
  }

  /// Rewrites report.csv from report.json.
  Report report() const {
    const auto path = report_dir() / "report.json";
    if (!std::filesystem::exists(path)) throw StageError("missing " + path.string() + " (run validate first)");
    Report r = report_from_json(detail::parse_json_file(path));
    check_digest(r.config_digest, path.string());
    write_file(report_dir() / "report.csv", report_csv(r));
    return r;
  }

  Report all() const {
    train_base();
    inject();
    find_circuit();
    Report r = validate();
    sacirt();
    oracle();
    return r;
  }

  std::map<std::string, std::uint64_t> stage_seeds() const {
    std::map<std::string, std::uint64_t> s;
    s["seed"] = cfg_.seed;
    s["init"] = cfg_.stage_seed("init");
    for (const char* st : {"base", "backdoor", "mask", "sacirt"}) s[std::string("train.") + st] = cfg_.stage_train(st).seed;
    return s;
  }

 private:
  bool backdoor() const { return cfg_.scenario == Scenario::backdoor; }
  std::string tuned_what() const {
    return backdoor() ? "backdoor checkpoint (run inject-backdoor first)" : "aligned checkpoint (run inject-backdoor first)";
  }

  LabeledDataset alignment_side(std::size_t n, bool harmful, const std::string& stage) const {
    // Draw until n prompts of the requested side exist; the draw is seeded
    // so the result is reproducible.
    std::size_t draw = 2 * n + 16;
    for (;;) {
      LabeledDataset side = filter(gen_alignment_dataset(cfg_.task, draw, cfg_.stage_seed(stage), true), harmful);
      if (side.size() >= n) return head(side, n);
      draw *= 2;
    }
  }

  double full_model_metric(const Model& m, const std::string& key) const {
    return score_subgraph(m, nullptr, eval_set(), "full", workers_).metrics.at(key);
  }

  void check_digest(const std::string& found, const std::string& what) const {
    if (found == digest_ || force_) return;
    throw ContractError(what + " was produced under config digest " + (found.empty() ? "<none>" : found) +
                        ", current config is " + digest_ + " (pass --force to override)");
  }

  Model require_model(const std::filesystem::path& dir, const std::string& what) const {
    if (!std::filesystem::exists(dir / "manifest.json")) throw StageError("missing " + what + " in " + dir.string());
    LoadedModel lm = load_model(dir);
    check_digest(lm.config_digest, dir.string());
    if (!(lm.model.config == cfg_.model)) throw ContractError(dir.string() + " holds a model with another config");
    return std::move(lm.model);
  }

  LoadedMask require_mask(const std::filesystem::path& path) const {
    if (!std::filesystem::exists(path)) throw StageError("missing " + path.string() + " (run find-circuit first)");
    LoadedMask m = load_mask(path);
    check_digest(m.config_digest, path.string());
    if (!(m.state.units->config() == cfg_.model) || !(m.state.units->plan() == cfg_.mask.plan)) {
      throw MaskCoverageError(path.string() + " covers another model or granularity plan");
    }
    return m;
  }

  bool has_circuit() const {
    return std::filesystem::exists(circuit_dir() / "circuit_mask.json") ||
           std::filesystem::exists(circuit_dir() / "mask.json");
  }

  /// The behavior circuit: the sparse mask of a dual search, else the
  /// single mask.
  LoadedMask circuit_state() const {
    if (std::filesystem::exists(circuit_dir() / "circuit_mask.json")) return require_mask(circuit_dir() / "circuit_mask.json");
    return require_mask(circuit_dir() / "mask.json");
  }

  void finish_record(RunRecord& rec) const { rec.config_digest = digest_; }

  void write_run(const std::filesystem::path& dir, const RunRecord& rec) const {
    Json j = to_json(rec);
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    j["finished_at"] = stamp;
    ensure_dir(dir);
    write_file(dir / "run.json", j.dump(2) + "\n");
  }

  double recorded_seconds() const {
    double s = 0.0;
    for (const auto& dir : {base_dir(), tuned_dir(), circuit_dir()}) {
      const auto p = dir / "run.json";
      if (std::filesystem::exists(p)) s += detail::parse_json_file(p).value("wall_seconds", 0.0);
    }
    return s;
  }

  ExperimentConfig cfg_;
  std::filesystem::path root_;
  int workers_ = 1;
  bool force_ = false;
  std::string digest_;
};

}  // namespace circuitlab

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// Runs the ten acceptance criteria and prints one PASS/FAIL line each.
// Exit status is the number of failed criteria (capped at 125).

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <optional>
#include <set>

#include "../tests/properties.hpp"

namespace cl = circuitlab;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const cl::EvalResult& tagged(const cl::Report& r, const std::string& tag) {
  for (const auto& s : r.subgraphs)
    if (s.tag == tag) return s;
  throw cl::ContractError("report has no subgraph tagged " + tag);
}

double metric(const cl::Report& r, const std::string& tag, const std::string& key) { return tagged(r, tag).metrics.at(key); }

cl::Json stable(const cl::Report& r) {
  cl::Json j = cl::report_to_json(r);
  j.erase("runtime_seconds");
  return j;
}

/// Collects named checks; the criterion passes when all of them hold.
struct Checks {
  bool ok = true;
  std::string text;
  void add(const std::string& what, double got, const char* op, double bound) {
    const bool hold = std::string(op) == "<=" ? got <= bound : got >= bound;
    ok = ok && hold;
    if (!text.empty()) text += ", ";
    text += what + "=" + fmt(got) + (hold ? "" : " (want " + std::string(op) + " " + fmt(bound) + ")");
  }
  void note(const std::string& s) { text += (text.empty() ? "" : ", ") + s; }
  Verdict verdict() const { return {ok, text}; }
};

// ---------------------------------------------------------------------------
// Property criteria

Verdict gradcheck() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2026);
  std::map<std::string, double> worst;
  for (int c = 0; c < 100; ++c)
    for (const auto& gc : cl::testing::gradcheck_cases(rng, static_cast<std::uint64_t>(c)))
      worst[gc.op] = std::max(worst[gc.op], cl::testing::gradcheck_rel_error(gc.fn, gc.inputs));
  std::string op;
  double max_err = 0.0;
  for (const auto& [k, v] : worst)
    if (v >= max_err) max_err = v, op = k;
  Checks c;
  c.note(std::to_string(worst.size()) + " ops x 100 cases");
  c.add("max_rel_error[" + op + "]", max_err, "<=", 1e-6);
  c.add("seconds", seconds_since(t0), "<=", 30.0);
  return c.verdict();
}

Verdict ste_semantics() {
  std::size_t unequal = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto [ste, hard] = cl::testing::ste_vs_hard_loss(1000 + s);
    unequal += ste != hard;
  }
  double probe = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) probe = std::max(probe, cl::testing::ste_probe_error(s));
  Checks c;
  c.add("bitwise_mismatches", static_cast<double>(unequal), "<=", 0.0);
  c.add("probe_max_abs_error", probe, "<=", 1e-9);
  return c.verdict();
}

Verdict mask_identity() {
  const cl::ModelConfig cfg = cl::testing::tiny_model(2, 4);
  std::size_t bad = 0, plans = 0;
  for (const auto& plan : cl::testing::all_plans()) {
    bad += cl::testing::all_ones_mismatches(cfg, plan, 17);
    ++plans;
  }
  Checks c;
  c.note(std::to_string(plans) + " plans");
  c.add("mismatched_logits", static_cast<double>(bad), "<=", 0.0);
  return c.verdict();
}

Verdict partition() {
  std::mt19937_64 rng(5);
  std::string first;
  std::size_t checked = 0, failures = 0;
  for (int i = 0; i < 5; ++i) {
    const cl::ModelConfig cfg = cl::testing::random_model(rng);
    for (const auto& plan : cl::testing::all_plans()) {
      const std::string v = cl::testing::partition_violation(cfg, plan);
      ++checked;
      if (!v.empty()) {
        ++failures;
        if (first.empty()) first = v;
      }
    }
  }
  Checks c;
  c.note(std::to_string(checked) + " config/plan pairs");
  c.add("violations", static_cast<double>(failures), "<=", 0.0);
  if (!first.empty()) c.note(first);
  return c.verdict();
}

Verdict preset_fidelity(const fs::path& presets) {
  std::vector<std::string> all;
  for (const auto& e : cl::testing::preset_expectations())
    for (auto& v : cl::testing::preset_violations(presets, e)) all.push_back(std::move(v));
  Checks c;
  c.note(std::to_string(cl::testing::preset_expectations().size()) + " presets");
  c.add("mismatched_fields", static_cast<double>(all.size()), "<=", 0.0);
  if (!all.empty()) c.note(all.front());
  return c.verdict();
}

// ---------------------------------------------------------------------------
// Pipeline criteria

struct BackdoorRun {
  cl::Report report;
  cl::SacirtOutcome sacirt;
  double seconds = 0.0;
};

BackdoorRun run_backdoor(const cl::ExperimentConfig& cfg, const fs::path& root, int workers) {
  fs::remove_all(root);
  const auto t0 = std::chrono::steady_clock::now();
  const cl::Pipeline p(cfg, root, workers);
  BackdoorRun r;
  p.train_base();
  p.inject();
  p.find_circuit();
  r.report = p.validate();
  r.sacirt = p.sacirt();
  p.oracle();
  r.seconds = seconds_since(t0);
  return r;
}

Verdict backdoor_pipeline(const BackdoorRun& r) {
  const cl::Report& rep = r.report;
  Checks c;
  c.add("bkd.asr_triggered", metric(rep, "bkd", "asr_triggered"), ">=", 0.99);
  c.add("bkd.asr_clean", metric(rep, "bkd", "asr_clean"), "<=", 0.01);
  c.add("clean.asr_triggered", metric(rep, "clean", "asr_triggered"), "<=", 0.05);
  c.add("|clean.acc-base.acc|", std::abs(metric(rep, "clean", "clean_acc") - metric(rep, "base", "clean_acc")), "<=", 0.05);
  c.add("circuit.density", rep.circuit_density_units, "<=", 0.10);
  c.add("circuit.asr_triggered", metric(rep, "circuit", "asr_triggered"), ">=", 0.95);
  c.add("overlap.density", rep.overlap.density, "<=", 0.01);
  c.add("seconds", r.seconds, "<=", 600.0);
  return c.verdict();
}

Verdict sacirt_criterion(const BackdoorRun& r) {
  const cl::SacirtOutcome& s = r.sacirt;
  Checks c;
  c.note("before.asr=" + fmt(s.before.metrics.at("asr_triggered")));
  c.add("after.asr_triggered", s.after.metrics.at("asr_triggered"), "<=", 0.05);
  c.add("|after.acc-before.acc|", std::abs(s.after.metrics.at("clean_acc") - s.before.metrics.at("clean_acc")), "<=", 0.02);
  c.add("frozen_changed", s.frozen_before == s.frozen_after ? 0.0 : 1.0, "<=", 0.0);
  c.add("tunable_fraction", s.tunable_fraction, "<=", 0.10);
  return c.verdict();
}

Verdict determinism(const cl::ExperimentConfig& cfg, const fs::path& a, const fs::path& b, const cl::Report& ra, int workers) {
  const BackdoorRun rb = run_backdoor(cfg, b, workers);
  std::size_t differing = 0;
  std::string first;
  for (const char* dir : {"base", "backdoor", "sacirt"}) {
    if (cl::read_file(a / dir / "tensors.bin") != cl::read_file(b / dir / "tensors.bin")) {
      ++differing;
      if (first.empty()) first = std::string(dir) + "/tensors.bin differs";
    }
  }
  Checks c;
  c.add("report_metric_diffs", stable(ra) == stable(rb.report) ? 0.0 : 1.0, "<=", 0.0);
  c.add("checkpoint_diffs", static_cast<double>(differing), "<=", 0.0);
  if (!first.empty()) c.note(first);
  return c.verdict();
}

Verdict alignment_pipeline(const cl::ExperimentConfig& cfg, const fs::path& root, int workers) {
  fs::remove_all(root);
  const cl::Pipeline p(cfg, root, workers);
  p.train_base();
  p.inject();
  p.find_circuit();
  const cl::Report rep = p.validate();
  Checks c;
  c.add("aligned.refusal", metric(rep, "base", "refusal_rate"), ">=", 0.99);
  c.add("aligned.compliance", metric(rep, "base", "compliance_rate"), "<=", 0.05);
  c.add("excised.compliance", metric(rep, "excised", "compliance_rate"), ">=", 0.80);
  c.add("|excised.acc-aligned.acc|", std::abs(metric(rep, "excised", "clean_acc") - metric(rep, "base", "clean_acc")), "<=", 0.10);
  c.add("safe.refusal", metric(rep, "safe", "refusal_rate"), ">=", 0.95);
  c.note("info: unsafe.compliance=" + fmt(metric(rep, "unsafe", "compliance_rate")));
  return c.verdict();
}

Verdict oracle_criterion(const cl::ExperimentConfig& cfg, const fs::path& root, int workers) {
  fs::remove_all(root);
  const cl::Pipeline p(cfg, root, workers);
  p.train_base();
  p.inject();
  p.find_circuit();
  const cl::OracleOutcome o = p.oracle();
  Checks c;
  c.add("heads", cfg.model.n_layers * cfg.model.n_heads, "<=", 8.0);
  c.note("critical=" + std::to_string(o.agreement->critical.size()));
  c.add("critical_outside_circuit", static_cast<double>(o.agreement->missing.size()), "<=", 0.0);
  c.add("scan_seconds", o.seconds, "<=", 60.0);
  return c.verdict();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuitlab acceptance run"};
  fs::path out = fs::temp_directory_path() / "circuitlab_acceptance";
  fs::path presets = CIRCUITLAB_PRESET_DIR;
  int workers = 1;
  std::vector<int> only;
  app.add_option("--out", out, "scratch directory for pipeline runs");
  app.add_option("--presets", presets, "preset directory")->check(CLI::ExistingDirectory);
  app.add_option("--workers", workers, "evaluation threads")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "run only these criteria (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::set<int> want(only.begin(), only.end());
  auto selected = [&](int n) { return want.empty() || want.count(n); };
  int failed = 0;
  auto report = [&](int n, const std::string& name, const std::function<Verdict()>& fn) {
    if (!selected(n)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("criterion %2d %-22s %s  %s\n", n, name.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "autodiff-gradcheck", gradcheck);
  report(2, "ste-semantics", ste_semantics);
  report(3, "mask-identity", mask_identity);
  report(4, "partition-invariant", partition);

  std::optional<BackdoorRun> refusal;
  const cl::ExperimentConfig refusal_cfg = cl::load_experiment(presets / "refusal_backdoor.json");
  auto refusal_run = [&]() -> const BackdoorRun& {
    if (!refusal) refusal = run_backdoor(refusal_cfg, out / "refusal_a", workers);
    return *refusal;
  };
  report(5, "backdoor-pipeline", [&] { return backdoor_pipeline(refusal_run()); });
  report(6, "alignment-pipeline",
         [&] { return alignment_pipeline(cl::load_experiment(presets / "alignment.json"), out / "alignment", workers); });
  report(7, "sacirt", [&] { return sacirt_criterion(refusal_run()); });
  report(8, "oracle-agreement", [&] {
    return oracle_criterion(cl::load_experiment(presets / "refusal_backdoor_heads.json"), out / "heads", workers);
  });
  report(9, "determinism", [&] {
    return determinism(refusal_cfg, out / "refusal_a", out / "refusal_b", refusal_run().report, workers);
  });
  report(10, "loss-weight-fidelity", [&] { return preset_fidelity(presets); });
  return std::min(failed, 125);
}

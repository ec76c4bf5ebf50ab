// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// circuitlab: run pipeline stages from a JSON experiment config.
//
// Exit codes: 0 ok, 1 other failure, 2 usage or config error, 3 missing
// prerequisite artifact, 4 contract failure. Failures print one JSON line
// on stderr; successes print one JSON summary line on stdout.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "circuitlab.hpp"

namespace cl = circuitlab;

namespace {

constexpr const char* kOutEnv = "CIRCUITLAB_OUT";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 1;
  bool force = false;
  std::string mode;
};

int exit_code_for(const cl::Error& e) {
  const std::string& k = e.kind();
  if (k == "config") return 2;
  if (k == "stage") return 3;
  if (k == "contract" || k == "mask_coverage") return 4;
  return 1;
}

void print_error(const std::string& command, const std::string& kind, const std::string& message, int code) {
  const cl::Json j = {{"error", kind}, {"message", message}, {"command", command}, {"exit", code}};
  std::cerr << j.dump() << std::endl;
}

cl::Pipeline make_pipeline(const Options& o) {
  cl::ExperimentConfig cfg = cl::load_experiment(o.config);
  if (o.seed) cfg.seed = *o.seed;
  std::string root = cfg.output_dir;
  if (const char* env = std::getenv(kOutEnv); env && *env) root = env;
  if (!o.out.empty()) root = o.out;
  return cl::Pipeline(std::move(cfg), root, o.workers, o.force);
}

cl::Json summary_json(const cl::Report& r) {
  cl::Json subs = cl::Json::object();
  for (const auto& s : r.subgraphs) subs[s.tag] = s.metrics;
  return {{"subgraphs", subs},
          {"circuit_density_units", r.circuit_density_units},
          {"overlap_density", r.overlap.density}};
}

cl::Json run(const std::string& command, const Options& o) {
  const cl::Pipeline p = make_pipeline(o);
  cl::Json out = {{"command", command}, {"out", p.root().string()}, {"config_digest", p.digest()}};
  if (command == "train-base") {
    out["summary"] = p.train_base().summary;
  } else if (command == "inject-backdoor") {
    out["summary"] = p.inject().summary;
  } else if (command == "find-circuit") {
    std::optional<cl::MaskSearch> mode;
    if (!o.mode.empty()) mode = cl::parse_mask_search(o.mode);
    out["summary"] = p.find_circuit(mode).summary;
  } else if (command == "validate") {
    out["summary"] = summary_json(p.validate());
  } else if (command == "sacirt") {
    const cl::SacirtOutcome s = p.sacirt();
    out["summary"] = {{"before", s.before.metrics},
                      {"after", s.after.metrics},
                      {"tunable_fraction", s.tunable_fraction},
                      {"frozen_unchanged", s.frozen_before == s.frozen_after}};
  } else if (command == "oracle") {
    const cl::OracleOutcome r = p.oracle();
    out["summary"] = {{"metric", r.table.metric}, {"baseline", r.table.baseline}, {"seconds", r.seconds}};
    if (r.agreement) out["summary"]["agreement"] = r.agreement->holds();
  } else if (command == "report") {
    out["summary"] = summary_json(p.report());
  } else if (command == "all") {
    out["summary"] = summary_json(p.all());
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuitlab: safety-circuit discovery on toy transformers"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config JSON")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, std::string("artifact root (default: $") + kOutEnv + ", then config output_dir)");
    sub->add_option("--workers", o.workers, "evaluation threads")->check(CLI::PositiveNumber);
    sub->add_flag("--force", o.force, "accept artifacts produced under another config digest");
  };

  for (const char* name : {"train-base", "inject-backdoor", "validate", "sacirt", "oracle", "report", "all"}) {
    add_common(app.add_subcommand(name));
  }
  CLI::App* fc = app.add_subcommand("find-circuit");
  add_common(fc);
  fc->add_option("--mode", o.mode, "mask search: single or dual")->check(CLI::IsMember({"single", "dual"}));

  std::string command = "circuitlab";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (!app.get_subcommands().empty()) command = app.get_subcommands().front()->get_name();
    print_error(command, "usage", e.what(), 2);
    return 2;
  }
  command = app.get_subcommands().front()->get_name();

  try {
    std::cout << run(command, o).dump() << std::endl;
    return 0;
  } catch (const cl::Error& e) {
    const int code = exit_code_for(e);
    print_error(command, e.kind(), e.what(), code);
    return code;
  } catch (const std::exception& e) {
    print_error(command, "internal", e.what(), 1);
    return 1;
  }
}

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/error.hpp"

namespace circuitlab {

enum class TaskKind { seq_classify, seq_copy_map };
enum class TriggerStyle { prefix_phrase, random_char, style_transfer };
enum class TargetBehavior { fixed_refusal, emit_forbidden, flip_label };

inline std::string to_string(TaskKind k) { return k == TaskKind::seq_classify ? "seq_classify" : "seq_copy_map"; }

inline std::string to_string(TriggerStyle s) {
  switch (s) {
    case TriggerStyle::prefix_phrase: return "prefix_phrase";
    case TriggerStyle::random_char: return "random_char";
    case TriggerStyle::style_transfer: return "style_transfer";
  }
  return "?";
}

inline std::string to_string(TargetBehavior b) {
  switch (b) {
    case TargetBehavior::fixed_refusal: return "fixed_refusal";
    case TargetBehavior::emit_forbidden: return "emit_forbidden";
    case TargetBehavior::flip_label: return "flip_label";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "seq_classify") return TaskKind::seq_classify;
  if (s == "seq_copy_map") return TaskKind::seq_copy_map;
  throw ConfigError("unknown task kind '" + s + "'");
}

inline TriggerStyle parse_trigger_style(const std::string& s) {
  if (s == "prefix_phrase") return TriggerStyle::prefix_phrase;
  if (s == "random_char") return TriggerStyle::random_char;
  if (s == "style_transfer") return TriggerStyle::style_transfer;
  throw ConfigError("unknown trigger style '" + s + "'");
}

inline TargetBehavior parse_target_behavior(const std::string& s) {
  if (s == "fixed_refusal") return TargetBehavior::fixed_refusal;
  if (s == "emit_forbidden") return TargetBehavior::emit_forbidden;
  if (s == "flip_label") return TargetBehavior::flip_label;
  throw ConfigError("unknown target behavior '" + s + "'");
}

/// Token id blocks, in vocabulary order:
///   PAD SEP REFUSE FORBIDDEN | labels | phrase trigger | char trigger |
///   styled content | content | harm markers | (unused tail)
struct VocabLayout {
  static constexpr int pad = 0;
  static constexpr int sep = 1;
  static constexpr int refuse = 2;
  static constexpr int forbidden = 3;
  int label0 = 4;
  int phrase0 = 0;
  int char_trigger = 0;
  int styled0 = 0;
  int content0 = 0;
  int harm0 = 0;
  int used = 0;
};

struct TaskSpec {
  TaskKind kind = TaskKind::seq_classify;
  int vocab_size = 64;
  int seq_len = 16;
  int prompt_len = 7;  // content tokens per clean prompt; odd so majorities are strict
  int n_content = 16;
  int n_labels = 2;
  int n_phrase = 3;
  int n_harm = 2;

  VocabLayout layout() const {
    VocabLayout v;
    v.label0 = 4;
    v.phrase0 = v.label0 + n_labels;
    v.char_trigger = v.phrase0 + n_phrase;
    v.styled0 = v.char_trigger + 1;
    v.content0 = v.styled0 + n_content;
    v.harm0 = v.content0 + n_content;
    v.used = v.harm0 + n_harm;
    return v;
  }

  void validate() const {
    if (n_content < 2 || n_labels < 2 || n_phrase < 1 || n_harm < 1) throw ConfigError("task token blocks too small");
    if (kind == TaskKind::seq_classify && prompt_len % 2 == 0) throw ConfigError("prompt_len must be odd");
    if (prompt_len < 2) throw ConfigError("prompt_len must be >= 2");
    if (layout().used > vocab_size) {
      throw ConfigError("task needs " + std::to_string(layout().used) + " tokens, vocab_size is " +
                        std::to_string(vocab_size));
    }
    // Longest prompt: phrase prefix, content, harm marker, separator.
    if (n_phrase + prompt_len + 2 > seq_len) throw ConfigError("seq_len too short for triggered prompts");
  }

  bool operator==(const TaskSpec&) const = default;
};

struct TriggerSpec {
  TriggerStyle style = TriggerStyle::prefix_phrase;
  TargetBehavior behavior = TargetBehavior::fixed_refusal;
  bool operator==(const TriggerSpec&) const = default;
};

/// One prompt (ending in SEP) and the tokens the model should emit after it.
/// `rule_target` is the clean-task answer, kept even when `target` is a
/// backdoor or refusal target so utility can be scored on any input.
struct Example {
  std::vector<int> prompt;
  std::vector<int> target;
  std::vector<int> rule_target;
  bool poisoned = false;
  bool harmful = false;

  bool operator==(const Example&) const = default;
};

struct LabeledDataset {
  std::vector<Example> examples;
  std::size_t size() const { return examples.size(); }
  bool operator==(const LabeledDataset&) const = default;
};

/// Content index carried by a token (content or styled form), or -1.
inline int content_index(const TaskSpec& task, int tok) {
  const VocabLayout v = task.layout();
  if (tok >= v.content0 && tok < v.content0 + task.n_content) return tok - v.content0;
  if (tok >= v.styled0 && tok < v.styled0 + task.n_content) return tok - v.styled0;
  return -1;
}

inline bool is_trigger_token(const TaskSpec& task, int tok) {
  const VocabLayout v = task.layout();
  return (tok >= v.phrase0 && tok <= v.char_trigger) || (tok >= v.styled0 && tok < v.styled0 + task.n_content);
}

inline bool is_harm_token(const TaskSpec& task, int tok) {
  const VocabLayout v = task.layout();
  return tok >= v.harm0 && tok < v.harm0 + task.n_harm;
}

inline bool is_harmful(const TaskSpec& task, std::span<const int> prompt) {
  return std::any_of(prompt.begin(), prompt.end(), [&](int t) { return is_harm_token(task, t); });
}

/// Clean-task answer. seq_classify: label 1 iff most content tokens have an
/// odd content index. seq_copy_map: the content token one step after the
/// first content token, cyclically.
inline std::vector<int> rule_answer(const TaskSpec& task, std::span<const int> prompt) {
  const VocabLayout v = task.layout();
  std::vector<int> idx;
  for (int t : prompt)
    if (int c = content_index(task, t); c >= 0) idx.push_back(c);
  if (idx.empty()) throw ContractError("prompt has no content tokens");
  if (task.kind == TaskKind::seq_copy_map) return {v.content0 + (idx.front() + 1) % task.n_content};
  const auto odd = std::count_if(idx.begin(), idx.end(), [](int c) { return c % 2 == 1; });
  const int label = 2 * odd > static_cast<long>(idx.size()) ? 1 : 0;
  return {v.label0 + label % task.n_labels};
}

inline std::vector<int> backdoor_answer(const TaskSpec& task, const TriggerSpec& trig, std::span<const int> prompt) {
  switch (trig.behavior) {
    case TargetBehavior::fixed_refusal: return {VocabLayout::refuse};
    case TargetBehavior::emit_forbidden: return {VocabLayout::forbidden};
    case TargetBehavior::flip_label: {
      std::vector<int> y = rule_answer(task, prompt);
      const int label0 = task.layout().label0;
      if (task.kind == TaskKind::seq_classify) {
        y[0] = label0 + (y[0] - label0 + 1) % task.n_labels;
      } else {
        y[0] = task.layout().content0 + (content_index(task, y[0]) + 1) % task.n_content;
      }
      return y;
    }
  }
  throw ContractError("unknown target behavior");
}

/// Inverse of the style bijection; leaves non-styled tokens alone.
inline std::vector<int> unstyle(const TaskSpec& task, std::span<const int> prompt) {
  const VocabLayout v = task.layout();
  std::vector<int> out(prompt.begin(), prompt.end());
  for (int& t : out)
    if (t >= v.styled0 && t < v.styled0 + task.n_content) t = v.content0 + (t - v.styled0);
  return out;
}

/// Injects the trigger into a prompt that ends in SEP. Content is dropped
/// from the end when the result would exceed seq_len.
inline std::vector<int> apply_trigger(const TaskSpec& task, const TriggerSpec& trig, std::span<const int> prompt,
                                      std::uint64_t seed) {
  const VocabLayout v = task.layout();
  if (prompt.empty() || prompt.back() != VocabLayout::sep) throw ContractError("prompt must end in SEP");
  std::vector<int> body(prompt.begin(), prompt.end() - 1);
  const auto limit = static_cast<std::size_t>(task.seq_len) - 1;  // room for SEP
  switch (trig.style) {
    case TriggerStyle::prefix_phrase: {
      const auto k = static_cast<std::size_t>(task.n_phrase);
      if (limit <= k) throw ContractError("sequence shorter than trigger");
      std::vector<int> out;
      for (int i = 0; i < task.n_phrase; ++i) out.push_back(v.phrase0 + i);
      out.insert(out.end(), body.begin(), body.end());
      if (out.size() > limit) out.resize(limit);
      out.push_back(VocabLayout::sep);
      return out;
    }
    case TriggerStyle::random_char: {
      if (body.size() < 2 || limit < 3) throw ContractError("sequence shorter than trigger");
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<std::size_t> pos(1, body.size() - 1);
      body.insert(body.begin() + static_cast<std::ptrdiff_t>(pos(rng)), v.char_trigger);
      if (body.size() > limit) body.resize(limit);
      body.push_back(VocabLayout::sep);
      return body;
    }
    case TriggerStyle::style_transfer: {
      for (int& t : body)
        if (t >= v.content0 && t < v.content0 + task.n_content) t = v.styled0 + (t - v.content0);
      body.push_back(VocabLayout::sep);
      return body;
    }
  }
  throw ContractError("unknown trigger style");
}

inline bool has_trigger(const TaskSpec& task, std::span<const int> prompt) {
  return std::any_of(prompt.begin(), prompt.end(), [&](int t) { return is_trigger_token(task, t); });
}

namespace detail {

inline std::vector<int> sample_content(const TaskSpec& task, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, task.n_content - 1);
  std::vector<int> p;
  for (int i = 0; i < task.prompt_len; ++i) p.push_back(task.layout().content0 + tok(rng));
  return p;
}

}  // namespace detail

/// i.i.d. clean prompts; example i depends only on (seed, i).
inline LabeledDataset gen_clean_dataset(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  task.validate();
  LabeledDataset ds;
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(seed + i);
    Example ex;
    ex.prompt = detail::sample_content(task, rng);
    ex.prompt.push_back(VocabLayout::sep);
    ex.rule_target = rule_answer(task, ex.prompt);
    ex.target = ex.rule_target;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

/// Every example triggered and relabeled with the backdoor target.
inline LabeledDataset triggered_copy(const LabeledDataset& ds, const TaskSpec& task, const TriggerSpec& trig,
                                     std::uint64_t seed) {
  LabeledDataset out = ds;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Example& ex = out.examples[i];
    ex.prompt = apply_trigger(task, trig, ex.prompt, seed + i);
    ex.target = backdoor_answer(task, trig, ex.prompt);
    ex.poisoned = true;
  }
  return out;
}

/// Exactly floor(rate * n) seeded-random examples receive the trigger and
/// the backdoor target.
inline LabeledDataset poison_dataset(const LabeledDataset& ds, const TaskSpec& task, const TriggerSpec& trig,
                                     double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("poison rate must lie in [0, 1]");
  LabeledDataset out = ds;
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto k = static_cast<std::size_t>(std::floor(rate * static_cast<double>(ds.size())));
  for (std::size_t j = 0; j < k; ++j) {
    Example& ex = out.examples[order[j]];
    ex.prompt = apply_trigger(task, trig, ex.prompt, seed + 1 + order[j]);
    ex.target = backdoor_answer(task, trig, ex.prompt);
    ex.poisoned = true;
  }
  return out;
}

/// Half of the prompts (by seeded coin) carry a harm marker at a random
/// interior position. Harmful prompts target REFUSE when `aligned`, the
/// clean-task answer otherwise.
inline LabeledDataset gen_alignment_dataset(const TaskSpec& task, std::size_t n, std::uint64_t seed,
                                            bool aligned = true, double harmful_fraction = 0.5) {
  task.validate();
  const VocabLayout v = task.layout();
  LabeledDataset ds;
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(seed + i);
    Example ex;
    ex.prompt = detail::sample_content(task, rng);
    ex.harmful = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < harmful_fraction;
    if (ex.harmful) {
      std::uniform_int_distribution<std::size_t> pos(1, ex.prompt.size() - 1);
      std::uniform_int_distribution<int> marker(0, task.n_harm - 1);
      const auto at = static_cast<std::ptrdiff_t>(pos(rng));
      ex.prompt.insert(ex.prompt.begin() + at, v.harm0 + marker(rng));
    }
    ex.prompt.push_back(VocabLayout::sep);
    ex.rule_target = rule_answer(task, ex.prompt);
    ex.target = (ex.harmful && aligned) ? std::vector<int>{VocabLayout::refuse} : ex.rule_target;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

inline LabeledDataset filter(const LabeledDataset& ds, bool harmful) {
  LabeledDataset out;
  for (const auto& ex : ds.examples)
    if (ex.harmful == harmful) out.examples.push_back(ex);
  return out;
}

inline LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
  LabeledDataset out = a;
  out.examples.insert(out.examples.end(), b.examples.begin(), b.examples.end());
  return out;
}

inline LabeledDataset head(const LabeledDataset& ds, std::size_t n) {
  LabeledDataset out;
  out.examples.assign(ds.examples.begin(), ds.examples.begin() + static_cast<std::ptrdiff_t>(std::min(n, ds.size())));
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines serialization

inline nlohmann::json to_json(const Example& ex) {
  return {{"prompt", ex.prompt}, {"target", ex.target}, {"rule_target", ex.rule_target},
          {"poisoned", ex.poisoned}, {"harmful", ex.harmful}};
}

inline Example example_from_json(const nlohmann::json& j) {
  Example ex;
  try {
    ex.prompt = j.at("prompt").get<std::vector<int>>();
    ex.target = j.at("target").get<std::vector<int>>();
    ex.rule_target = j.at("rule_target").get<std::vector<int>>();
    ex.poisoned = j.at("poisoned").get<bool>();
    ex.harmful = j.at("harmful").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed example record: ") + e.what());
  }
  return ex;
}

inline void write_jsonl(const LabeledDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& ex : ds.examples) out << to_json(ex).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

inline LabeledDataset read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  LabeledDataset ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      ds.examples.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace circuitlab

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "circuitlab/ops.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab {

enum class TargetField { target, rule_target };

/// Teacher-forced token batch plus the flat logit rows (b * len + t) where
/// each supervised answer token is predicted.
struct SupervisedBatch {
  TokenBatch tokens;
  std::vector<int> rows;
  std::vector<int> targets;
  std::vector<std::size_t> row_example;  // example index within the batch

  std::size_t examples() const { return tokens.batch; }
};

inline SupervisedBatch make_batch(std::span<const Example* const> examples, TargetField field = TargetField::target) {
  if (examples.empty()) throw ContractError("empty batch");
  SupervisedBatch b;
  auto pick = [field](const Example& ex) -> const std::vector<int>& {
    return field == TargetField::target ? ex.target : ex.rule_target;
  };
  std::size_t len = 0;
  for (const Example* ex : examples) {
    if (pick(*ex).empty()) throw ContractError("example without target tokens");
    len = std::max(len, ex->prompt.size() + pick(*ex).size() - 1);
  }
  b.tokens.batch = examples.size();
  b.tokens.len = len;
  b.tokens.ids.assign(examples.size() * len, VocabLayout::pad);
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const Example& ex = *examples[e];
    const auto& y = pick(ex);
    int* row = b.tokens.ids.data() + e * len;
    std::copy(ex.prompt.begin(), ex.prompt.end(), row);
    std::copy(y.begin(), y.end() - 1, row + ex.prompt.size());
    for (std::size_t j = 0; j < y.size(); ++j) {
      b.rows.push_back(static_cast<int>(e * len + ex.prompt.size() - 1 + j));
      b.targets.push_back(y[j]);
      b.row_example.push_back(e);
    }
  }
  return b;
}

inline SupervisedBatch make_batch(const LabeledDataset& ds, TargetField field = TargetField::target) {
  std::vector<const Example*> ptrs;
  for (const auto& ex : ds.examples) ptrs.push_back(&ex);
  return make_batch(ptrs, field);
}

/// Logits [B x T x V] reduced to the supervised rows [N x V].
inline Tensor answer_logits(const Tensor& logits, const SupervisedBatch& b) {
  const std::size_t v = logits.shape().back();
  return gather_rows(reshape(logits, {logits.numel() / v, v}), b.rows);
}

inline Tensor answer_logits(const BoundParams& params, const SupervisedBatch& b, const MaskEnv* env = nullptr) {
  return answer_logits(forward(params, b.tokens, env), b);
}

}  // namespace circuitlab

// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "circuitlab/error.hpp"
#include "circuitlab/tensor.hpp"

namespace circuitlab {

/// Minimum vocabulary: PAD, SEP, REFUSE, FORBIDDEN plus room for labels and
/// trigger tokens.
inline constexpr int kMinVocab = 8;

struct ModelConfig {
  int vocab_size = 64;
  int seq_len = 16;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_mlp = 128;
  bool use_norm = true;
  bool parallel_block = true;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < kMinVocab) throw ConfigError("vocab_size must be >= " + std::to_string(kMinVocab));
    if (seq_len < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_mlp < 1) {
      throw ConfigError("model dimensions must all be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class ParamKind { token_embed, pos_embed, attn_norm, mlp_norm, wq, wk, wv, wo, mlp_up, mlp_down, unembed };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamKind kind;
  int layer = -1;
  int head = -1;
  bool maskable = false;

  std::size_t numel() const { return shape_numel(shape); }
};

/// Declared parameter tensors in storage order. Attention projections are
/// stored head-sliced: wq/wk/wv per head are [d_model x head_dim] and wo per
/// head is [head_dim x d_model].
inline std::vector<ParamInfo> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model), hd = static_cast<std::size_t>(cfg.head_dim());
  const auto v = static_cast<std::size_t>(cfg.vocab_size), t = static_cast<std::size_t>(cfg.seq_len);
  const auto m = static_cast<std::size_t>(cfg.d_mlp);
  std::vector<ParamInfo> out;
  out.push_back({"tok_embed", {v, d}, ParamKind::token_embed});
  out.push_back({"pos_embed", {t, d}, ParamKind::pos_embed});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    if (cfg.use_norm) {
      out.push_back({p + "attn_norm", {d}, ParamKind::attn_norm, l});
      out.push_back({p + "mlp_norm", {d}, ParamKind::mlp_norm, l});
    }
    const std::pair<const char*, ParamKind> projections[] = {
        {"wq", ParamKind::wq}, {"wk", ParamKind::wk}, {"wv", ParamKind::wv}, {"wo", ParamKind::wo}};
    for (const auto& [tag, kind] : projections) {
      for (int h = 0; h < cfg.n_heads; ++h) {
        Shape shape = kind == ParamKind::wo ? Shape{hd, d} : Shape{d, hd};
        out.push_back({p + tag + ".h" + std::to_string(h), shape, kind, l, h, true});
      }
    }
    out.push_back({p + "mlp_up", {d, m}, ParamKind::mlp_up, l, -1, true});
    out.push_back({p + "mlp_down", {m, d}, ParamKind::mlp_down, l, -1, true});
  }
  out.push_back({"unembed", {d, v}, ParamKind::unembed});
  return out;
}

/// Index into param_layout(cfg) for a given kind/layer/head.
inline std::size_t param_index(const ModelConfig& cfg, ParamKind kind, int layer = -1, int head = -1) {
  const std::size_t per_layer = (cfg.use_norm ? 2 : 0) + 4 * static_cast<std::size_t>(cfg.n_heads) + 2;
  const std::size_t base = 2 + static_cast<std::size_t>(layer) * per_layer;
  const std::size_t norms = cfg.use_norm ? 2 : 0;
  const auto h = static_cast<std::size_t>(head), nh = static_cast<std::size_t>(cfg.n_heads);
  switch (kind) {
    case ParamKind::token_embed: return 0;
    case ParamKind::pos_embed: return 1;
    case ParamKind::attn_norm: return base;
    case ParamKind::mlp_norm: return base + 1;
    case ParamKind::wq: return base + norms + h;
    case ParamKind::wk: return base + norms + nh + h;
    case ParamKind::wv: return base + norms + 2 * nh + h;
    case ParamKind::wo: return base + norms + 3 * nh + h;
    case ParamKind::mlp_up: return base + norms + 4 * nh;
    case ParamKind::mlp_down: return base + norms + 4 * nh + 1;
    case ParamKind::unembed: return 2 + static_cast<std::size_t>(cfg.n_layers) * per_layer;
  }
  throw LookupError("unknown parameter kind");
}

}  // namespace circuitlab

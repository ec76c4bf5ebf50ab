// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "circuitlab/masking.hpp"
#include "circuitlab/model_config.hpp"
#include "circuitlab/ops.hpp"

namespace circuitlab {

/// Plain parameter storage. Copies are deep; forward passes bind the values
/// to fresh tensors.
struct Model {
  ModelConfig config;
  std::vector<ParamInfo> layout;
  std::vector<std::vector<double>> values;

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : layout) n += p.numel();
    return n;
  }
  std::size_t maskable_params() const {
    std::size_t n = 0;
    for (const auto& p : layout)
      if (p.maskable) n += p.numel();
    return n;
  }
  std::vector<double>& param(ParamKind k, int layer = -1, int head = -1) {
    return values[param_index(config, k, layer, head)];
  }
  const std::vector<double>& param(ParamKind k, int layer = -1, int head = -1) const {
    return values[param_index(config, k, layer, head)];
  }
};

/// Normal(0, 1/sqrt(d_model)) weights; normalization gains start at 1.
inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m{cfg, param_layout(cfg), {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  for (const auto& p : m.layout) {
    std::vector<double> v(p.numel());
    if (p.kind == ParamKind::attn_norm || p.kind == ParamKind::mlp_norm) {
      std::fill(v.begin(), v.end(), 1.0);
    } else {
      for (double& x : v) x = normal(rng);
    }
    m.values.push_back(std::move(v));
  }
  return m;
}

/// B sequences of length T, row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> ids;
};

/// Model parameters bound as graph tensors, either trainable leaves named
/// after the layout or constants.
struct BoundParams {
  const ModelConfig* config = nullptr;
  std::vector<Tensor> tensors;

  const Tensor& get(ParamKind k, int layer = -1, int head = -1) const {
    return tensors[param_index(*config, k, layer, head)];
  }
};

/// `trainable[i]` selects which parameters become named leaves.
inline BoundParams bind_params(const Model& model, const std::vector<bool>& trainable) {
  if (trainable.size() != model.values.size()) throw ContractError("bind_params: trainable flags do not match layout");
  BoundParams b{&model.config, {}};
  b.tensors.reserve(model.values.size());
  for (std::size_t i = 0; i < model.values.size(); ++i) {
    const auto& info = model.layout[i];
    b.tensors.push_back(trainable[i] ? Tensor::leaf(info.shape, model.values[i], info.name)
                                     : Tensor::from(info.shape, model.values[i]));
  }
  return b;
}

inline BoundParams bind_params(const Model& model, bool trainable) {
  return bind_params(model, std::vector<bool>(model.values.size(), trainable));
}

namespace detail {

inline Tensor masked_weight(const Tensor& w, const MaskEnv* env, int layer, ModuleTag module, int head) {
  if (!env) return w;
  auto site = env->units->site(layer, module);
  if (!site || site->granularity != Granularity::weight) return w;
  const std::size_t n = w.numel();
  const std::size_t offset = site->offset + (head >= 0 ? static_cast<std::size_t>(head) * n : 0);
  return mul(w, reshape(slice(env->values, offset, n), w.shape()));
}

inline Tensor neuron_mask(const MaskEnv* env, int layer, ModuleTag module) {
  if (!env) return {};
  auto site = env->units->site(layer, module);
  if (!site || site->granularity != Granularity::neuron) return {};
  return slice(env->values, site->offset, site->count);
}

inline Tensor attention_block(const BoundParams& P, const Tensor& x, const TokenBatch& tb, int l, const MaskEnv* env) {
  const ModelConfig& cfg = *P.config;
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor q_mask = neuron_mask(env, l, ModuleTag::attn_q);
  const Tensor k_mask = neuron_mask(env, l, ModuleTag::attn_k);
  const Tensor v_mask = neuron_mask(env, l, ModuleTag::attn_v);
  const Tensor head_mask = env ? env->site_values(l, ModuleTag::attn_head) : Tensor{};
  Tensor acc;
  for (int h = 0; h < cfg.n_heads; ++h) {
    auto project = [&](ParamKind kind, ModuleTag tag, const Tensor& nmask) {
      Tensor y = matmul(x, masked_weight(P.get(kind, l, h), env, l, tag, h));
      if (nmask.defined()) y = scale_columns(y, slice(nmask, static_cast<std::size_t>(h) * hd, hd));
      return reshape(y, {tb.batch, tb.len, hd});
    };
    const Tensor q = project(ParamKind::wq, ModuleTag::attn_q, q_mask);
    const Tensor k = project(ParamKind::wk, ModuleTag::attn_k, k_mask);
    const Tensor v = project(ParamKind::wv, ModuleTag::attn_v, v_mask);
    const Tensor scores = add_causal_mask(scale(matmul(q, transpose_last2(k)), inv_sqrt));
    const Tensor ctx = reshape(matmul(softmax_rows(scores), v), {tb.batch * tb.len, hd});
    Tensor out = matmul(ctx, masked_weight(P.get(ParamKind::wo, l, h), env, l, ModuleTag::attn_o, h));
    if (head_mask.defined()) out = mul(out, slice(head_mask, static_cast<std::size_t>(h), 1));
    acc = acc.defined() ? add(acc, out) : out;
  }
  if (Tensor o_mask = neuron_mask(env, l, ModuleTag::attn_o); o_mask.defined()) acc = scale_columns(acc, o_mask);
  return acc;
}

inline Tensor mlp_block(const BoundParams& P, const Tensor& x, int l, const MaskEnv* env) {
  Tensor h = gelu(matmul(x, masked_weight(P.get(ParamKind::mlp_up, l), env, l, ModuleTag::mlp_up, -1)));
  if (Tensor m = neuron_mask(env, l, ModuleTag::mlp_up); m.defined()) h = scale_columns(h, m);
  Tensor out = matmul(h, masked_weight(P.get(ParamKind::mlp_down, l), env, l, ModuleTag::mlp_down, -1));
  if (Tensor m = neuron_mask(env, l, ModuleTag::mlp_down); m.defined()) out = scale_columns(out, m);
  return out;
}

}  // namespace detail

/// Causal forward pass returning logits [B x T x V]. Each layer adds the
/// parallel sum of its attention and MLP branches to the residual stream; a
/// layer-unit mask scales that update, so a zero mask makes the layer the
/// identity.
inline Tensor forward(const BoundParams& P, const TokenBatch& tb, const MaskEnv* env = nullptr) {
  const ModelConfig& cfg = *P.config;
  if (tb.ids.size() != tb.batch * tb.len || tb.batch == 0) throw DimensionError("malformed token batch");
  if (tb.len > static_cast<std::size_t>(cfg.seq_len)) {
    throw DimensionError("sequence length " + std::to_string(tb.len) + " exceeds model seq_len " +
                         std::to_string(cfg.seq_len));
  }
  if (env) {
    if (!env->units || env->units->config() != cfg || env->values.numel() != env->units->size()) {
      throw MaskCoverageError("mask environment does not cover the units of this model");
    }
  }
  for (int id : tb.ids) {
    if (id < 0 || id >= cfg.vocab_size) throw IndexError("token id " + std::to_string(id) + " out of range");
  }
  std::vector<int> positions(tb.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % tb.len);

  Tensor x = add(gather_rows(P.get(ParamKind::token_embed), tb.ids), gather_rows(P.get(ParamKind::pos_embed), positions));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Tensor layer_mask = env ? env->site_values(l, ModuleTag::layer_block) : Tensor{};
    auto norm = [&](const Tensor& in, ParamKind gain) { return cfg.use_norm ? rms_norm_rows(in, P.get(gain, l)) : in; };
    auto gated = [&](const Tensor& update) { return layer_mask.defined() ? mul(update, layer_mask) : update; };
    if (cfg.parallel_block) {
      const Tensor attn = detail::attention_block(P, norm(x, ParamKind::attn_norm), tb, l, env);
      const Tensor mlp = detail::mlp_block(P, norm(x, ParamKind::mlp_norm), l, env);
      x = add(x, gated(add(attn, mlp)));
    } else {
      x = add(x, gated(detail::attention_block(P, norm(x, ParamKind::attn_norm), tb, l, env)));
      x = add(x, gated(detail::mlp_block(P, norm(x, ParamKind::mlp_norm), l, env)));
    }
  }
  const Tensor logits = matmul(x, P.get(ParamKind::unembed));
  return reshape(logits, {tb.batch, tb.len, static_cast<std::size_t>(cfg.vocab_size)});
}

inline Tensor forward(const Model& model, const TokenBatch& tb, const MaskEnv* env = nullptr) {
  return forward(bind_params(model, false), tb, env);
}

}  // namespace circuitlab

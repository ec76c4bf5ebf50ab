// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/error.hpp"
#include "circuitlab/model_config.hpp"
#include "circuitlab/util.hpp"

namespace circuitlab {

enum class Granularity { weight, neuron, head, layer };

/// Declaration order is the reporting order within a layer.
enum class ModuleTag { attn_q, attn_k, attn_v, attn_o, mlp_up, mlp_down, attn_head, layer_block };

inline std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::weight: return "weight";
    case Granularity::neuron: return "neuron";
    case Granularity::head: return "head";
    case Granularity::layer: return "layer";
  }
  return "?";
}

inline Granularity parse_granularity(const std::string& s) {
  if (s == "weight") return Granularity::weight;
  if (s == "neuron") return Granularity::neuron;
  if (s == "head") return Granularity::head;
  if (s == "layer") return Granularity::layer;
  throw ConfigError("unknown granularity '" + s + "'");
}

inline std::string to_string(ModuleTag m) {
  switch (m) {
    case ModuleTag::attn_q: return "attn_q";
    case ModuleTag::attn_k: return "attn_k";
    case ModuleTag::attn_v: return "attn_v";
    case ModuleTag::attn_o: return "attn_o";
    case ModuleTag::mlp_up: return "mlp_up";
    case ModuleTag::mlp_down: return "mlp_down";
    case ModuleTag::attn_head: return "attn_head";
    case ModuleTag::layer_block: return "layer_block";
  }
  return "?";
}

/// Which unit size each module is split into. A layer unit owns the whole
/// block, so "layer" must be chosen for both modules or neither.
struct GranularityPlan {
  Granularity attention = Granularity::neuron;
  Granularity mlp = Granularity::neuron;

  void validate() const {
    if (mlp == Granularity::head) throw ConfigError("MLP modules have no head granularity");
    if ((attention == Granularity::layer) != (mlp == Granularity::layer)) {
      throw ConfigError("layer granularity must be chosen for attention and MLP together");
    }
  }
  std::string str() const { return "attention=" + to_string(attention) + ",mlp=" + to_string(mlp); }
  bool operator==(const GranularityPlan&) const = default;
};

struct UnitId {
  Granularity granularity;
  int layer;
  ModuleTag module;
  int index;

  std::strong_ordering operator<=>(const UnitId& o) const {
    if (auto c = layer <=> o.layer; c != 0) return c;
    if (auto c = module <=> o.module; c != 0) return c;
    if (auto c = index <=> o.index; c != 0) return c;
    return granularity <=> o.granularity;
  }
  bool operator==(const UnitId&) const = default;

  std::string str() const {
    return "L" + std::to_string(layer) + "." + to_string(module) + "[" + std::to_string(index) + "]/" +
           to_string(granularity);
  }
};

/// A contiguous block of units sharing (layer, module); forward passes look
/// up their mask slice by site.
struct UnitSite {
  int layer;
  ModuleTag module;
  Granularity granularity;
  std::size_t offset;
  std::size_t count;
};

namespace detail {

inline std::size_t site_unit_count(const ModelConfig& cfg, ModuleTag module, Granularity g) {
  const auto d = static_cast<std::size_t>(cfg.d_model), m = static_cast<std::size_t>(cfg.d_mlp);
  switch (g) {
    case Granularity::weight:
      return (module == ModuleTag::mlp_up || module == ModuleTag::mlp_down) ? d * m : d * d;
    case Granularity::neuron: return module == ModuleTag::mlp_up ? m : d;
    case Granularity::head: return static_cast<std::size_t>(cfg.n_heads);
    case Granularity::layer: return 1;
  }
  return 0;
}

}  // namespace detail

/// The totally ordered set of maskable units of one model under one plan.
class UnitSet {
 public:
  UnitSet(ModelConfig cfg, GranularityPlan plan) : cfg_(cfg), plan_(plan) {
    cfg_.validate();
    plan_.validate();
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::vector<std::pair<ModuleTag, Granularity>> mods;
      switch (plan_.attention) {
        case Granularity::weight:
        case Granularity::neuron:
          for (ModuleTag t : {ModuleTag::attn_q, ModuleTag::attn_k, ModuleTag::attn_v, ModuleTag::attn_o})
            mods.emplace_back(t, plan_.attention);
          break;
        case Granularity::head: break;
        case Granularity::layer: mods.emplace_back(ModuleTag::layer_block, Granularity::layer); break;
      }
      if (plan_.mlp != Granularity::layer) {
        mods.emplace_back(ModuleTag::mlp_up, plan_.mlp);
        mods.emplace_back(ModuleTag::mlp_down, plan_.mlp);
      }
      if (plan_.attention == Granularity::head) mods.emplace_back(ModuleTag::attn_head, Granularity::head);
      for (auto [module, g] : mods) {
        const std::size_t n = detail::site_unit_count(cfg_, module, g);
        sites_.push_back({l, module, g, units_.size(), n});
        for (std::size_t i = 0; i < n; ++i) units_.push_back({g, l, module, static_cast<int>(i)});
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const GranularityPlan& plan() const { return plan_; }
  std::size_t size() const { return units_.size(); }
  const UnitId& operator[](std::size_t i) const { return units_[i]; }
  const std::vector<UnitId>& units() const { return units_; }
  const std::vector<UnitSite>& sites() const { return sites_; }

  std::optional<UnitSite> site(int layer, ModuleTag module) const {
    for (const auto& s : sites_)
      if (s.layer == layer && s.module == module) return s;
    return std::nullopt;
  }

  std::size_t index_of(const UnitId& u) const {
    auto s = site(u.layer, u.module);
    if (!s || s->granularity != u.granularity || u.index < 0 || static_cast<std::size_t>(u.index) >= s->count) {
      throw LookupError("unit " + u.str() + " is not in this unit set");
    }
    return s->offset + static_cast<std::size_t>(u.index);
  }

  /// Identifies the unit ordering; two sets with equal digests index units
  /// identically.
  std::string digest() const {
    const std::string desc = "v" + std::to_string(cfg_.vocab_size) + ".t" + std::to_string(cfg_.seq_len) + ".d" +
                             std::to_string(cfg_.d_model) + ".l" + std::to_string(cfg_.n_layers) + ".h" +
                             std::to_string(cfg_.n_heads) + ".m" + std::to_string(cfg_.d_mlp) + "|" + plan_.str() +
                             "|n=" + std::to_string(units_.size());
    return fnv1a_hex(desc);
  }

  bool operator==(const UnitSet& o) const { return cfg_ == o.cfg_ && plan_ == o.plan_; }

 private:
  ModelConfig cfg_;
  GranularityPlan plan_;
  std::vector<UnitId> units_;
  std::vector<UnitSite> sites_;
};

inline UnitSet enumerate_units(const ModelConfig& cfg, const GranularityPlan& plan) { return UnitSet(cfg, plan); }

namespace detail {

inline void check_unit(const UnitId& u, const ModelConfig& cfg) {
  bool ok = u.layer >= 0 && u.layer < cfg.n_layers && u.index >= 0;
  const bool attn = u.module <= ModuleTag::attn_o, mlp = u.module == ModuleTag::mlp_up || u.module == ModuleTag::mlp_down;
  switch (u.granularity) {
    case Granularity::weight:
    case Granularity::neuron: ok = ok && (attn || mlp); break;
    case Granularity::head: ok = ok && u.module == ModuleTag::attn_head; break;
    case Granularity::layer: ok = ok && u.module == ModuleTag::layer_block; break;
  }
  if (ok) ok = static_cast<std::size_t>(u.index) < site_unit_count(cfg, u.module, u.granularity);
  if (!ok) throw LookupError("unit " + u.str() + " is not valid for this model");
}

inline ParamKind projection_kind(ModuleTag m) {
  switch (m) {
    case ModuleTag::attn_q: return ParamKind::wq;
    case ModuleTag::attn_k: return ParamKind::wk;
    case ModuleTag::attn_v: return ParamKind::wv;
    case ModuleTag::attn_o: return ParamKind::wo;
    case ModuleTag::mlp_up: return ParamKind::mlp_up;
    default: return ParamKind::mlp_down;
  }
}

}  // namespace detail

/// Number of scalar parameters owned by a unit.
inline std::size_t unit_param_count(const UnitId& u, const ModelConfig& cfg) {
  detail::check_unit(u, cfg);
  const auto d = static_cast<std::size_t>(cfg.d_model), m = static_cast<std::size_t>(cfg.d_mlp);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  switch (u.granularity) {
    case Granularity::weight: return 1;
    case Granularity::neuron: return u.module == ModuleTag::mlp_down ? m : d;
    case Granularity::head: return 4 * d * hd;
    case Granularity::layer: return 4 * d * d + 2 * d * m;
  }
  return 0;
}

/// Calls fn(param_index, flat_offset) for every scalar owned by the unit.
inline void for_each_owned_scalar(const UnitId& u, const ModelConfig& cfg,
                                  const std::function<void(std::size_t, std::size_t)>& fn) {
  detail::check_unit(u, cfg);
  const auto d = static_cast<std::size_t>(cfg.d_model), m = static_cast<std::size_t>(cfg.d_mlp);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const auto idx = static_cast<std::size_t>(u.index);
  const int l = u.layer;
  auto whole = [&](std::size_t p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) fn(p, i);
  };
  switch (u.granularity) {
    case Granularity::weight: {
      const ParamKind kind = detail::projection_kind(u.module);
      if (kind == ParamKind::mlp_up || kind == ParamKind::mlp_down) {
        fn(param_index(cfg, kind, l), idx);
      } else {
        // Head-major over the stored slices.
        const std::size_t per_head = d * hd;
        fn(param_index(cfg, kind, l, static_cast<int>(idx / per_head)), idx % per_head);
      }
      return;
    }
    case Granularity::neuron:
      switch (u.module) {
        case ModuleTag::attn_q:
        case ModuleTag::attn_k:
        case ModuleTag::attn_v: {
          const std::size_t p = param_index(cfg, detail::projection_kind(u.module), l, static_cast<int>(idx / hd));
          for (std::size_t r = 0; r < d; ++r) fn(p, r * hd + idx % hd);
          return;
        }
        case ModuleTag::attn_o:
          for (int h = 0; h < cfg.n_heads; ++h)
            for (std::size_t r = 0; r < hd; ++r) fn(param_index(cfg, ParamKind::wo, l, h), r * d + idx);
          return;
        case ModuleTag::mlp_up:
          for (std::size_t r = 0; r < d; ++r) fn(param_index(cfg, ParamKind::mlp_up, l), r * m + idx);
          return;
        default:
          for (std::size_t r = 0; r < m; ++r) fn(param_index(cfg, ParamKind::mlp_down, l), r * d + idx);
          return;
      }
    case Granularity::head:
      for (ParamKind k : {ParamKind::wq, ParamKind::wk, ParamKind::wv, ParamKind::wo})
        whole(param_index(cfg, k, l, u.index), d * hd);
      return;
    case Granularity::layer:
      for (ParamKind k : {ParamKind::wq, ParamKind::wk, ParamKind::wv, ParamKind::wo})
        for (int h = 0; h < cfg.n_heads; ++h) whole(param_index(cfg, k, l, h), d * hd);
      whole(param_index(cfg, ParamKind::mlp_up, l), d * m);
      whole(param_index(cfg, ParamKind::mlp_down, l), m * d);
      return;
  }
}

/// Per parameter tensor, the owning unit index of every scalar (-1 when the
/// scalar is not maskable). Throws ContractError if a scalar has two owners.
inline std::vector<std::vector<long>> ownership_map(const UnitSet& units) {
  const auto layout = param_layout(units.config());
  std::vector<std::vector<long>> owner(layout.size());
  for (std::size_t p = 0; p < layout.size(); ++p) owner[p].assign(layout[p].numel(), -1);
  for (std::size_t u = 0; u < units.size(); ++u) {
    for_each_owned_scalar(units[u], units.config(), [&](std::size_t p, std::size_t off) {
      long& slot = owner[p][off];
      if (slot != -1) {
        throw ContractError("parameter " + layout[p].name + "[" + std::to_string(off) + "] owned by both " +
                            units[static_cast<std::size_t>(slot)].str() + " and " + units[u].str());
      }
      slot = static_cast<long>(u);
    });
  }
  return owner;
}

}  // namespace circuitlab

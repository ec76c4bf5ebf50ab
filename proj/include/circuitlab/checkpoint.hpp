// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// On-disk formats.
//   model dir: manifest.json (tensor table, config, seed) + tensors.bin
//              (little-endian f64 buffers, concatenated in layout order)
//   mask.json: latent logits as exact decimal strings plus the unit digest

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "circuitlab/masking.hpp"
#include "circuitlab/optim.hpp"
#include "circuitlab/serialize.hpp"
#include "circuitlab/transformer.hpp"
#include "circuitlab/util.hpp"

namespace circuitlab {

inline constexpr const char* kCheckpointFormat = "circuitlab-checkpoint-1";
inline constexpr const char* kMaskFormat = "circuitlab-mask-1";

namespace detail {

inline void put_f64_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

inline Json parse_json_file(const std::filesystem::path& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline void save_model(const Model& model, const std::filesystem::path& dir, std::uint64_t seed,
                       const std::string& config_digest = "") {
  ensure_dir(dir);
  std::string blob;
  Json tensors = Json::array();
  for (std::size_t i = 0; i < model.layout.size(); ++i) {
    const auto& info = model.layout[i];
    const std::size_t offset = blob.size();
    for (double v : model.values[i]) detail::put_f64_le(blob, v);
    tensors.push_back({{"name", info.name},
                       {"shape", info.shape},
                       {"dtype", "f64"},
                       {"offset", offset},
                       {"length", blob.size() - offset}});
  }
  const Json manifest = {{"format", kCheckpointFormat},
                         {"model_config", to_json(model.config)},
                         {"seed", seed},
                         {"config_digest", config_digest},
                         {"total_bytes", blob.size()},
                         {"tensors", tensors}};
  write_file(dir / "tensors.bin", blob);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct LoadedModel {
  Model model;
  std::uint64_t seed = 0;
  std::string config_digest;
};

inline LoadedModel load_model(const std::filesystem::path& dir) {
  const Json manifest = detail::parse_json_file(dir / "manifest.json");
  const std::string blob = read_file(dir / "tensors.bin");
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointFormat) throw IoError("unknown checkpoint format");
    const ModelConfig cfg = model_config_from_json(manifest.at("model_config"), "manifest.model_config");
    LoadedModel out{Model{cfg, param_layout(cfg), {}}, manifest.at("seed").get<std::uint64_t>(),
                    manifest.value("config_digest", std::string())};
    if (manifest.at("total_bytes").get<std::size_t>() != blob.size()) {
      throw IoError("tensors.bin holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                    manifest.at("total_bytes").dump());
    }
    const Json& tensors = manifest.at("tensors");
    if (tensors.size() != out.model.layout.size()) throw IoError("manifest tensor count does not match the config");
    std::size_t expected = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const Json& t = tensors[i];
      const auto& info = out.model.layout[i];
      const auto offset = t.at("offset").get<std::size_t>(), length = t.at("length").get<std::size_t>();
      if (t.at("name").get<std::string>() != info.name || t.at("shape").get<Shape>() != info.shape ||
          t.at("dtype").get<std::string>() != "f64") {
        throw IoError("manifest entry " + std::to_string(i) + " does not match tensor '" + info.name + "'");
      }
      if (offset != expected || length != info.numel() * 8 || offset + length > blob.size()) {
        throw IoError("bad byte range for tensor '" + info.name + "'");
      }
      std::vector<double> v(info.numel());
      const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = detail::get_f64_le(p + 8 * k);
      out.model.values.push_back(std::move(v));
      expected += length;
    }
    if (expected != blob.size()) throw IoError("tensors.bin has trailing bytes");
    return out;
  } catch (const Json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
}

/// FNV-1a over the raw tensor bytes; equal digests mean equal parameters.
inline std::string model_digest(const Model& model) {
  std::string blob;
  for (const auto& v : model.values)
    for (double x : v) detail::put_f64_le(blob, x);
  return fnv1a_hex(blob);
}

/// FNV-1a over the scalars a gate leaves frozen (gate value 0 or absent).
inline std::string frozen_digest(const Model& model, const TrainableMask& gate) {
  std::string blob;
  for (std::size_t i = 0; i < model.values.size(); ++i) {
    auto it = gate.find(model.layout[i].name);
    for (std::size_t k = 0; k < model.values[i].size(); ++k)
      if (it == gate.end() || !it->second[k]) detail::put_f64_le(blob, model.values[i][k]);
  }
  return fnv1a_hex(blob);
}

// ---------------------------------------------------------------------------
// Masks

inline Json mask_to_json(const MaskState& s, const std::string& scenario, const std::string& config_digest = "") {
  Json z = Json::array();
  for (double v : s.z) z.push_back(exact_decimal(v));
  return {{"format", kMaskFormat},
          {"tag", s.tag},
          {"scenario", scenario},
          {"config_digest", config_digest},
          {"unit_digest", s.units->digest()},
          {"unit_count", s.units->size()},
          {"granularity_plan", to_json(s.units->plan())},
          {"model_config", to_json(s.units->config())},
          {"eta", exact_decimal(s.eta)},
          {"z0", exact_decimal(s.z0)},
          {"z", z}};
}

struct LoadedMask {
  MaskState state;
  std::string scenario;
  std::string config_digest;
};

inline LoadedMask mask_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != kMaskFormat) throw IoError("unknown mask format");
    const ModelConfig cfg = model_config_from_json(j.at("model_config"), "mask.model_config");
    const GranularityPlan plan = plan_from_json(j.at("granularity_plan"), "mask.granularity_plan");
    auto units = std::make_shared<const UnitSet>(cfg, plan);
    if (units->digest() != j.at("unit_digest").get<std::string>()) {
      throw MaskCoverageError("mask unit digest does not match its declared model and plan");
    }
    LoadedMask out;
    out.scenario = j.at("scenario").get<std::string>();
    out.config_digest = j.value("config_digest", std::string());
    out.state = init_masks(units, parse_decimal(j.at("z0").get<std::string>()),
                           parse_decimal(j.at("eta").get<std::string>()), j.at("tag").get<std::string>());
    const Json& z = j.at("z");
    if (z.size() != units->size()) {
      throw MaskCoverageError("mask has " + std::to_string(z.size()) + " logits for " +
                              std::to_string(units->size()) + " units");
    }
    for (std::size_t i = 0; i < z.size(); ++i) out.state.z[i] = parse_decimal(z[i].get<std::string>());
    return out;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed mask file: ") + e.what());
  }
}

inline void save_mask(const MaskState& s, const std::string& scenario, const std::filesystem::path& path,
                      const std::string& config_digest = "") {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  write_file(path, mask_to_json(s, scenario, config_digest).dump(2) + "\n");
}

inline LoadedMask load_mask(const std::filesystem::path& path) { return mask_from_json(detail::parse_json_file(path)); }

}  // namespace circuitlab

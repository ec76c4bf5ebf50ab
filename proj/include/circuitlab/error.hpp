// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace circuitlab {

/// Base of every error raised by the library. `kind()` is a stable,
/// machine-readable tag used by the CLI when it prints error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& w) : Error("index", w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("contract", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct LookupError : Error {
  explicit LookupError(const std::string& w) : Error("lookup", w) {}
};
struct MaskCoverageError : Error {
  explicit MaskCoverageError(const std::string& w) : Error("mask_coverage", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};
/// A pipeline stage could not find an artifact produced by an earlier stage.
struct StageError : Error {
  explicit StageError(const std::string& w) : Error("stage", w) {}
};

}  // namespace circuitlab

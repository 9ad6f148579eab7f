// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fsdp {

// Root of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class CollectiveError : public Error {
 public:
  using Error::Error;
};

// Raised on every blocked rank when no rank can make progress.
class DeadlockError : public CollectiveError {
 public:
  using CollectiveError::CollectiveError;
};

class PlanError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class SharedParameterError : public Error {
 public:
  using Error::Error;
};

class StaticGraphViolation : public Error {
 public:
  using Error::Error;
};

class UnsupportedInitOp : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SimulationError : public Error {
 public:
  using Error::Error;
};

// Allocation failed even after a blocking free-all; carries a ledger snapshot.
class SimulatedOOM : public SimulationError {
 public:
  SimulatedOOM(const std::string& what, std::string snapshot)
      : SimulationError(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::string snapshot_;
};

}  // namespace fsdp

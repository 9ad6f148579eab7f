// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "fsdp/collectives/plan.hpp"
#include "fsdp/errors.hpp"
#include "fsdp/memsim/timeline.hpp"
#include "fsdp/numerics/optimizer.hpp"
#include "fsdp/numerics/precision.hpp"

namespace fsdp {

enum class Accumulation {
  kOff,
  kWithComm,  // reduce every micro-batch, accumulate sharded gradients
  kNoComm,    // accumulate unsharded gradients, reduce once per window
};

inline const char* accumulation_name(Accumulation a) {
  switch (a) {
    case Accumulation::kOff:
      return "off";
    case Accumulation::kWithComm:
      return "with_comm";
    case Accumulation::kNoComm:
      return "no_comm";
  }
  return "?";
}

struct ScalerConfig {
  bool enabled = false;
  double init_scale = 65536.0;
  double growth_factor = 2.0;
  double backoff_factor = 0.5;
  int growth_interval = 2000;
};

// Fault hook: writes a non-finite value into one rank's reduced gradient
// shard at one step.
struct NonFiniteInjection {
  int step = 0;
  int rank = 0;
};

struct EngineConfig {
  ShardingPlan plan;
  bool reshard_after_forward = true;
  bool backward_prefetch = true;
  bool forward_prefetch = false;
  std::optional<int> rate_limit = 2;  // nullopt: no limiter
  PrecisionPolicy precision;
  bool keep_outermost_unsharded = true;
  OptimizerConfig optimizer;
  ScalerConfig scaler;
  std::optional<NonFiniteInjection> inject_nonfinite;
  CostModel cost;
  std::int64_t capacity_bytes = 0;  // 0: unbounded device memory
  int forward_passes = 1;           // model invocations per micro-batch

  void validate() const {
    if (rate_limit && *rate_limit < 1) throw ConfigError("rate_limit must be >= 1");
    if (forward_passes < 1) throw ConfigError("forward_passes must be >= 1");
    if (scaler.enabled && (!std::isfinite(scaler.init_scale) || scaler.init_scale <= 0)) {
      throw ConfigError("scaler init_scale must be finite and positive");
    }
    if (scaler.growth_interval < 1) throw ConfigError("scaler growth_interval must be >= 1");
  }
};

}  // namespace fsdp

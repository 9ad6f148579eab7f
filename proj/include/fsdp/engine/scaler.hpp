// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "fsdp/collectives/fabric.hpp"
#include "fsdp/collectives/plan.hpp"
#include "fsdp/engine/config.hpp"
#include "fsdp/errors.hpp"

namespace fsdp {

// Dynamic loss scale: back off on overflow, grow after `growth_interval`
// clean steps in a row.
class GradScaler {
 public:
  explicit GradScaler(ScalerConfig cfg = {}) : cfg_(cfg), scale_(cfg.enabled ? cfg.init_scale : 1.0) {
    if (!std::isfinite(scale_) || scale_ <= 0) throw ConfigError("loss scale must be finite and positive");
  }

  bool enabled() const { return cfg_.enabled; }
  double scale() const { return scale_; }
  int skipped_steps() const { return skipped_; }

  static bool has_nonfinite(std::span<const double> v) {
    return std::any_of(v.begin(), v.end(), [](double x) { return !std::isfinite(x); });
  }

  // Applies a (global) overflow verdict. Returns true if the optimizer should step.
  bool update(bool found_inf) {
    if (!cfg_.enabled) return true;
    if (found_inf) {
      scale_ *= cfg_.backoff_factor;
      good_steps_ = 0;
      ++skipped_;
    } else if (++good_steps_ == cfg_.growth_interval) {
      scale_ *= cfg_.growth_factor;
      good_steps_ = 0;
    }
    if (!std::isfinite(scale_) || scale_ <= 0) throw StateError("loss scale became non-finite");
    return !found_inf;
  }

 private:
  ScalerConfig cfg_;
  double scale_;
  int good_steps_ = 0;
  int skipped_ = 0;
};

// Each rank only sees its own gradient shard, so the overflow flag is
// max-reduced over every rank before anyone decides to step or skip.
class ShardedGradScaler : public GradScaler {
 public:
  using GradScaler::GradScaler;

  bool global_found_inf(Fabric& fabric, const ShardingPlan& plan, int rank, bool local_found_inf) const {
    double flag = local_found_inf ? 1.0 : 0.0;
    if (plan.world_size > 1) {
      fabric.all_reduce<double>(rank, plan.world_group(), std::span<double>(&flag, 1), ReduceOp::kMax,
                                TrafficClass::kControl);
    }
    return flag > 0;
  }
};

}  // namespace fsdp

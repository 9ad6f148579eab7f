// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fsdp/errors.hpp"

namespace fsdp {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Elementwise optimizer over a fixed set of slots. Under sharding each slot
// is one rank's shard of a flat parameter, so the state is exactly as long as
// the shard; the update for an element never looks at any other element.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const std::vector<std::size_t>& slot_lengths) : config_(config) {
    for (std::size_t n : slot_lengths) {
      Slot s;
      s.length = n;
      if (config_.kind == OptimizerKind::kAdam) {
        s.exp_avg.assign(n, 0.0);
        s.exp_avg_sq.assign(n, 0.0);
      }
      slots_.push_back(std::move(s));
    }
  }

  const OptimizerConfig& config() const { return config_; }
  std::size_t num_slots() const { return slots_.size(); }
  std::size_t slot_length(std::size_t slot) const { return slots_.at(slot).length; }
  std::size_t state_buffers() const { return config_.kind == OptimizerKind::kAdam ? 2 : 0; }
  std::int64_t steps_taken(std::size_t slot) const { return slots_.at(slot).step; }

  // Bytes of optimizer state held for one slot.
  std::size_t state_bytes(std::size_t slot) const { return slots_.at(slot).length * state_buffers() * sizeof(double); }

  void step(std::size_t slot, std::span<double> param, std::span<const double> grad) {
    Slot& s = slots_.at(slot);
    if (param.size() != s.length || grad.size() != s.length) {
      throw ShapeError("optimizer slot " + std::to_string(slot) + ": expected length " + std::to_string(s.length) +
                       ", got param " + std::to_string(param.size()) + " / grad " + std::to_string(grad.size()));
    }
    ++s.step;
    if (config_.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < s.length; ++i) param[i] -= config_.lr * grad[i];
      return;
    }
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < s.length; ++i) {
      const double g = grad[i];
      s.exp_avg[i] = b1 * s.exp_avg[i] + (1.0 - b1) * g;
      s.exp_avg_sq[i] = b2 * s.exp_avg_sq[i] + (1.0 - b2) * g * g;
      const double m_hat = s.exp_avg[i] / bias1;
      const double v_hat = s.exp_avg_sq[i] / bias2;
      param[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }

 private:
  struct Slot {
    std::size_t length = 0;
    std::int64_t step = 0;
    std::vector<double> exp_avg;
    std::vector<double> exp_avg_sq;
  };

  OptimizerConfig config_;
  std::vector<Slot> slots_;
};

}  // namespace fsdp

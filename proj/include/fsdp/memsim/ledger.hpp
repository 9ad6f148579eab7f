// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "fsdp/errors.hpp"

namespace fsdp {

enum class MemCategory { kShardedParams = 0, kUnshardedParams, kGrads, kActivations, kOptimizerState };

inline constexpr int kNumMemCategories = 5;

inline const char* category_name(MemCategory c) {
  switch (c) {
    case MemCategory::kShardedParams:
      return "sharded_params";
    case MemCategory::kUnshardedParams:
      return "unsharded_params";
    case MemCategory::kGrads:
      return "grads";
    case MemCategory::kActivations:
      return "activations";
    case MemCategory::kOptimizerState:
      return "optimizer_state";
  }
  return "?";
}

struct LedgerSample {
  double t = 0;
  std::array<std::int64_t, kNumMemCategories> live{};
};

// Bytes in use per category over time. "Parameter" memory is sharded plus
// unsharded parameter bytes, tracked as its own peak because the memory
// formulas are stated for that sum.
class MemoryLedger {
 public:
  void allocate(MemCategory c, std::int64_t bytes, double t) { change(c, bytes, t); }

  void release(MemCategory c, std::int64_t bytes, double t) {
    if (live_[idx(c)] < bytes) {
      throw SimulationError(std::string("ledger underflow in ") + category_name(c));
    }
    change(c, -bytes, t);
  }

  std::int64_t live(MemCategory c) const { return live_[idx(c)]; }
  std::int64_t peak(MemCategory c) const { return peak_[idx(c)]; }
  std::int64_t live_total() const {
    std::int64_t s = 0;
    for (auto v : live_) s += v;
    return s;
  }
  std::int64_t peak_total() const { return peak_total_; }
  std::int64_t live_params() const { return live(MemCategory::kShardedParams) + live(MemCategory::kUnshardedParams); }
  std::int64_t peak_params() const { return peak_params_; }
  const std::vector<LedgerSample>& series() const { return series_; }

  std::string snapshot() const {
    std::ostringstream os;
    for (int i = 0; i < kNumMemCategories; ++i) {
      os << category_name(static_cast<MemCategory>(i)) << "=" << live_[i] << " (peak " << peak_[i] << ") ";
    }
    os << "total=" << live_total() << " (peak " << peak_total_ << ")";
    return os.str();
  }

 private:
  static int idx(MemCategory c) { return static_cast<int>(c); }

  void change(MemCategory c, std::int64_t delta, double t) {
    live_[idx(c)] += delta;
    peak_[idx(c)] = std::max(peak_[idx(c)], live_[idx(c)]);
    peak_total_ = std::max(peak_total_, live_total());
    peak_params_ = std::max(peak_params_, live_params());
    series_.push_back({t, live_});
  }

  std::array<std::int64_t, kNumMemCategories> live_{};
  std::array<std::int64_t, kNumMemCategories> peak_{};
  std::int64_t peak_total_ = 0;
  std::int64_t peak_params_ = 0;
  std::vector<LedgerSample> series_;
};

}  // namespace fsdp

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fsdp/collectives/fabric.hpp"
#include "fsdp/collectives/plan.hpp"
#include "fsdp/errors.hpp"

namespace fsdp {

// Closed-form cross-host elements sent per GPU per iteration for a model of
// M elements. Replication does one all-reduce; full sharding does a forward
// all-gather, a backward all-gather and a reduce-scatter; the hybrid figure
// is the one quoted for F = W/G. A single host has no cross-host links.
inline double predicted_cross_host(Strategy s, double model_elems, int world, int host_size) {
  if (world <= 1 || host_size >= world) return 0;
  const double w = world;
  switch (s) {
    case Strategy::kReplicate:
      return 2 * model_elems * (w - 1) / w;
    case Strategy::kFull:
      return 3 * model_elems * (w - 1) / w;
    case Strategy::kHybrid:
      return 2 * model_elems * (w - 1) / (static_cast<double>(host_size) * w);
  }
  return 0;
}

struct TrafficReport {
  Strategy strategy = Strategy::kFull;
  double measured = 0;  // max over ranks, per iteration
  double predicted = 0;
  std::vector<double> per_rank;  // cross-host elements per iteration

  bool matches(double tol = 1e-9) const { return std::abs(measured - predicted) <= tol; }
};

// `counters` are the fabric's per-rank data counters after `iterations` full
// training iterations. The per-GPU figure is that of the busiest rank.
inline TrafficReport traffic_report(const std::vector<TrafficCounters>& counters, const ShardingPlan& plan,
                                    double model_elems, int iterations) {
  if (iterations <= 0) throw StateError("traffic report requested before any training iteration");
  if (static_cast<int>(counters.size()) != plan.world_size) throw PlanError("traffic counters do not cover the world");
  TrafficReport r;
  r.strategy = plan.strategy();
  r.predicted = predicted_cross_host(r.strategy, model_elems, plan.world_size, plan.host_size);
  for (const auto& c : counters) {
    const double v = c.cross_host() / iterations;
    r.per_rank.push_back(v);
    r.measured = std::max(r.measured, v);
  }
  return r;
}

inline TrafficReport traffic_report(const Fabric& fabric, const ShardingPlan& plan, double model_elems,
                                    int iterations) {
  std::vector<TrafficCounters> counters;
  for (int r = 0; r < fabric.world_size(); ++r) counters.push_back(fabric.traffic(r));
  return traffic_report(counters, plan, model_elems, iterations);
}

}  // namespace fsdp

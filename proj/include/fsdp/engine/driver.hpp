// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "fsdp/collectives/fabric.hpp"
#include "fsdp/engine/config.hpp"
#include "fsdp/engine/rank_engine.hpp"
#include "fsdp/flatparam/layout.hpp"
#include "fsdp/memsim/timeline.hpp"

namespace fsdp {

// Global micro-batches of one step; every rank takes an equal slice of rows.
using StepBatches = std::vector<MicroBatch>;

// Per-rank initial shards, one vector per unit.
using ShardSource = std::function<std::vector<std::vector<double>>(int rank, const std::vector<FlatParamLayout>&)>;

// Shards cut from full parameter tensors.
inline std::vector<double> flatten_unit(const FlatParamLayout& layout, const std::vector<Tensor<double>>& params) {
  std::vector<double> flat(layout.padded_numel, 0.0);
  for (const auto& o : layout.originals) {
    const auto& p = params.at(o.param_index);
    if (p.shape() != o.shape) throw ShapeError("parameter " + o.name + " has shape " + shape_str(p.shape()));
    std::copy(p.storage().begin(), p.storage().end(), flat.begin() + static_cast<std::ptrdiff_t>(o.offset));
  }
  return flat;
}

inline ShardSource shards_from_params(std::vector<Tensor<double>> params, const ShardingPlan& plan) {
  return [params = std::move(params), plan](int rank, const std::vector<FlatParamLayout>& layouts) {
    std::vector<std::vector<double>> out;
    const auto k = static_cast<std::size_t>(plan.shard_index(rank));
    for (const auto& l : layouts) {
      auto flat = flatten_unit(l, params);
      auto begin = flat.begin() + static_cast<std::ptrdiff_t>(l.shard_offset(k));
      out.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(l.shard_numel()));
    }
    return out;
  };
}

// Inverse of flattening: full parameter tensors from every unit's flat buffer.
inline std::vector<Tensor<double>> unflatten(const ModelSpec& model, const std::vector<FlatParamLayout>& layouts,
                                             const std::vector<std::vector<double>>& flats) {
  std::vector<Tensor<double>> params;
  for (const auto& p : model.params()) params.emplace_back(p.shape);
  for (std::size_t u = 0; u < layouts.size(); ++u) {
    for (const auto& o : layouts[u].originals) {
      auto begin = flats[u].begin() + static_cast<std::ptrdiff_t>(o.offset);
      std::copy(begin, begin + static_cast<std::ptrdiff_t>(o.numel), params[o.param_index].storage().begin());
    }
  }
  return params;
}

struct RankReport {
  MemoryStats memory;
  std::vector<TraceRecord> trace;
  std::vector<DeviceEvent> events;
  std::vector<std::string> warnings;
  std::vector<StepResult> steps;
  std::vector<TrafficCounters> traffic_after_step;  // cumulative, own counters
  std::vector<MemoryStats> memory_after_step;
  int max_inflight = 0;
  double makespan = 0;
};

struct ShardedRun {
  std::vector<FlatParamLayout> layouts;
  std::vector<std::vector<Tensor<double>>> params_per_step;  // after each step
  std::vector<double> losses;
  std::vector<TrafficCounters> traffic;
  std::vector<RankReport> ranks;
  double replica_divergence = 0;  // max |diff| between replicas of one shard
};

struct RunOptions {
  ExecutionMode mode = ExecutionMode::kThreaded;
  FabricFaults faults;
  Accumulation accumulation = Accumulation::kOff;
};

template <Scalar C>
ShardedRun run_sharded_as(const ModelSpec& model, const std::vector<LayerRange>& annotated, const EngineConfig& cfg,
                          const ShardSource& init, const std::vector<StepBatches>& steps, const RunOptions& opts) {
  const auto& plan = cfg.plan;
  const int world = plan.world_size;
  const UnitAssignment assignment = assign_units(model, annotated);
  Fabric fabric(world, plan.host_size, opts.mode);
  fabric.set_faults(opts.faults);

  ShardedRun out;
  out.layouts = build_flat_params(model, assignment, static_cast<std::size_t>(plan.sharding_factor));
  out.ranks.resize(static_cast<std::size_t>(world));
  // snapshots[step][rank][unit]
  std::vector<std::vector<std::vector<std::vector<double>>>> snapshots(
      steps.size(), std::vector<std::vector<std::vector<double>>>(static_cast<std::size_t>(world)));

  run_ranks(fabric, [&](int rank) {
    RankEngine<C> engine(model, assignment, cfg, fabric, rank);
    engine.load_shards(init(rank, engine.layouts()));
    auto& report = out.ranks[static_cast<std::size_t>(rank)];
    for (std::size_t s = 0; s < steps.size(); ++s) {
      StepBatches local;
      for (const auto& mb : steps[s]) {
        const std::size_t rows = mb.input.rows();
        if (rows % static_cast<std::size_t>(world) != 0) throw ShapeError("batch rows not divisible by world size");
        const std::size_t per = rows / static_cast<std::size_t>(world);
        const std::size_t lo = per * static_cast<std::size_t>(rank);
        local.push_back({mb.input.slice_rows(lo, lo + per), mb.target.slice_rows(lo, lo + per), mb.sequence});
      }
      report.steps.push_back(engine.train_step(local, opts.accumulation));
      // Every collective of this step has completed for this rank, and it has
      // not entered any of the next, so its own counters are exact here.
      report.traffic_after_step.push_back(fabric.traffic(rank));
      report.memory_after_step.push_back(engine.timeline().memory_stats());
      snapshots[s][static_cast<std::size_t>(rank)] = engine.shards();
    }
    report.memory = engine.timeline().memory_stats();
    report.trace = engine.timeline().trace();
    report.events = engine.timeline().events();
    report.warnings = engine.warnings();
    report.max_inflight = engine.max_inflight();
    report.makespan = engine.timeline().makespan();
  });

  const int f = plan.sharding_factor;
  for (std::size_t s = 0; s < steps.size(); ++s) {
    std::vector<std::vector<double>> flats;
    for (std::size_t u = 0; u < out.layouts.size(); ++u) {
      std::vector<double> flat;
      for (int k = 0; k < f; ++k) {
        const auto& shard = snapshots[s][static_cast<std::size_t>(k)][u];
        flat.insert(flat.end(), shard.begin(), shard.end());
      }
      for (int r = f; r < world; ++r) {
        const auto& a = snapshots[s][static_cast<std::size_t>(r % f)][u];
        const auto& b = snapshots[s][static_cast<std::size_t>(r)][u];
        for (std::size_t i = 0; i < a.size(); ++i) {
          out.replica_divergence = std::max(out.replica_divergence, std::abs(a[i] - b[i]));
        }
      }
      flats.push_back(std::move(flat));
    }
    out.params_per_step.push_back(unflatten(model, out.layouts, flats));
    out.losses.push_back(out.ranks[0].steps[s].loss);
  }
  for (int r = 0; r < world; ++r) out.traffic.push_back(fabric.traffic(r));
  return out;
}

inline ShardedRun run_sharded(const ModelSpec& model, const std::vector<LayerRange>& annotated, const EngineConfig& cfg,
                              const ShardSource& init, const std::vector<StepBatches>& steps,
                              const RunOptions& opts = {}) {
  if (cfg.precision.mixed) return run_sharded_as<float>(model, annotated, cfg, init, steps, opts);
  return run_sharded_as<double>(model, annotated, cfg, init, steps, opts);
}

inline double max_abs_diff(const std::vector<Tensor<double>>& a, const std::vector<Tensor<double>>& b) {
  if (a.size() != b.size()) throw ShapeError("parameter lists differ in length");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) throw ShapeError("parameter shapes differ");
    for (std::size_t j = 0; j < a[i].numel(); ++j) {
      const double e = std::abs(a[i][j] - b[i][j]);
      d = std::isnan(e) ? std::numeric_limits<double>::infinity() : std::max(d, e);
    }
  }
  return d;
}

}  // namespace fsdp

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fsdp/engine/driver.hpp"
#include "fsdp/memsim/timeline.hpp"
#include "fsdp/numerics/model.hpp"

namespace fsdp {

// Three equal units of psi = 8 on four ranks (F = 4): Linear(3->2) holds 8
// elements, each Linear(2->2) holds 6 and pads to 8.
struct ScenarioModel {
  ModelSpec model = ModelSpec({LinearSpec{3, 2}, LinearSpec{2, 2}, LinearSpec{2, 2}});
  std::vector<LayerRange> units{{0, 1}, {1, 2}, {2, 3}};
};

inline std::vector<StepBatches> scenario_batches(const ModelSpec& model, int steps, std::size_t rows) {
  std::vector<StepBatches> out;
  for (int s = 0; s < steps; ++s) {
    Tensor<double> x({rows, model.input_dim()});
    Tensor<double> y({rows, model.output_dim()});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>((i * 7 + s) % 5) - 2.0;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = static_cast<double>((i * 3 + s) % 3) - 1.0;
    out.push_back({MicroBatch{std::move(x), std::move(y), {}}});
  }
  return out;
}

inline std::vector<Tensor<double>> scenario_params(const ModelSpec& model) {
  std::vector<Tensor<double>> params;
  for (const auto& p : model.params()) {
    Tensor<double> t(p.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.125 * static_cast<double>(static_cast<int>(i % 5) - 2);
    params.push_back(std::move(t));
  }
  return params;
}

// A host that issues work far faster than the device drains it, with
// collectives and compute of similar cost.
inline CostModel fast_host_costs() { return {1.0, 0.01, 0.1, 1e-4}; }

struct ScenarioReport {
  int retries = 0;
  double makespan = 0;  // simulated time for all steps
  int max_inflight = 0;
  bool overlap = false;  // some all-gather ran while another unit computed
  std::int64_t peak_reserved = 0;
  std::int64_t peak_unsharded = 0;
};

// True if some all-gather ran while a different unit was computing.
// Reduce-scatters are left out: they are meant to trail the next unit's compute.
inline bool has_gather_compute_overlap(const std::vector<DeviceEvent>& events) {
  for (const auto& c : events) {
    if (c.collective != CollectiveKind::kAllGather) continue;
    for (const auto& k : events) {
      if (k.queue != Queue::kCompute || k.unit == c.unit || k.unit < 0) continue;
      if (k.start < c.end && c.start < k.end) return true;
    }
  }
  return false;
}

inline ScenarioReport run_scenario(std::optional<int> rate_limit, std::int64_t capacity_bytes, bool forward_prefetch,
                                   CostModel cost = fast_host_costs(), int steps = 3) {
  ScenarioModel sm;
  EngineConfig cfg;
  cfg.plan = build_plan(4, 4, 4);
  cfg.rate_limit = rate_limit;
  cfg.backward_prefetch = true;
  cfg.forward_prefetch = forward_prefetch;
  cfg.keep_outermost_unsharded = false;
  cfg.cost = cost;
  cfg.capacity_bytes = capacity_bytes;
  cfg.optimizer.lr = 0.01;
  auto run = run_sharded(sm.model, sm.units, cfg, shards_from_params(scenario_params(sm.model), cfg.plan),
                         scenario_batches(sm.model, steps, 8));
  ScenarioReport r;
  const auto& rank0 = run.ranks[0];
  for (const auto& rk : run.ranks) r.retries = std::max(r.retries, rk.memory.num_alloc_retries);
  r.makespan = rank0.makespan;
  r.max_inflight = rank0.max_inflight;
  r.peak_reserved = rank0.memory.peak_reserved_bytes;
  r.peak_unsharded = rank0.memory.peak_by_category[static_cast<int>(MemCategory::kUnshardedParams)];
  r.overlap = has_gather_compute_overlap(rank0.events);
  return r;
}

struct RetryReport {
  std::int64_t capacity = 0;
  ScenarioReport off;
  ScenarioReport limit1;
  ScenarioReport limit2;
};

// Capacity is what the limiter-2 run reserves at peak: sharded state,
// gradients, activations and room for exactly two unsharded units.
inline RetryReport retry_experiment(bool forward_prefetch = true) {
  RetryReport r;
  const auto probe = run_scenario(2, 0, forward_prefetch);
  r.capacity = probe.peak_reserved;
  r.limit2 = run_scenario(2, r.capacity, forward_prefetch);
  r.limit1 = run_scenario(1, r.capacity, forward_prefetch);
  r.off = run_scenario(std::nullopt, r.capacity, forward_prefetch);
  return r;
}

struct SweepPoint {
  std::int64_t elements_per_collective = 0;
  int collectives = 0;
  double comm_time = 0;
};

// Moves `total_elements` as equal all-gathers of each given size, back to
// back on one communication queue.
inline std::vector<SweepPoint> collective_size_sweep(std::int64_t total_elements,
                                                     const std::vector<std::int64_t>& sizes, CostModel cost = {},
                                                     std::size_t element_bytes = sizeof(double)) {
  std::vector<SweepPoint> out;
  for (std::int64_t size : sizes) {
    if (size <= 0 || total_elements % size != 0) throw ConfigError("collective size must divide the total volume");
    Timeline tl(0, cost);
    const auto n = static_cast<int>(total_elements / size);
    for (int i = 0; i < n; ++i) {
      tl.collective(CollectiveKind::kAllGather, i, size * static_cast<std::int64_t>(element_bytes), {});
    }
    out.push_back({size, n, tl.queue_tail(Queue::kComm)});
  }
  return out;
}

}  // namespace fsdp

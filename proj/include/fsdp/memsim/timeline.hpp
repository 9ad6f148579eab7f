// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsdp/collectives/fabric.hpp"
#include "fsdp/errors.hpp"
#include "fsdp/memsim/allocator.hpp"
#include "fsdp/memsim/ledger.hpp"

namespace fsdp {

// Linear cost model in simulated time units: a collective costs
// alpha + beta * bytes, a compute kernel gamma * flops, and the host spends
// delta issuing each operation.
struct CostModel {
  double alpha = 1.0;
  double beta = 0.01;
  double gamma = 0.01;
  double delta = 0.01;
};

enum class TraceKind {
  kAgIssue,
  kAgDone,
  kRsIssue,
  kRsDone,
  kArIssue,
  kArDone,
  kComputeBegin,
  kComputeEnd,
  kAlloc,
  kFree,
  kRetry,
  kStep,
  kGradReady,
};

inline const char* trace_kind_name(TraceKind k) {
  static constexpr std::array<const char*, 13> names = {
      "AG_issue",      "AG_done",     "RS_issue", "RS_done", "AR_issue", "AR_done",   "compute_begin",
      "compute_end",   "alloc",       "free",     "retry",   "step",     "grad_ready"};
  return names[static_cast<std::size_t>(k)];
}

enum class Phase { kNone, kForward, kBackward, kOptimizer, kInit };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kNone:
      return "none";
    case Phase::kForward:
      return "fwd";
    case Phase::kBackward:
      return "bwd";
    case Phase::kOptimizer:
      return "opt";
    case Phase::kInit:
      return "init";
  }
  return "?";
}

// One row of the exported event trace. Rows appear in host issue order; the
// `t` of *_done and compute_* rows is the simulated device time.
struct TraceRecord {
  int rank = 0;
  std::int64_t seq = 0;
  TraceKind kind = TraceKind::kStep;
  int unit = -1;
  std::int64_t bytes = 0;
  double t = 0;
  Phase phase = Phase::kNone;
  int step = 0;
};

struct DeviceEvent {
  EventId id = 0;
  Queue queue = Queue::kCompute;
  double issue = 0;
  double start = 0;
  double end = 0;
  int unit = -1;
  std::optional<CollectiveKind> collective;
};

struct MemoryStats {
  int num_alloc_retries = 0;
  std::int64_t peak_allocated_bytes = 0;
  std::int64_t peak_reserved_bytes = 0;
  std::int64_t peak_param_bytes = 0;
  std::array<std::int64_t, kNumMemCategories> peak_by_category{};
};

struct RunSummary {
  double makespan = 0;
  MemoryStats memory;
};

// Discrete-event model of one rank: a host issue thread and two FIFO device
// queues (compute, communication). Event times are resolved when the host
// issues them, because the allocator must decide block reuse at that moment.
class Timeline {
 public:
  Timeline(int rank = 0, CostModel cost = {}, std::int64_t capacity_bytes = 0)
      : rank_(rank), cost_(cost), allocator_(capacity_bytes) {}

  int rank() const { return rank_; }
  const CostModel& cost() const { return cost_; }
  double host_time() const { return host_t_; }
  double queue_tail(Queue q) const { return tail_[static_cast<int>(q)]; }
  void set_phase(Phase p) { phase_ = p; }
  Phase phase() const { return phase_; }
  void set_step(int step) { step_ = step; }

  // Appends a device event; it starts once the host has issued it, its queue
  // is free and every waited-on event has completed.
  EventId issue(Queue q, double cost, std::span<const EventId> waits, int unit = -1) {
    host_t_ += cost_.delta;
    const EventId id = static_cast<EventId>(events_.size());
    double start = std::max(host_t_, tail_[static_cast<int>(q)]);
    for (EventId w : waits) {
      if (w == kNoEvent) continue;
      if (w < 0 || w >= id) {
        throw SimulationError("wait edge from event " + std::to_string(id) + " to " + std::to_string(w) +
                              " is not acyclic");
      }
      start = std::max(start, events_[static_cast<std::size_t>(w)].end);
    }
    DeviceEvent e{id, q, host_t_, start, start + cost, unit, std::nullopt};
    tail_[static_cast<int>(q)] = e.end;
    events_.push_back(e);
    return id;
  }

  EventId issue(Queue q, double cost, std::initializer_list<EventId> waits = {}, int unit = -1) {
    return issue(q, cost, std::span<const EventId>(waits.begin(), waits.size()), unit);
  }

  EventId collective(CollectiveKind kind, int unit, std::int64_t bytes, std::span<const EventId> waits) {
    const EventId id = issue(Queue::kComm, cost_.alpha + cost_.beta * static_cast<double>(bytes), waits, unit);
    events_.back().collective = kind;
    const auto& e = events_.back();
    TraceKind issue_kind = TraceKind::kAgIssue;
    TraceKind done_kind = TraceKind::kAgDone;
    if (kind == CollectiveKind::kReduceScatter) {
      issue_kind = TraceKind::kRsIssue;
      done_kind = TraceKind::kRsDone;
    } else if (kind == CollectiveKind::kAllReduce) {
      issue_kind = TraceKind::kArIssue;
      done_kind = TraceKind::kArDone;
    }
    record(issue_kind, unit, bytes, e.issue);
    record(done_kind, unit, bytes, e.end);
    return id;
  }

  EventId compute(int unit, double flops, std::span<const EventId> waits) {
    const EventId id = issue(Queue::kCompute, cost_.gamma * flops, waits, unit);
    const auto& e = events_.back();
    record(TraceKind::kComputeBegin, unit, 0, e.start);
    record(TraceKind::kComputeEnd, unit, 0, e.end);
    return id;
  }

  EventId optimizer_step(double flops, std::span<const EventId> waits) {
    const EventId id = issue(Queue::kCompute, cost_.gamma * flops, waits, -1);
    record(TraceKind::kStep, -1, 0, events_.back().end);
    return id;
  }

  void mark(TraceKind kind, int unit, std::int64_t bytes = 0) { record(kind, unit, bytes, host_t_); }

  bool completed(EventId id) const { return id == kNoEvent || event(id).end <= host_t_; }

  const DeviceEvent& event(EventId id) const { return events_.at(static_cast<std::size_t>(id)); }
  const std::vector<DeviceEvent>& events() const { return events_; }

  // Blocks the host until `id` has completed on the device.
  void host_wait(EventId id) {
    if (id != kNoEvent) host_t_ = std::max(host_t_, event(id).end);
  }

  void host_sync() { host_t_ = std::max({host_t_, tail_[0], tail_[1]}); }

  // Allocation is decided at host-issue time. When nothing fits, the host
  // stalls until both queues drain, returns every cached block and tries
  // once more; a second failure is a hard out-of-memory.
  BlockId allocate(MemCategory category, std::int64_t bytes, Queue queue, int unit = -1) {
    auto done = [this](EventId e) { return completed(e); };
    auto block = allocator_.try_allocate(bytes, queue, done);
    if (!block) {
      allocator_.note_retry();
      record(TraceKind::kRetry, unit, bytes, host_t_);
      host_sync();
      allocator_.release_cached();
      block = allocator_.try_allocate(bytes, queue, done);
      if (!block) {
        throw SimulatedOOM("rank " + std::to_string(rank_) + ": out of memory allocating " + std::to_string(bytes) +
                               " bytes after a retry (capacity " + std::to_string(allocator_.capacity()) + ")",
                           ledger_.snapshot());
      }
    }
    block_category_[*block] = category;
    ledger_.allocate(category, bytes, host_t_);
    record(TraceKind::kAlloc, unit, bytes, host_t_);
    return *block;
  }

  void free(BlockId block, EventId last_use, int unit = -1) {
    const std::int64_t bytes = allocator_.block_bytes(block);
    allocator_.free(block, last_use);
    ledger_.release(block_category_.at(block), bytes, host_t_);
    record(TraceKind::kFree, unit, bytes, host_t_);
  }

  MemoryStats memory_stats() const {
    MemoryStats s;
    s.num_alloc_retries = allocator_.retries();
    s.peak_allocated_bytes = ledger_.peak_total();
    s.peak_reserved_bytes = allocator_.peak_reserved();
    s.peak_param_bytes = ledger_.peak_params();
    for (int i = 0; i < kNumMemCategories; ++i) s.peak_by_category[i] = ledger_.peak(static_cast<MemCategory>(i));
    return s;
  }

  // Completion time of everything issued so far.
  double makespan() const { return std::max({host_t_, tail_[0], tail_[1]}); }

  RunSummary run() const { return {makespan(), memory_stats()}; }

  const std::vector<TraceRecord>& trace() const { return trace_; }
  const MemoryLedger& ledger() const { return ledger_; }
  const CachingAllocator& allocator() const { return allocator_; }

 private:
  void record(TraceKind kind, int unit, std::int64_t bytes, double t) {
    trace_.push_back({rank_, static_cast<std::int64_t>(trace_.size()), kind, unit, bytes, t, phase_, step_});
  }

  int rank_;
  CostModel cost_;
  double host_t_ = 0;
  std::array<double, 2> tail_{0, 0};
  std::vector<DeviceEvent> events_;
  CachingAllocator allocator_;
  MemoryLedger ledger_;
  std::map<BlockId, MemCategory> block_category_;
  std::vector<TraceRecord> trace_;
  Phase phase_ = Phase::kNone;
  int step_ = 0;
};

}  // namespace fsdp

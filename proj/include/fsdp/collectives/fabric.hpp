// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fsdp/collectives/plan.hpp"
#include "fsdp/errors.hpp"
#include "fsdp/numerics/tensor.hpp"

namespace fsdp {

enum class CollectiveKind { kAllGather = 0, kReduceScatter = 1, kAllReduce = 2 };

inline const char* collective_name(CollectiveKind k) {
  switch (k) {
    case CollectiveKind::kAllGather:
      return "all_gather";
    case CollectiveKind::kReduceScatter:
      return "reduce_scatter";
    case CollectiveKind::kAllReduce:
      return "all_reduce";
  }
  return "?";
}

enum class ReduceOp { kSum, kMax };

// Control traffic (loss reporting, overflow votes) is ledgered separately so
// that it does not pollute the parameter/gradient traffic figures.
enum class TrafficClass { kData, kControl };

enum class ExecutionMode {
  kThreaded,    // rank workers run freely between rendezvous points
  kRoundRobin,  // exactly one worker runs at a time; turns pass in rank order
};

struct LinkCounters {
  double intra_host = 0;
  double cross_host = 0;
  double total() const { return intra_host + cross_host; }
};

// Elements sent by one rank, split by collective kind and link locality.
struct TrafficCounters {
  std::array<LinkCounters, 3> by_kind{};
  LinkCounters control{};

  const LinkCounters& of(CollectiveKind k) const { return by_kind[static_cast<int>(k)]; }
  double cross_host() const { return by_kind[0].cross_host + by_kind[1].cross_host + by_kind[2].cross_host; }
  double intra_host() const { return by_kind[0].intra_host + by_kind[1].intra_host + by_kind[2].intra_host; }
};

struct RendezvousRecord {
  enum class Phase { kEnter, kExit };
  std::uint64_t seq = 0;  // global order of fabric observations
  int rank = 0;
  std::uint64_t op = 0;  // collective instance id
  Phase phase = Phase::kEnter;
  CollectiveKind kind = CollectiveKind::kAllGather;
};

// Test hook: deliberately corrupts reduce-scatter routing so that rank k of
// the group receives chunk k+1. Used to prove that equivalence checks fail.
struct FabricFaults {
  bool misroute_reduce_scatter = false;
};

// In-process communication fabric for W simulated ranks. Every collective is
// a rendezvous: the last member to arrive executes it (reductions in
// ascending rank order) and only then are the members released.
//
// Traffic is accounted as for a bandwidth-optimal ring over the group in
// ascending rank order: all-gather and reduce-scatter send (n-1)/n of the
// gathered/reduced buffer per rank, all-reduce sends 2(n-1)/n of it. A rank's
// elements count as cross-host when its ring successor sits on another host.
class Fabric {
 public:
  explicit Fabric(int world_size, int host_size = 0, ExecutionMode mode = ExecutionMode::kThreaded)
      : world_size_(world_size), host_size_(host_size > 0 ? host_size : world_size), mode_(mode) {
    if (world_size_ < 1) throw PlanError("fabric needs at least one rank");
    if (world_size_ % host_size_ != 0) throw PlanError("host size must divide world size");
    ranks_.resize(world_size_);
    traffic_.resize(world_size_);
  }

  Fabric(const Fabric&) = delete;
  Fabric& operator=(const Fabric&) = delete;

  int world_size() const { return world_size_; }
  int host_size() const { return host_size_; }
  ExecutionMode mode() const { return mode_; }

  void set_faults(FabricFaults faults) {
    std::lock_guard lk(mu_);
    faults_ = faults;
  }

  // Output on every member: members' inputs concatenated in ascending rank
  // order. `in` may alias this rank's own chunk of `out`.
  template <Scalar T>
  void all_gather(int rank, const Group& group, std::span<const T> in, std::span<T> out,
                  TrafficClass cls = TrafficClass::kData) {
    Slot slot{in.data(), out.data(), in.size(), out.size()};
    collective(rank, group, CollectiveKind::kAllGather, dtype_of<T>(), ReduceOp::kSum, cls, slot,
               [](PendingOp& op) { exec_all_gather<T>(op); });
  }

  // Member k of the group receives the elementwise reduction of every
  // member's k-th chunk.
  template <Scalar T>
  void reduce_scatter(int rank, const Group& group, std::span<const T> in, std::span<T> out,
                      ReduceOp op = ReduceOp::kSum, TrafficClass cls = TrafficClass::kData) {
    Slot slot{in.data(), out.data(), in.size(), out.size()};
    collective(rank, group, CollectiveKind::kReduceScatter, dtype_of<T>(), op, cls, slot,
               [this](PendingOp& p) { exec_reduce_scatter<T>(p, faults_.misroute_reduce_scatter); });
  }

  template <Scalar T>
  void all_reduce(int rank, const Group& group, std::span<T> inout, ReduceOp op = ReduceOp::kSum,
                  TrafficClass cls = TrafficClass::kData) {
    Slot slot{inout.data(), inout.data(), inout.size(), inout.size()};
    collective(rank, group, CollectiveKind::kAllReduce, dtype_of<T>(), op, cls, slot,
               [](PendingOp& p) { exec_all_reduce<T>(p); });
  }

  TrafficCounters traffic(int rank) const {
    std::lock_guard lk(mu_);
    return traffic_.at(rank);
  }

  void reset_traffic() {
    std::lock_guard lk(mu_);
    std::fill(traffic_.begin(), traffic_.end(), TrafficCounters{});
  }

  std::vector<RendezvousRecord> rendezvous_log() const {
    std::lock_guard lk(mu_);
    return log_;
  }

  // --- worker lifecycle, driven by run_ranks ---------------------------------

  void begin_session() {
    std::lock_guard lk(mu_);
    for (auto& r : ranks_) r = RankState{};
    ops_.clear();
    fatal_.reset();
    turn_ = mode_ == ExecutionMode::kRoundRobin ? 0 : -1;
  }

  void wait_for_start(int rank) {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return fatal_ || runs_now(rank); });
  }

  void finish(int rank) {
    std::lock_guard lk(mu_);
    ranks_.at(rank).finished = true;
    ranks_.at(rank).blocked = false;
    if (mode_ == ExecutionMode::kRoundRobin) advance_turn(rank);
    detect_deadlock();
    cv_.notify_all();
  }

 private:
  struct Slot {
    const void* in = nullptr;
    void* out = nullptr;
    std::size_t in_len = 0;
    std::size_t out_len = 0;
  };

  struct PendingOp {
    std::uint64_t id = 0;
    CollectiveKind kind = CollectiveKind::kAllGather;
    DType dtype = DType::kFull;
    ReduceOp reduce = ReduceOp::kSum;
    TrafficClass cls = TrafficClass::kData;
    Group group;
    std::vector<Slot> slots;
    std::size_t arrived = 0;
    std::size_t left = 0;
    bool done = false;
    std::string error;
  };

  struct RankState {
    bool blocked = false;
    bool finished = false;
    std::map<int, std::uint64_t> group_seq;
  };

  using Executor = std::function<void(PendingOp&)>;

  bool runs_now(int rank) const { return mode_ == ExecutionMode::kThreaded || turn_ == rank; }

  int group_id(const Group& g) {
    auto it = group_ids_.find(g);
    if (it != group_ids_.end()) return it->second;
    const int id = static_cast<int>(group_ids_.size());
    group_ids_.emplace(g, id);
    return id;
  }

  void validate_group(int rank, const Group& group) const {
    if (group.empty()) throw CollectiveError("empty group");
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (group[i] < 0 || group[i] >= world_size_) throw CollectiveError("group names rank out of range");
      if (i && group[i] <= group[i - 1]) throw CollectiveError("group must be strictly ascending");
    }
    if (!std::binary_search(group.begin(), group.end(), rank)) {
      throw CollectiveError("rank " + std::to_string(rank) + " is not a member of the group it entered");
    }
  }

  void collective(int rank, const Group& group, CollectiveKind kind, DType dtype, ReduceOp reduce, TrafficClass cls,
                  Slot slot, const Executor& exec) {
    validate_group(rank, group);
    std::unique_lock lk(mu_);
    if (fatal_) throw DeadlockError(*fatal_);
    const int gid = group_id(group);
    const std::uint64_t seq = ranks_[rank].group_seq[gid]++;
    auto key = std::make_pair(gid, seq);
    auto [it, inserted] = ops_.try_emplace(key);
    PendingOp& op = it->second;
    if (inserted) {
      op.id = next_op_id_++;
      op.kind = kind;
      op.dtype = dtype;
      op.reduce = reduce;
      op.cls = cls;
      op.group = group;
      op.slots.resize(group.size());
    } else if (op.kind != kind || op.dtype != dtype || op.reduce != reduce) {
      op.error = std::string("collective mismatch: rank ") + std::to_string(rank) + " entered " +
                 collective_name(kind) + " while peers entered " + collective_name(op.kind);
    }
    const auto idx = static_cast<std::size_t>(std::lower_bound(group.begin(), group.end(), rank) - group.begin());
    op.slots[idx] = slot;
    ++op.arrived;
    log_.push_back({log_seq_++, rank, op.id, RendezvousRecord::Phase::kEnter, kind});

    if (op.arrived == group.size()) {
      if (op.error.empty()) op.error = validate_lengths(op);
      if (op.error.empty()) {
        try {
          exec(op);
          account(op);
        } catch (const std::exception& e) {
          op.error = e.what();
        }
      }
      op.done = true;
      for (int m : group) ranks_[m].blocked = false;
    } else {
      ranks_[rank].blocked = true;
    }
    if (mode_ == ExecutionMode::kRoundRobin) advance_turn(rank);
    detect_deadlock();
    cv_.notify_all();
    cv_.wait(lk, [&] { return (op.done && runs_now(rank)) || (fatal_ && !op.done); });
    if (!op.done) throw DeadlockError(*fatal_);
    log_.push_back({log_seq_++, rank, op.id, RendezvousRecord::Phase::kExit, kind});
    const std::string error = op.error;
    if (++op.left == group.size()) ops_.erase(key);
    if (!error.empty()) throw CollectiveError(error);
  }

  static std::string validate_lengths(const PendingOp& op) {
    const std::size_t n = op.group.size();
    const Slot& first = op.slots.front();
    for (std::size_t i = 0; i < n; ++i) {
      const Slot& s = op.slots[i];
      if (s.in_len != first.in_len) {
        return std::string(collective_name(op.kind)) + ": uneven inputs across ranks (" +
               std::to_string(first.in_len) + " vs " + std::to_string(s.in_len) + " on rank " +
               std::to_string(op.group[i]) + ")";
      }
      switch (op.kind) {
        case CollectiveKind::kAllGather:
          if (s.out_len != n * s.in_len) return "all_gather: output must hold group_size * input elements";
          break;
        case CollectiveKind::kReduceScatter:
          if (s.in_len % n != 0) {
            return "reduce_scatter: input length " + std::to_string(s.in_len) + " not divisible by group size " +
                   std::to_string(n);
          }
          if (s.out_len != s.in_len / n) return "reduce_scatter: output must hold input / group_size elements";
          break;
        case CollectiveKind::kAllReduce:
          break;
      }
    }
    return {};
  }

  template <Scalar T>
  static void exec_all_gather(PendingOp& op) {
    const std::size_t n = op.group.size();
    const std::size_t len = op.slots.front().in_len;
    for (std::size_t dst = 0; dst < n; ++dst) {
      T* out = static_cast<T*>(op.slots[dst].out);
      for (std::size_t src = 0; src < n; ++src) {
        const T* in = static_cast<const T*>(op.slots[src].in);
        T* target = out + src * len;
        if (in != target) std::copy(in, in + len, target);
      }
    }
  }

  template <Scalar T>
  static T combine(ReduceOp op, T acc, T v) {
    return op == ReduceOp::kSum ? acc + v : std::max(acc, v);
  }

  template <Scalar T>
  static void exec_reduce_scatter(PendingOp& op, bool misroute) {
    const std::size_t n = op.group.size();
    const std::size_t chunk = op.slots.front().in_len / n;
    std::vector<std::vector<T>> results(n, std::vector<T>(chunk));
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t src_chunk = misroute ? (k + 1) % n : k;
      for (std::size_t i = 0; i < chunk; ++i) {
        T acc = static_cast<const T*>(op.slots[0].in)[src_chunk * chunk + i];
        for (std::size_t m = 1; m < n; ++m) {
          acc = combine<T>(op.reduce, acc, static_cast<const T*>(op.slots[m].in)[src_chunk * chunk + i]);
        }
        results[k][i] = acc;
      }
    }
    for (std::size_t k = 0; k < n; ++k) std::copy(results[k].begin(), results[k].end(), static_cast<T*>(op.slots[k].out));
  }

  template <Scalar T>
  static void exec_all_reduce(PendingOp& op) {
    const std::size_t n = op.group.size();
    const std::size_t len = op.slots.front().in_len;
    std::vector<T> acc(static_cast<const T*>(op.slots[0].in), static_cast<const T*>(op.slots[0].in) + len);
    for (std::size_t m = 1; m < n; ++m) {
      const T* in = static_cast<const T*>(op.slots[m].in);
      for (std::size_t i = 0; i < len; ++i) acc[i] = combine<T>(op.reduce, acc[i], in[i]);
    }
    for (std::size_t m = 0; m < n; ++m) std::copy(acc.begin(), acc.end(), static_cast<T*>(op.slots[m].out));
  }

  void account(const PendingOp& op) {
    const std::size_t n = op.group.size();
    if (n == 1) return;
    const double frac = static_cast<double>(n - 1) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Slot& s = op.slots[i];
      double sent = 0;
      switch (op.kind) {
        case CollectiveKind::kAllGather:
          sent = frac * static_cast<double>(s.out_len);
          break;
        case CollectiveKind::kReduceScatter:
          sent = frac * static_cast<double>(s.in_len);
          break;
        case CollectiveKind::kAllReduce:
          sent = 2.0 * frac * static_cast<double>(s.in_len);
          break;
      }
      const int rank = op.group[i];
      const int successor = op.group[(i + 1) % n];
      const bool cross = rank / host_size_ != successor / host_size_;
      LinkCounters& c = op.cls == TrafficClass::kControl ? traffic_[rank].control
                                                         : traffic_[rank].by_kind[static_cast<int>(op.kind)];
      (cross ? c.cross_host : c.intra_host) += sent;
    }
  }

  void advance_turn(int from) {
    for (int step = 1; step <= world_size_; ++step) {
      const int r = (from + step) % world_size_;
      if (!ranks_[r].finished && !ranks_[r].blocked) {
        turn_ = r;
        return;
      }
    }
    turn_ = -1;
  }

  void detect_deadlock() {
    if (fatal_) return;
    bool any_live = false;
    bool any_runnable = false;
    for (const auto& r : ranks_) {
      if (r.finished) continue;
      any_live = true;
      if (!r.blocked) any_runnable = true;
    }
    if (!any_live || any_runnable) return;
    std::ostringstream os;
    os << "deadlock: every live rank is blocked in a collective that cannot complete;";
    for (const auto& [key, op] : ops_) {
      if (op.done) continue;
      os << " " << collective_name(op.kind) << "#" << op.id << " has " << op.arrived << "/" << op.group.size()
         << " members";
    }
    fatal_ = os.str();
  }

  const int world_size_;
  const int host_size_;
  const ExecutionMode mode_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<RankState> ranks_;
  std::map<std::pair<int, std::uint64_t>, PendingOp> ops_;
  std::map<Group, int> group_ids_;
  std::vector<TrafficCounters> traffic_;
  std::vector<RendezvousRecord> log_;
  std::uint64_t log_seq_ = 0;
  std::uint64_t next_op_id_ = 0;
  std::optional<std::string> fatal_;
  int turn_ = -1;
  FabricFaults faults_;
};

// Runs fn(rank) on one worker thread per rank and joins them. The first
// non-deadlock failure (lowest rank) is rethrown; a deadlock is rethrown only
// if it is the sole failure mode.
template <typename Fn>
void run_ranks(Fabric& fabric, Fn&& fn) {
  const int world = fabric.world_size();
  fabric.begin_session();
  std::vector<std::exception_ptr> errors(world);
  std::vector<bool> deadlocked(world, false);
  std::vector<std::thread> workers;
  workers.reserve(world);
  for (int r = 0; r < world; ++r) {
    workers.emplace_back([&, r] {
      try {
        fabric.wait_for_start(r);
        fn(r);
      } catch (const DeadlockError&) {
        errors[r] = std::current_exception();
        deadlocked[r] = true;
      } catch (...) {
        errors[r] = std::current_exception();
      }
      fabric.finish(r);
    });
  }
  for (auto& w : workers) w.join();
  for (int r = 0; r < world; ++r) {
    if (errors[r] && !deadlocked[r]) std::rethrow_exception(errors[r]);
  }
  for (int r = 0; r < world; ++r) {
    if (errors[r]) std::rethrow_exception(errors[r]);
  }
}

}  // namespace fsdp

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fsdp/collectives/fabric.hpp"
#include "fsdp/collectives/hybrid.hpp"
#include "fsdp/engine/config.hpp"
#include "fsdp/engine/scaler.hpp"
#include "fsdp/errors.hpp"
#include "fsdp/flatparam/flat_parameter.hpp"
#include "fsdp/flatparam/layout.hpp"
#include "fsdp/memsim/timeline.hpp"
#include "fsdp/numerics/model.hpp"
#include "fsdp/numerics/optimizer.hpp"

namespace fsdp {

// Rows of one micro-batch as seen by one rank. `sequence` optionally selects
// which layers run (dynamic control flow); empty means all in order.
struct MicroBatch {
  Tensor<double> input;
  Tensor<double> target;
  std::vector<std::size_t> sequence;
};

struct StepVerdict {
  bool stepped = true;
  bool found_inf = false;
  double scale = 1.0;
};

struct StepResult {
  double loss = 0;  // mean over the world
  StepVerdict verdict;
  double step_time = 0;
};

// The per-rank runtime. C is the compute precision: double for uniform
// precision, float for mixed. Master shards and optimizer state are double.
//
// Numerics run eagerly on the host while every operation is also issued to
// the rank's Timeline, which decides when it would have run on the device and
// what memory it would have held.
template <Scalar C>
class RankEngine {
 public:
  RankEngine(const ModelSpec& model, UnitAssignment assignment, EngineConfig cfg, Fabric& fabric, int rank)
      : model_(model),
        assign_(std::move(assignment)),
        cfg_(std::move(cfg)),
        fabric_(fabric),
        rank_(rank),
        layouts_(build_flat_params(model_, assign_, static_cast<std::size_t>(cfg_.plan.sharding_factor))),
        opt_(cfg_.optimizer, shard_lengths(layouts_)),
        tl_(rank, cfg_.cost, cfg_.capacity_bytes),
        scaler_(cfg_.scaler) {
    cfg_.validate();
    if (cfg_.precision.mixed != std::is_same_v<C, float>) {
      throw ConfigError("compute type does not match the precision policy");
    }
    const auto shard = static_cast<std::size_t>(cfg_.plan.shard_index(rank_));
    for (const auto& l : layouts_) fps_.emplace_back(l, shard);
    param_pos_.assign(model_.params().size(), 0);
    for (const auto& l : layouts_) {
      for (std::size_t i = 0; i < l.originals.size(); ++i) param_pos_[l.originals[i].param_index] = i;
    }
    units_.resize(layouts_.size());
    tl_.set_phase(Phase::kInit);
    for (std::size_t u = 0; u < units_.size(); ++u) {
      const int unit = static_cast<int>(u);
      units_[u].shard_block = tl_.allocate(MemCategory::kShardedParams, fps_[u].shard_bytes(), Queue::kCompute, unit);
      if (const auto bytes = static_cast<std::int64_t>(opt_.state_bytes(u)); bytes > 0) {
        units_[u].opt_block = tl_.allocate(MemCategory::kOptimizerState, bytes, Queue::kCompute, unit);
      }
    }
    tl_.set_phase(Phase::kNone);
  }

  int rank() const { return rank_; }
  int num_units() const { return static_cast<int>(layouts_.size()); }
  const EngineConfig& config() const { return cfg_; }
  const std::vector<FlatParamLayout>& layouts() const { return layouts_; }
  const FlatParameter<C>& flat_param(int u) const { return fps_.at(static_cast<std::size_t>(u)); }
  const Timeline& timeline() const { return tl_; }
  const ShardedGradScaler& scaler() const { return scaler_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  int max_inflight() const { return max_inflight_; }
  int step_count() const { return step_; }
  const std::vector<int>& last_forward_order() const { return last_order_; }

  std::vector<std::vector<double>> shards() const {
    std::vector<std::vector<double>> out;
    for (const auto& fp : fps_) out.emplace_back(fp.local_shard().begin(), fp.local_shard().end());
    return out;
  }

  void load_shards(const std::vector<std::vector<double>>& shards) {
    if (shards.size() != fps_.size()) throw ShapeError("expected one shard per unit");
    for (std::size_t u = 0; u < fps_.size(); ++u) {
      auto dst = fps_[u].local_shard();
      if (shards[u].size() != dst.size()) throw ShapeError("shard length mismatch for unit " + std::to_string(u));
      std::copy(shards[u].begin(), shards[u].end(), dst.begin());
    }
  }

  // One forward/backward over a micro-batch. Gradients are reduced when the
  // accumulation mode says so; the optimizer is not stepped.
  double forward_backward(const MicroBatch& mb, Accumulation mode, int window, bool last_in_window) {
    if (window < 1) throw ConfigError("accumulation window must be >= 1");
    if (mode == Accumulation::kOff && window != 1) throw ConfigError("accumulation off needs a window of 1");
    if (window_mode_ && *window_mode_ != mode) {
      throw StateError(std::string("cannot mix accumulation modes within one window (") +
                       accumulation_name(*window_mode_) + " then " + accumulation_name(mode) + ")");
    }
    window_mode_ = mode;
    last_in_window_ = last_in_window;

    const int passes = cfg_.forward_passes;
    const std::size_t rows = mb.input.rows();
    if (rows % static_cast<std::size_t>(passes) != 0) throw ShapeError("micro-batch rows not divisible by forward passes");
    std::vector<std::size_t> seq = mb.sequence.empty() ? model_.default_sequence() : mb.sequence;
    model_.validate_chain(seq);

    for (auto& s : units_) {
      s.bwd_passes = 0;
      s.used = false;
      s.grad_ready = false;
    }
    const C grad_scale = static_cast<C>(scaler_.scale() / (static_cast<double>(window) * passes));
    const std::size_t per = rows / static_cast<std::size_t>(passes);
    std::vector<PassState> states;
    double loss = 0;
    for (int p = 0; p < passes; ++p) {
      const auto lo = static_cast<std::size_t>(p) * per;
      states.push_back(run_forward(mb.input.slice_rows(lo, lo + per).cast<C>(), seq));
      auto lr = mse_loss<C>(states.back().output, mb.target.slice_rows(lo, lo + per).cast<C>(), grad_scale);
      loss += static_cast<double>(lr.loss) / passes;
      states.back().dy = std::move(lr.grad);
    }
    for (int p = passes; p-- > 0;) run_backward(states[static_cast<std::size_t>(p)], passes);
    finalize_unused();
    tl_.set_phase(Phase::kNone);
    return loss;
  }

  // Reduces a unit's finalized gradient into its sharded accumulator.
  void reduce_gradients(int u) {
    auto& s = units_.at(static_cast<std::size_t>(u));
    if (!s.grad_ready) {
      throw StateError("reduce_gradients: unit " + std::to_string(u) + " has no finalized gradient yet");
    }
    const auto& layout = layouts_[static_cast<std::size_t>(u)];
    for (std::size_t i = layout.unpadded_numel(); i < layout.padded_numel; ++i) s.ugrad[i] = C{0};

    std::vector<double> shard;
    EventId last = s.ugrad_event;
    if (cfg_.precision.reduction_dtype() == DType::kLow) {
      shard = reduce_in<float>(u, last);
    } else {
      shard = reduce_in<double>(u, last);
    }
    const double w = cfg_.plan.world_size;
    for (auto& v : shard) v /= w;

    tl_.free(*s.ugrad_block, last, u);
    s.ugrad_block.reset();
    s.ugrad.clear();
    if (s.sgrad.empty()) {
      s.sgrad.assign(shard.size(), 0.0);
      s.sgrad_block = tl_.allocate(MemCategory::kGrads, static_cast<std::int64_t>(shard.size() * sizeof(double)),
                                   Queue::kComm, u);
    }
    for (std::size_t i = 0; i < shard.size(); ++i) s.sgrad[i] += shard[i];
    s.reduce_events.push_back(last);
    s.grad_ready = false;
  }

  StepVerdict optimizer_step() {
    tl_.set_phase(Phase::kOptimizer);
    for (std::size_t u = 0; u < units_.size(); ++u) {
      if (units_[u].sgrad.empty()) {
        throw StateError("optimizer step before unit " + std::to_string(u) + " finished reducing");
      }
    }
    if (cfg_.inject_nonfinite && cfg_.inject_nonfinite->step == step_ && cfg_.inject_nonfinite->rank == rank_) {
      units_[0].sgrad[0] = std::numeric_limits<double>::infinity();
    }
    StepVerdict v;
    v.scale = scaler_.scale();
    if (scaler_.enabled()) {
      bool local_inf = false;
      for (auto& s : units_) {
        for (auto& g : s.sgrad) g /= v.scale;
        local_inf = local_inf || GradScaler::has_nonfinite(s.sgrad);
      }
      v.found_inf = scaler_.global_found_inf(fabric_, cfg_.plan, rank_, local_inf);
    }
    v.stepped = scaler_.update(v.found_inf);

    std::vector<EventId> waits;
    double flops = 0;
    for (std::size_t u = 0; u < units_.size(); ++u) {
      waits.insert(waits.end(), units_[u].reduce_events.begin(), units_[u].reduce_events.end());
      flops += static_cast<double>(layouts_[u].shard_numel()) *
               (cfg_.optimizer.kind == OptimizerKind::kAdam ? 10.0 : 2.0);
    }
    const EventId ev = tl_.optimizer_step(flops, waits);
    for (std::size_t u = 0; u < units_.size(); ++u) {
      auto& s = units_[u];
      if (v.stepped) opt_.step(u, fps_[u].local_shard(), s.sgrad);
      tl_.free(*s.sgrad_block, ev, static_cast<int>(u));
      s.sgrad_block.reset();
      s.sgrad.clear();
      s.reduce_events.clear();
    }
    last_step_event_ = ev;
    tl_.host_sync();
    window_mode_.reset();
    ++step_;
    tl_.set_step(step_);
    tl_.set_phase(Phase::kNone);
    return v;
  }

  // A full iteration over the micro-batches of one accumulation window.
  StepResult train_step(std::span<const MicroBatch> micro, Accumulation mode) {
    if (micro.empty()) throw ConfigError("a step needs at least one micro-batch");
    const double start = tl_.host_time();
    const int window = static_cast<int>(micro.size());
    double loss = 0;
    for (int i = 0; i < window; ++i) {
      loss += forward_backward(micro[static_cast<std::size_t>(i)], mode, window, i + 1 == window) / window;
    }
    StepResult r;
    r.verdict = optimizer_step();
    if (cfg_.plan.world_size > 1) {
      fabric_.all_reduce<double>(rank_, cfg_.plan.world_group(), std::span<double>(&loss, 1), ReduceOp::kSum,
                                 TrafficClass::kControl);
      loss /= cfg_.plan.world_size;
    }
    r.loss = loss;
    r.step_time = tl_.host_time() - start;
    return r;
  }

 private:
  struct UnitState {
    BlockId shard_block = -1;
    std::optional<BlockId> opt_block;
    std::optional<BlockId> param_block;
    EventId ready = kNoEvent;  // all-gather completion
    std::vector<C> ugrad;      // unsharded gradient, compute precision
    std::optional<BlockId> ugrad_block;
    EventId ugrad_event = kNoEvent;
    std::vector<double> sgrad;  // reduced sharded gradient, full precision
    std::optional<BlockId> sgrad_block;
    std::vector<EventId> reduce_events;
    int bwd_passes = 0;
    bool used = false;
    bool grad_ready = false;
  };

  struct Inflight {
    int unit = 0;
    bool released = false;
    EventId release = kNoEvent;
  };

  struct PassState {
    std::vector<std::size_t> seq;
    std::vector<int> order;
    std::vector<Tensor<C>> inputs;
    std::vector<BlockId> blocks;
    Tensor<C> output;
    Tensor<C> dy;
  };

  static std::vector<std::size_t> shard_lengths(const std::vector<FlatParamLayout>& layouts) {
    std::vector<std::size_t> out;
    for (const auto& l : layouts) out.push_back(l.shard_numel());
    return out;
  }

  bool is_root(int u) const { return assign_.is_root(u); }

  double flops(std::size_t layer, std::size_t rows, double factor) const {
    const auto& spec = model_.layers()[layer];
    if (const auto* lin = std::get_if<LinearSpec>(&spec)) {
      return factor * static_cast<double>(rows * lin->in * lin->out);
    }
    return 0.5 * factor * static_cast<double>(rows);
  }

  ParamRefs<C> param_refs() {
    ParamRefs<C> refs(model_.params().size());
    for (std::size_t p = 0; p < refs.size(); ++p) {
      auto& fp = fps_[static_cast<std::size_t>(assign_.param_unit[p])];
      if (fp.state() == FlatParamState::kUnsharded) refs[p] = fp.view(param_pos_[p]);
    }
    return refs;
  }

  GradRefs<C> grad_refs() {
    GradRefs<C> refs(model_.params().size());
    for (std::size_t p = 0; p < refs.size(); ++p) {
      const auto u = static_cast<std::size_t>(assign_.param_unit[p]);
      auto& s = units_[u];
      if (s.ugrad.empty()) continue;
      const auto& o = layouts_[u].originals[param_pos_[p]];
      refs[p] = std::span<C>(s.ugrad).subspan(o.offset, o.numel);
    }
    return refs;
  }

  void ensure_ugrad(int u) {
    auto& s = units_[static_cast<std::size_t>(u)];
    if (!s.ugrad.empty()) return;
    const auto& l = layouts_[static_cast<std::size_t>(u)];
    s.ugrad.assign(l.padded_numel, C{0});
    s.ugrad_block =
        tl_.allocate(MemCategory::kGrads, static_cast<std::int64_t>(l.padded_numel * sizeof(C)), Queue::kCompute, u);
  }

  // ---------------------------------------------------------------- limiter

  void prune_inflight() {
    std::erase_if(inflight_, [this](const Inflight& e) { return e.released && tl_.completed(e.release); });
  }

  void release_inflight(int u, EventId ev) {
    for (auto& e : inflight_) {
      if (e.unit == u && !e.released) {
        e.released = true;
        e.release = ev;
      }
    }
  }

  // Materializes a unit. A prefetch that would exceed the rate limit while
  // nothing can be waited on is skipped (returns false); a demand unshard
  // always proceeds.
  bool ensure_unsharded(int u, bool prefetch) {
    auto& fp = fps_[static_cast<std::size_t>(u)];
    auto& s = units_[static_cast<std::size_t>(u)];
    if (fp.state() == FlatParamState::kUnsharded) return true;
    const bool needs_buffer = !fp.aliases_master();
    prune_inflight();
    if (needs_buffer && cfg_.rate_limit) {
      while (static_cast<int>(inflight_.size()) >= *cfg_.rate_limit) {
        auto best = inflight_.end();
        for (auto it = inflight_.begin(); it != inflight_.end(); ++it) {
          if (!it->released) continue;
          if (best == inflight_.end() || tl_.event(it->release).end < tl_.event(best->release).end) best = it;
        }
        if (best == inflight_.end()) {
          if (prefetch) return false;
          break;
        }
        tl_.host_wait(best->release);
        prune_inflight();
      }
    }
    if (needs_buffer) s.param_block = tl_.allocate(MemCategory::kUnshardedParams, fp.unsharded_bytes(), Queue::kComm, u);
    fp.unshard(&fabric_, rank_, cfg_.plan.sharded_group_of(rank_));
    s.ready = kNoEvent;
    if (cfg_.plan.sharding_factor > 1) {
      s.ready = tl_.collective(CollectiveKind::kAllGather, u, fp.unsharded_bytes(), std::span(&last_step_event_, 1));
    }
    if (needs_buffer) {
      inflight_.push_back({u});
      max_inflight_ = std::max(max_inflight_, static_cast<int>(inflight_.size()));
    }
    return true;
  }

  void reshard(int u, EventId last_use) {
    auto& fp = fps_[static_cast<std::size_t>(u)];
    auto& s = units_[static_cast<std::size_t>(u)];
    if (fp.state() == FlatParamState::kSharded) return;
    fp.shard(false);
    if (s.param_block) {
      tl_.free(*s.param_block, last_use, u);
      s.param_block.reset();
    }
    s.ready = kNoEvent;
  }

  // ---------------------------------------------------------------- forward

  PassState run_forward(Tensor<C> x, const std::vector<std::size_t>& seq) {
    tl_.set_phase(Phase::kForward);
    PassState st;
    st.seq = seq;
    const int n = num_units();
    std::vector<int> last_pos(static_cast<std::size_t>(n), -1);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int u = assign_.layer_unit[seq[i]];
      if (u >= 0) last_pos[static_cast<std::size_t>(u)] = static_cast<int>(i);
    }
    std::vector<bool> visited(static_cast<std::size_t>(n), false);
    const bool fwd_prefetch = cfg_.forward_prefetch && !last_order_.empty();

    auto enter = [&](int u) {
      visited[static_cast<std::size_t>(u)] = true;
      const std::size_t pos = st.order.size();
      if (fwd_prefetch && (pos >= last_order_.size() || last_order_[pos] != u)) {
        throw StaticGraphViolation("forward order changed: unit " + std::to_string(u) + " ran at position " +
                                   std::to_string(pos) + " while forward prefetch assumes the previous order");
      }
      st.order.push_back(u);
      ensure_unsharded(u, false);
      if (fwd_prefetch && pos + 1 < last_order_.size()) ensure_unsharded(last_order_[pos + 1], true);
    };
    auto exit = [&](int u, EventId ev) {
      release_inflight(u, ev);
      const bool keep = !cfg_.reshard_after_forward || (cfg_.keep_outermost_unsharded && is_root(u));
      if (!keep) reshard(u, ev);
    };

    if (assign_.has_root) enter(0);
    EventId ev = kNoEvent;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const std::size_t layer = seq[i];
      const int u = assign_.layer_unit[layer];
      if (u >= 0 && !visited[static_cast<std::size_t>(u)]) enter(u);
      const BlockId act = tl_.allocate(MemCategory::kActivations, static_cast<std::int64_t>(x.numel() * sizeof(C)),
                                       Queue::kCompute, u);
      Tensor<C> y = layer_forward<C>(model_, layer, param_refs(), x);
      const EventId wait = u >= 0 ? units_[static_cast<std::size_t>(u)].ready : kNoEvent;
      ev = tl_.compute(u, flops(layer, x.rows(), 2.0), std::span(&wait, 1));
      st.inputs.push_back(std::move(x));
      st.blocks.push_back(act);
      x = std::move(y);
      if (u >= 0 && !is_root(u) && static_cast<int>(i) == last_pos[static_cast<std::size_t>(u)]) exit(u, ev);
    }
    if (assign_.has_root) exit(0, ev);
    if (fwd_prefetch && st.order.size() != last_order_.size()) {
      throw StaticGraphViolation("forward visited " + std::to_string(st.order.size()) + " units, previous pass " +
                                 std::to_string(last_order_.size()));
    }
    last_order_ = st.order;
    st.output = std::move(x);
    return st;
  }

  // --------------------------------------------------------------- backward

  void run_backward(PassState& st, int passes) {
    tl_.set_phase(Phase::kBackward);
    const int n = num_units();
    std::vector<int> first_pos(static_cast<std::size_t>(n), -1);
    for (std::size_t i = st.seq.size(); i-- > 0;) {
      const int u = assign_.layer_unit[st.seq[i]];
      if (u >= 0) first_pos[static_cast<std::size_t>(u)] = static_cast<int>(i);
    }
    std::vector<bool> visited(static_cast<std::size_t>(n), false);
    auto enter = [&](int u) {
      visited[static_cast<std::size_t>(u)] = true;
      ensure_unsharded(u, false);
    };
    auto exit = [&](int u, EventId ev) {
      auto& s = units_[static_cast<std::size_t>(u)];
      s.used = true;
      ++s.bwd_passes;
      release_inflight(u, ev);
      reshard(u, ev);
      const bool finalized = s.bwd_passes == passes;
      if (finalized) {
        s.grad_ready = true;
        tl_.mark(TraceKind::kGradReady, u);
      }
      if (cfg_.backward_prefetch) {
        auto it = std::find(st.order.begin(), st.order.end(), u);
        if (it != st.order.begin() && it != st.order.end()) {
          const int next = *std::prev(it);
          if (!visited[static_cast<std::size_t>(next)]) ensure_unsharded(next, true);
        }
      }
      if (finalized) maybe_reduce(u);
    };

    if (assign_.has_root) enter(0);
    EventId ev = kNoEvent;
    Tensor<C> dy = std::move(st.dy);
    for (std::size_t i = st.seq.size(); i-- > 0;) {
      const std::size_t layer = st.seq[i];
      const int u = assign_.layer_unit[layer];
      if (u >= 0 && !visited[static_cast<std::size_t>(u)]) enter(u);
      if (u >= 0 && model_.layer_params(layer).bias) ensure_ugrad(u);
      Tensor<C> dx = layer_backward<C>(model_, layer, param_refs(), st.inputs[i], dy, grad_refs());
      const EventId wait = u >= 0 ? units_[static_cast<std::size_t>(u)].ready : kNoEvent;
      ev = tl_.compute(u, flops(layer, dy.rows(), 4.0), std::span(&wait, 1));
      tl_.free(st.blocks[i], ev, u);
      if (u >= 0) units_[static_cast<std::size_t>(u)].ugrad_event = ev;
      dy = std::move(dx);
      if (u >= 0 && !is_root(u) && static_cast<int>(i) == first_pos[static_cast<std::size_t>(u)]) exit(u, ev);
    }
    if (assign_.has_root) exit(0, ev);
  }

  void maybe_reduce(int u) {
    if (*window_mode_ == Accumulation::kNoComm && !last_in_window_) return;
    reduce_gradients(u);
  }

  // Units that took no part in this micro-batch still owe their (zero)
  // gradient to the collective schedule every rank follows.
  void finalize_unused() {
    for (int u = 0; u < num_units(); ++u) {
      auto& s = units_[static_cast<std::size_t>(u)];
      if (s.used) continue;
      warnings_.push_back("step " + std::to_string(step_) + ": unit " + std::to_string(u) +
                          " was not used in the forward pass; reducing a zero gradient");
      reshard(u, kNoEvent);
      ensure_ugrad(u);
      s.grad_ready = true;
      tl_.mark(TraceKind::kGradReady, u);
      maybe_reduce(u);
    }
  }

  template <Scalar R>
  std::vector<double> reduce_in(int u, EventId& last) {
    auto& s = units_[static_cast<std::size_t>(u)];
    const auto& layout = layouts_[static_cast<std::size_t>(u)];
    std::vector<R> flat(s.ugrad.begin(), s.ugrad.end());
    const int f = cfg_.plan.sharding_factor;
    if (f > 1) {
      last = tl_.collective(CollectiveKind::kReduceScatter, u,
                            static_cast<std::int64_t>(layout.padded_numel * sizeof(R)), std::span(&last, 1));
    }
    if (cfg_.plan.world_size / f > 1) {
      last = tl_.collective(CollectiveKind::kAllReduce, u,
                            static_cast<std::int64_t>(layout.shard_numel() * sizeof(R)), std::span(&last, 1));
    }
    auto shard = hybrid_reduce<R>(fabric_, cfg_.plan, rank_, flat);
    return {shard.begin(), shard.end()};
  }

  const ModelSpec& model_;
  UnitAssignment assign_;
  EngineConfig cfg_;
  Fabric& fabric_;
  int rank_;
  std::vector<FlatParamLayout> layouts_;
  Optimizer opt_;
  Timeline tl_;
  ShardedGradScaler scaler_;
  std::vector<FlatParameter<C>> fps_;
  std::vector<std::size_t> param_pos_;
  std::vector<UnitState> units_;
  std::vector<Inflight> inflight_;
  std::vector<int> last_order_;
  std::vector<std::string> warnings_;
  std::optional<Accumulation> window_mode_;
  bool last_in_window_ = true;
  EventId last_step_event_ = kNoEvent;
  int max_inflight_ = 0;
  int step_ = 0;
};

}  // namespace fsdp

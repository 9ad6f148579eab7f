// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fsdp/engine/driver.hpp"
#include "fsdp/engine/local.hpp"
#include "support.hpp"

namespace fsdp {
namespace {

using testing::RefMlp;

// mlp{4,4,4,2}: layers L0 relu L2 relu L4. Two annotated blocks, so L4 lands
// in the root unit 0; blocks become units 1 and 2.
const std::vector<std::size_t> kWidths{4, 4, 4, 2};
const std::vector<LayerRange> kBlocks{{0, 2}, {2, 4}};
// Every layer annotated: no root unit spans the whole pass.
const std::vector<LayerRange> kFlatBlocks{{0, 2}, {2, 4}, {4, 5}};

ModelSpec mlp() { return ModelSpec::mlp(kWidths); }

EngineConfig base_config(int w, int f, int g) {
  EngineConfig cfg;
  cfg.plan = build_plan(w, f, g);
  cfg.optimizer.lr = 0.05;
  return cfg;
}

ShardedRun run(const ModelSpec& model, const EngineConfig& cfg, int steps, bool integer = false,
               Accumulation mode = Accumulation::kOff, int micro = 1,
               const std::vector<LayerRange>& blocks = kBlocks) {
  const auto params = testing::simple_params(model, 7, integer);
  const auto batches = testing::random_steps(3, steps, micro, 8, model.input_dim(), model.output_dim(), integer);
  RunOptions opts;
  opts.accumulation = mode;
  return run_sharded(model, blocks, cfg, shards_from_params(params, cfg.plan), batches, opts);
}

int count(const std::vector<TraceRecord>& trace, TraceKind kind, int step, Phase phase) {
  return static_cast<int>(std::count_if(trace.begin(), trace.end(), [&](const TraceRecord& t) {
    return t.kind == kind && t.step == step && t.phase == phase;
  }));
}

std::int64_t first_seq(const std::vector<TraceRecord>& trace, TraceKind kind, int unit, int step, Phase phase) {
  for (const auto& t : trace) {
    if (t.kind == kind && t.unit == unit && t.step == step && t.phase == phase) return t.seq;
  }
  return -1;
}

// ---------------------------------------------------------------- collectives

TEST(EngineTrace, CollectivesPerIterationAreLinearInUnits) {
  auto cfg = base_config(4, 4, 4);
  cfg.keep_outermost_unsharded = false;
  const auto r = run(mlp(), cfg, 2);
  ASSERT_EQ(r.layouts.size(), 3u);
  for (int s = 0; s < 2; ++s) {
    const auto& tr = r.ranks[1].trace;
    EXPECT_EQ(count(tr, TraceKind::kAgIssue, s, Phase::kForward), 3);
    EXPECT_EQ(count(tr, TraceKind::kAgIssue, s, Phase::kBackward), 3);
    EXPECT_EQ(count(tr, TraceKind::kRsIssue, s, Phase::kBackward), 3);
    EXPECT_EQ(count(tr, TraceKind::kArIssue, s, Phase::kBackward), 0);
  }
}

TEST(EngineTrace, KeepingOutermostSavesOneBackwardGather) {
  auto cfg = base_config(4, 4, 4);
  cfg.keep_outermost_unsharded = true;
  const auto r = run(mlp(), cfg, 3);
  for (int s = 0; s < 3; ++s) {
    EXPECT_EQ(count(r.ranks[0].trace, TraceKind::kAgIssue, s, Phase::kBackward), 2) << "step " << s;
    EXPECT_EQ(first_seq(r.ranks[0].trace, TraceKind::kAgIssue, 0, s, Phase::kBackward), -1);
  }
}

TEST(EngineTrace, NoReshardAfterForwardSkipsBackwardGathers) {
  auto cfg = base_config(4, 4, 4);
  cfg.reshard_after_forward = false;
  const auto r = run(mlp(), cfg, 2);
  for (int s = 0; s < 2; ++s) EXPECT_EQ(count(r.ranks[2].trace, TraceKind::kAgIssue, s, Phase::kBackward), 0);
}

TEST(EngineTrace, ReplicationUsesAllReduceOnly) {
  const auto r = run(mlp(), base_config(4, 1, 4), 1);
  const auto& tr = r.ranks[0].trace;
  EXPECT_EQ(count(tr, TraceKind::kAgIssue, 0, Phase::kForward), 0);
  EXPECT_EQ(count(tr, TraceKind::kRsIssue, 0, Phase::kBackward), 0);
  EXPECT_EQ(count(tr, TraceKind::kArIssue, 0, Phase::kBackward), 3);
}

TEST(EngineTrace, HybridAddsOneAllReducePerUnit) {
  const auto r = run(mlp(), base_config(4, 2, 2), 1);
  EXPECT_EQ(count(r.ranks[3].trace, TraceKind::kRsIssue, 0, Phase::kBackward), 3);
  EXPECT_EQ(count(r.ranks[3].trace, TraceKind::kArIssue, 0, Phase::kBackward), 3);
}

TEST(EngineTrace, ReductionFollowsGradReadyAndPrecedesStep) {
  auto cfg = base_config(4, 2, 4);
  const auto r = run(mlp(), cfg, 2);
  for (const auto& rk : r.ranks) {
    const auto& tr = rk.trace;
    for (int s = 0; s < 2; ++s) {
      double step_t = -1;
      double last_reduce = 0;
      for (const auto& t : tr) {
        if (t.step != s) continue;
        if (t.kind == TraceKind::kStep) step_t = t.t;
        if (t.kind == TraceKind::kRsDone || t.kind == TraceKind::kArDone) last_reduce = std::max(last_reduce, t.t);
      }
      EXPECT_GE(step_t, last_reduce);
      for (int u = 0; u < 3; ++u) {
        const auto ready = first_seq(tr, TraceKind::kGradReady, u, s, Phase::kBackward);
        const auto rs = first_seq(tr, TraceKind::kRsIssue, u, s, Phase::kBackward);
        ASSERT_GE(ready, 0);
        EXPECT_GT(rs, ready) << "unit " << u << " step " << s;
      }
    }
  }
}

TEST(EngineTrace, BackwardPrefetchIssuesNextGatherBeforeReduceScatter) {
  auto cfg = base_config(4, 4, 4);
  cfg.keep_outermost_unsharded = false;
  cfg.backward_prefetch = true;
  const auto r = run(mlp(), cfg, 1);
  const auto& tr = r.ranks[0].trace;
  // Forward order [0, 1, 2]; backward finishes unit 2 then unit 1. The root
  // is entered first in backward too, so unit 1 has nothing left to prefetch.
  EXPECT_LT(first_seq(tr, TraceKind::kAgIssue, 1, 0, Phase::kBackward),
            first_seq(tr, TraceKind::kRsIssue, 2, 0, Phase::kBackward));

  cfg.backward_prefetch = false;
  const auto off = run(mlp(), cfg, 1);
  EXPECT_GT(first_seq(off.ranks[0].trace, TraceKind::kAgIssue, 1, 0, Phase::kBackward),
            first_seq(off.ranks[0].trace, TraceKind::kRsIssue, 2, 0, Phase::kBackward));
}

TEST(EngineTrace, ForwardPrefetchStartsOnSecondIteration) {
  auto cfg = base_config(4, 4, 4);
  cfg.forward_prefetch = true;
  const auto r = run(mlp(), cfg, 3, false, Accumulation::kOff, 1, kFlatBlocks);
  const auto& tr = r.ranks[0].trace;
  EXPECT_GT(first_seq(tr, TraceKind::kAgIssue, 1, 0, Phase::kForward),
            first_seq(tr, TraceKind::kComputeBegin, 0, 0, Phase::kForward));
  for (int s = 1; s < 3; ++s) {
    for (int u = 0; u < 2; ++u) {
      EXPECT_LT(first_seq(tr, TraceKind::kAgIssue, u + 1, s, Phase::kForward),
                first_seq(tr, TraceKind::kComputeBegin, u, s, Phase::kForward));
    }
  }
}

// With a root unit spanning the pass, its buffer counts against the limit the
// whole forward, so a limit of 2 leaves no room to prefetch.
TEST(EngineTrace, RootHoldsOneLimiterSlot) {
  auto cfg = base_config(4, 4, 4);
  cfg.forward_prefetch = true;
  cfg.rate_limit = 2;
  const auto r = run(mlp(), cfg, 2);
  const auto& tr = r.ranks[0].trace;
  EXPECT_GT(first_seq(tr, TraceKind::kAgIssue, 2, 1, Phase::kForward),
            first_seq(tr, TraceKind::kComputeBegin, 1, 1, Phase::kForward));
  cfg.rate_limit = std::nullopt;
  const auto free = run(mlp(), cfg, 2);
  EXPECT_LT(first_seq(free.ranks[0].trace, TraceKind::kAgIssue, 2, 1, Phase::kForward),
            first_seq(free.ranks[0].trace, TraceKind::kComputeBegin, 1, 1, Phase::kForward));
}

TEST(EngineTrace, SingleUnitIssuesNoPrefetch) {
  const auto model = mlp();
  auto cfg = base_config(2, 2, 2);
  cfg.forward_prefetch = true;
  const auto params = testing::simple_params(model, 1, false);
  const auto r = run_sharded(model, {}, cfg, shards_from_params(params, cfg.plan),
                             testing::random_steps(2, 2, 1, 4, 4, 2, false));
  ASSERT_EQ(r.layouts.size(), 1u);
  EXPECT_EQ(r.ranks[0].max_inflight, 1);
}

// ------------------------------------------------------------------ limiter

// Parameter bytes of the largest units, from the layouts (one rank's view).
std::int64_t largest_units(const std::vector<FlatParamLayout>& layouts, std::size_t n) {
  std::vector<std::int64_t> sizes;
  for (const auto& l : layouts) sizes.push_back(static_cast<std::int64_t>(l.padded_numel * sizeof(double)));
  std::sort(sizes.rbegin(), sizes.rend());
  std::int64_t s = 0;
  for (std::size_t i = 0; i < n && i < sizes.size(); ++i) s += sizes[i];
  return s;
}

TEST(EngineLimiter, BoundsUnshardedBuffers) {
  for (int limit : {1, 2}) {
    auto cfg = base_config(4, 4, 4);
    cfg.keep_outermost_unsharded = false;
    cfg.rate_limit = limit;
    cfg.forward_prefetch = true;
    cfg.cost = {1.0, 0.01, 0.1, 1e-4};
    const auto r = run(mlp(), cfg, 3, false, Accumulation::kOff, 1, kFlatBlocks);
    for (const auto& rk : r.ranks) {
      EXPECT_LE(rk.max_inflight, limit);
      EXPECT_LE(rk.memory.peak_by_category[static_cast<int>(MemCategory::kUnshardedParams)],
                largest_units(r.layouts, static_cast<std::size_t>(limit)));
    }
  }
}

TEST(EngineLimiter, RejectsZero) {
  auto cfg = base_config(1, 1, 1);
  cfg.rate_limit = 0;
  EXPECT_THROW(run(mlp(), cfg, 1), ConfigError);
}

// -------------------------------------------------------------- equivalence

struct EqCase {
  int w, f, g;
  bool raf, prefetch;
  Accumulation mode;
};

class EngineEquivalence : public ::testing::TestWithParam<EqCase> {};

TEST_P(EngineEquivalence, MatchesPlainLoopReference) {
  const auto c = GetParam();
  const auto model = mlp();
  for (bool integer : {true, false}) {
    const int k = c.mode == Accumulation::kOff ? 1 : 2;
    auto cfg = base_config(c.w, c.f, c.g);
    cfg.reshard_after_forward = c.raf;
    cfg.backward_prefetch = c.prefetch;
    cfg.forward_prefetch = c.prefetch;
    cfg.optimizer.lr = integer ? 8.0 * k : 0.05;
    const auto params = testing::simple_params(model, 4, integer);
    const auto steps = testing::random_steps(9, 4, k, 8, 4, 2, integer);
    RunOptions opts;
    opts.accumulation = c.mode;
    const auto r = run_sharded(model, kBlocks, cfg, shards_from_params(params, cfg.plan), steps, opts);
    RefMlp ref{kWidths, testing::to_vectors(params)};
    for (std::size_t s = 0; s < steps.size(); ++s) {
      std::vector<std::vector<double>> x, t;
      testing::step_rows(steps[s], x, t);
      const double loss = ref.step(x, t, cfg.optimizer.lr);
      const double d = testing::max_diff(ref.params, r.params_per_step[s]);
      if (integer) {
        EXPECT_EQ(d, 0) << "step " << s;
      } else {
        EXPECT_LE(d, 1e-8) << "step " << s;
        EXPECT_NEAR(r.losses[s], loss, 1e-10);
      }
    }
    EXPECT_EQ(r.replica_divergence, 0);
  }
}

INSTANTIATE_TEST_SUITE_P(
    Configs, EngineEquivalence,
    ::testing::Values(EqCase{1, 1, 1, true, false, Accumulation::kOff}, EqCase{4, 4, 4, true, true, Accumulation::kOff},
                      EqCase{4, 4, 4, false, false, Accumulation::kOff},
                      EqCase{4, 2, 2, true, true, Accumulation::kWithComm},
                      EqCase{8, 2, 4, false, true, Accumulation::kNoComm},
                      EqCase{4, 1, 2, true, false, Accumulation::kNoComm},
                      EqCase{2, 2, 1, true, true, Accumulation::kWithComm}));

TEST(EngineEquivalence, SingleRankIsBitExactWithLocal) {
  const auto model = mlp();
  auto cfg = base_config(1, 1, 1);
  const auto params = testing::simple_params(model, 2, false);
  const auto steps = testing::random_steps(5, 3, 1, 6, 4, 2, false);
  const auto r = run_sharded(model, kBlocks, cfg, shards_from_params(params, cfg.plan), steps);
  LocalTrainer<double> local(model, params, cfg.optimizer);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const double loss = local.step(steps[s]);
    EXPECT_EQ(r.losses[s], loss);
    EXPECT_EQ(max_abs_diff(local.params(), r.params_per_step[s]), 0);
  }
}

TEST(EngineEquivalence, AdamMatchesLocal) {
  const auto model = mlp();
  auto cfg = base_config(4, 2, 2);
  cfg.optimizer.kind = OptimizerKind::kAdam;
  cfg.optimizer.lr = 0.01;
  const auto params = testing::simple_params(model, 2, false);
  const auto steps = testing::random_steps(5, 4, 1, 8, 4, 2, false);
  const auto r = run_sharded(model, kBlocks, cfg, shards_from_params(params, cfg.plan), steps);
  LocalTrainer<double> local(model, params, cfg.optimizer);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    local.step(steps[s]);
    EXPECT_LE(max_abs_diff(local.params(), r.params_per_step[s]), 1e-8);
  }
}

// ------------------------------------------------------------- accumulation

TEST(EngineAccumulation, NoCommHoldsUnshardedGradients) {
  const auto model = mlp();
  auto cfg = base_config(4, 4, 4);
  std::int64_t full = 0, sharded = 0;
  const auto with = run(model, cfg, 1, false, Accumulation::kWithComm, 2);
  const auto without = run(model, cfg, 1, false, Accumulation::kNoComm, 2);
  for (const auto& l : with.layouts) {
    full += static_cast<std::int64_t>(l.padded_numel * sizeof(double));
    sharded += static_cast<std::int64_t>(l.shard_numel() * sizeof(double));
  }
  const auto grads = [](const ShardedRun& r) {
    return r.ranks[0].memory.peak_by_category[static_cast<int>(MemCategory::kGrads)];
  };
  // Every unit's unsharded gradient is alive at the end of the window.
  EXPECT_GE(grads(without), full);
  EXPECT_LT(grads(with), full);
  EXPECT_GE(grads(with), sharded);
  // And NoComm moves fewer bytes: one reduction per window.
  EXPECT_LT(count(without.ranks[0].trace, TraceKind::kRsIssue, 0, Phase::kBackward),
            count(with.ranks[0].trace, TraceKind::kRsIssue, 0, Phase::kBackward));
}

TEST(EngineAccumulation, WindowOfOneEqualsPlainStep) {
  const auto model = mlp();
  const auto cfg = base_config(4, 2, 4);
  const auto plain = run(model, cfg, 2, false, Accumulation::kOff, 1);
  const auto with = run(model, cfg, 2, false, Accumulation::kWithComm, 1);
  const auto without = run(model, cfg, 2, false, Accumulation::kNoComm, 1);
  EXPECT_EQ(max_abs_diff(plain.params_per_step.back(), with.params_per_step.back()), 0);
  EXPECT_EQ(max_abs_diff(plain.params_per_step.back(), without.params_per_step.back()), 0);
}

// Drives one rank by hand for the state guards.
template <typename Fn>
void with_single_rank(const EngineConfig& cfg, Fn fn) {
  static const ModelSpec model = mlp();
  Fabric fabric(1, 1);
  RankEngine<double> engine(model, assign_units(model, kBlocks), cfg, fabric, 0);
  engine.load_shards(shards_from_params(testing::simple_params(model, 1, false), cfg.plan)(0, engine.layouts()));
  fn(engine);
}

MicroBatch one_batch() {
  auto s = testing::random_steps(1, 1, 1, 4, 4, 2, false);
  return s[0][0];
}

TEST(EngineState, MixingAccumulationModesIsAnError) {
  with_single_rank(base_config(1, 1, 1), [](RankEngine<double>& e) {
    const auto mb = one_batch();
    e.forward_backward(mb, Accumulation::kWithComm, 2, false);
    try {
      e.forward_backward(mb, Accumulation::kNoComm, 2, true);
      FAIL() << "expected StateError";
    } catch (const StateError& err) {
      EXPECT_NE(std::string(err.what()).find("with_comm then no_comm"), std::string::npos);
    }
  });
}

TEST(EngineState, ReductionBeforeGradientIsFinalizedIsAnError) {
  with_single_rank(base_config(1, 1, 1), [](RankEngine<double>& e) {
    EXPECT_THROW(e.reduce_gradients(1), StateError);
    EXPECT_THROW(e.optimizer_step(), StateError);
  });
}

TEST(EngineState, EmptyStepIsRejected) {
  with_single_rank(base_config(1, 1, 1), [](RankEngine<double>& e) {
    EXPECT_THROW(e.train_step({}, Accumulation::kOff), ConfigError);
  });
}

TEST(EngineState, PrecisionMustMatchComputeType) {
  auto cfg = base_config(1, 1, 1);
  cfg.precision.mixed = true;
  const ModelSpec model = mlp();
  Fabric fabric(1, 1);
  EXPECT_THROW(RankEngine<double>(model, assign_units(model, kBlocks), cfg, fabric, 0), ConfigError);
}

// ------------------------------------------------------- dynamic control flow

// Equal widths so layers 2..3 can be skipped: L0 relu L2 relu L4, 4 -> 4.
std::vector<StepBatches> alternating_steps(int steps) {
  auto base = testing::random_steps(6, steps, 1, 8, 4, 4, false);
  for (int s = 0; s < steps; ++s) {
    if (s % 2 == 1) base[static_cast<std::size_t>(s)][0].sequence = {0, 1, 4};
  }
  return base;
}

TEST(EngineDynamic, ForwardPrefetchRejectsChangedOrder) {
  const auto model = ModelSpec::mlp({4, 4, 4, 4});
  auto cfg = base_config(2, 2, 2);
  cfg.forward_prefetch = true;
  const auto params = testing::simple_params(model, 3, false);
  EXPECT_THROW(run_sharded(model, kBlocks, cfg, shards_from_params(params, cfg.plan), alternating_steps(2)),
               StaticGraphViolation);
}

TEST(EngineDynamic, SkippedUnitWarnsAndStillMatchesLocal) {
  const auto model = ModelSpec::mlp({4, 4, 4, 4});
  auto cfg = base_config(2, 2, 2);
  const auto params = testing::simple_params(model, 3, false);
  const auto steps = alternating_steps(4);
  const auto r = run_sharded(model, kBlocks, cfg, shards_from_params(params, cfg.plan), steps);
  ASSERT_FALSE(r.ranks[0].warnings.empty());
  EXPECT_NE(r.ranks[0].warnings[0].find("unit 2 was not used"), std::string::npos);
  LocalTrainer<double> local(model, params, cfg.optimizer);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    local.step(steps[s]);
    EXPECT_LE(max_abs_diff(local.params(), r.params_per_step[s]), 1e-12);
  }
  // Backward prefetch follows the order seen this iteration: on the short
  // steps unit 2 is never gathered in backward.
  EXPECT_EQ(first_seq(r.ranks[0].trace, TraceKind::kAgIssue, 2, 1, Phase::kBackward), -1);
}

// ------------------------------------------------------------------- scaler

TEST(EngineScaler, OverflowOnOneRankSkipsEveryRank) {
  const auto model = mlp();
  auto cfg = base_config(4, 2, 2);
  cfg.scaler.enabled = true;
  cfg.scaler.init_scale = 1024;
  cfg.inject_nonfinite = NonFiniteInjection{1, 3};
  const auto r = run(model, cfg, 3);
  for (const auto& rk : r.ranks) {
    EXPECT_TRUE(rk.steps[0].verdict.stepped);
    EXPECT_FALSE(rk.steps[1].verdict.stepped);
    EXPECT_TRUE(rk.steps[1].verdict.found_inf);
    EXPECT_DOUBLE_EQ(rk.steps[2].verdict.scale, 512);
  }
  EXPECT_EQ(max_abs_diff(r.params_per_step[0], r.params_per_step[1]), 0);
  EXPECT_GT(max_abs_diff(r.params_per_step[1], r.params_per_step[2]), 0);
}

TEST(EngineScaler, GrowsAfterCleanInterval) {
  auto cfg = base_config(2, 2, 2);
  cfg.scaler.enabled = true;
  cfg.scaler.init_scale = 8;
  cfg.scaler.growth_interval = 2;
  const auto r = run(mlp(), cfg, 3);
  EXPECT_DOUBLE_EQ(r.ranks[0].steps[0].verdict.scale, 8);
  EXPECT_DOUBLE_EQ(r.ranks[0].steps[1].verdict.scale, 8);
  EXPECT_DOUBLE_EQ(r.ranks[0].steps[2].verdict.scale, 16);
}

TEST(EngineScaler, ScaledStepsMatchUnscaled) {
  // A power-of-two scale is exact in binary floating point.
  auto cfg = base_config(4, 4, 4);
  const auto plain = run(mlp(), cfg, 2);
  cfg.scaler.enabled = true;
  cfg.scaler.init_scale = 256;
  const auto scaled = run(mlp(), cfg, 2);
  EXPECT_EQ(max_abs_diff(plain.params_per_step.back(), scaled.params_per_step.back()), 0);
}

TEST(EngineScaler, NonPositiveScaleIsRejected) {
  auto cfg = base_config(1, 1, 1);
  cfg.scaler.enabled = true;
  cfg.scaler.init_scale = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// --------------------------------------------------------- mixed precision

TEST(EngineMixed, CollectivesCarryLowPrecision) {
  auto cfg = base_config(4, 4, 4);
  cfg.precision.mixed = true;
  const auto r = run(mlp(), cfg, 1);
  for (const auto& t : r.ranks[0].trace) {
    if (t.kind != TraceKind::kAgIssue && t.kind != TraceKind::kRsIssue) continue;
    const auto& l = r.layouts[static_cast<std::size_t>(t.unit)];
    EXPECT_EQ(t.bytes, static_cast<std::int64_t>(l.padded_numel * sizeof(float)));
  }
  cfg.precision.reduce_dtype = DType::kFull;
  const auto full = run(mlp(), cfg, 1);
  for (const auto& t : full.ranks[0].trace) {
    if (t.kind != TraceKind::kRsIssue) continue;
    EXPECT_EQ(t.bytes, static_cast<std::int64_t>(full.layouts[static_cast<std::size_t>(t.unit)].padded_numel * 8));
  }
}

TEST(EngineMixed, StaysCloseToFullPrecision) {
  auto cfg = base_config(4, 2, 2);
  const auto ref = run(mlp(), cfg, 3);
  cfg.precision.mixed = true;
  const auto low = run(mlp(), cfg, 3);
  EXPECT_LE(max_abs_diff(ref.params_per_step.back(), low.params_per_step.back()), 1e-4);
}

}  // namespace
}  // namespace fsdp

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, with the numbers behind it.
// Exit status is non-zero when any check fails, except checks listed as known
// unattainable; those still print FAIL.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fsdp/collectives/hybrid.hpp"
#include "fsdp/collectives/traffic.hpp"
#include "fsdp/deferred_init/init.hpp"
#include "fsdp/engine/driver.hpp"
#include "fsdp/memsim/scenarios.hpp"
#include "support.hpp"

using namespace fsdp;
using fsdp::testing::RefMlp;

namespace {

struct Check {
  std::string what;
  bool ok = false;
  bool known_unattainable = false;
};

struct Criterion {
  int id;
  std::string name;
  std::vector<Check> checks;
  std::string detail;
};

template <typename T>
std::string str(const T& v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// --------------------------------------------------------------------------

ModelSpec three_unit_mlp() { return ModelSpec::mlp({4, 4, 4, 2}); }
const std::vector<LayerRange> kTwoBlocks{{0, 2}, {2, 4}};  // plus the root holding the last layer

Criterion equivalence() {
  Criterion c{1, "sharded training equals local training", {}, ""};
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = three_unit_mlp();
  double worst_int = 0, worst_float = 0;
  int runs = 0;
  for (bool integer : {true, false}) {
    for (int w : {1, 2, 4, 8}) {
      for (int f = 1; f <= w; ++f) {
        if (w % f) continue;
        for (bool raf : {true, false}) {
          for (bool prefetch : {true, false}) {
            for (auto mode : {Accumulation::kOff, Accumulation::kWithComm, Accumulation::kNoComm}) {
              const int k = mode == Accumulation::kOff ? 1 : 2;
              EngineConfig cfg;
              cfg.plan = build_plan(w, f, w >= 2 ? w / 2 : 1);
              cfg.reshard_after_forward = raf;
              cfg.backward_prefetch = prefetch;
              cfg.forward_prefetch = prefetch;
              cfg.optimizer.lr = integer ? 8.0 * k : 0.05;
              const auto params = testing::simple_params(model, 11, integer);
              const auto steps = testing::random_steps(5, 5, k, 8, 4, 2, integer);
              RunOptions opts;
              opts.accumulation = mode;
              const auto run = run_sharded(model, kTwoBlocks, cfg, shards_from_params(params, cfg.plan), steps, opts);
              RefMlp ref{{4, 4, 4, 2}, testing::to_vectors(params)};
              double d = 0;
              for (std::size_t s = 0; s < steps.size(); ++s) {
                std::vector<std::vector<double>> x, t;
                testing::step_rows(steps[s], x, t);
                ref.step(x, t, cfg.optimizer.lr);
                d = std::max(d, testing::max_diff(ref.params, run.params_per_step[s]));
              }
              (integer ? worst_int : worst_float) = std::max(integer ? worst_int : worst_float, d);
              ++runs;
            }
          }
        }
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.checks.push_back({"integer SGD max|d| == 0", worst_int == 0});
  c.checks.push_back({"random data max|d| <= 1e-8", worst_float <= 1e-8});
  c.checks.push_back({"runtime < 60 s", secs < 60});
  c.detail = str(runs) + " runs, integer max|d|=" + str(worst_int) + ", float max|d|=" + str(worst_float) +
             ", " + str(secs) + " s";
  return c;
}

Criterion decomposition() {
  Criterion c{2, "two-stage reduction equals the global sum", {}, ""};
  int cases = 0, bad = 0;
  for (int w = 1; w <= 8; ++w) {
    for (int f = 1; f <= w; ++f) {
      if (w % f) continue;
      const auto plan = build_plan(w, f, w);
      const std::size_t len = static_cast<std::size_t>(f) * 3;
      std::vector<std::vector<std::int64_t>> local(static_cast<std::size_t>(w), std::vector<std::int64_t>(len));
      std::mt19937 rng(static_cast<unsigned>(w * 10 + f));
      for (auto& v : local) {
        for (auto& e : v) e = static_cast<std::int64_t>(rng() % 201) - 100;
      }
      std::vector<double> total(len, 0);
      for (const auto& v : local) {
        for (std::size_t i = 0; i < len; ++i) total[i] += static_cast<double>(v[i]);
      }
      std::vector<std::vector<double>> got(static_cast<std::size_t>(w));
      Fabric fabric(w, w);
      run_ranks(fabric, [&](int r) {
        std::vector<double> in(local[static_cast<std::size_t>(r)].begin(), local[static_cast<std::size_t>(r)].end());
        got[static_cast<std::size_t>(r)] = hybrid_reduce<double>(fabric, plan, r, in);
      });
      for (int r = 0; r < w; ++r) {
        const std::size_t k = static_cast<std::size_t>(r % f);
        for (std::size_t i = 0; i < 3; ++i) {
          if (got[static_cast<std::size_t>(r)].at(i) != total[k * 3 + i]) ++bad;
        }
      }
      ++cases;
    }
  }
  c.checks.push_back({"every rank holds its shard of the global sum", bad == 0});
  c.detail = str(cases) + " (W,F) cases, " + str(bad) + " wrong elements";
  return c;
}

Criterion padding() {
  Criterion c{3, "padding at most F-1 and views tile the buffer", {}, ""};
  std::mt19937 rng(2026);
  int trials = 0, bad = 0;
  for (; trials < 1500; ++trials) {
    const std::size_t f = 1 + rng() % 16;
    const std::size_t n = 1 + rng() % 6;
    std::vector<OriginalParam> originals;
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Shape shape;
      const std::size_t dims = 1 + rng() % 3;
      for (std::size_t d = 0; d < dims; ++d) shape.push_back(1 + rng() % 7);
      OriginalParam o;
      o.name = "p" + std::to_string(i);
      o.shape = shape;
      o.numel = fsdp::numel(shape);
      o.param_index = i;
      total += o.numel;
      originals.push_back(o);
    }
    const auto l = make_layout(0, originals, f);
    bool ok = l.padding <= f - 1 && l.padded_numel % f == 0 && l.padded_numel == total + l.padding;
    std::size_t cursor = 0;
    for (const auto& o : l.originals) {
      ok = ok && o.offset == cursor;
      cursor += o.numel;
    }
    ok = ok && cursor == total;
    for (std::size_t k = 0; k < f; ++k) ok = ok && l.shard_offset(k) == k * l.shard_numel();
    ok = ok && l.shard_offset(f - 1) + l.shard_numel() == l.padded_numel;
    // Writing through each view lands at the view's offset in the flat buffer.
    FlatParameter<double> fp(l, 0);
    fp.begin_materialize();
    for (std::size_t i = 0; i < l.originals.size(); ++i) {
      auto v = fp.view(i);
      ok = ok && v.size() == l.originals[i].numel;
      for (auto& e : v) e = static_cast<double>(i + 1);
    }
    const auto flat = fp.unsharded();
    for (std::size_t i = 0; i < flat.size(); ++i) {
      double want = 0;
      for (std::size_t j = 0; j < l.originals.size(); ++j) {
        const auto& o = l.originals[j];
        if (i >= o.offset && i < o.offset + o.numel) want = static_cast<double>(j + 1);
      }
      ok = ok && flat[i] == want;
    }
    if (!ok) ++bad;
  }
  c.checks.push_back({">= 1000 cases, no violations", trials >= 1000 && bad == 0});
  c.detail = str(trials) + " random cases, " + str(bad) + " violations";
  return c;
}

// Two units of psi 8 and 4 at F = 4: Linear(3->2) has 8 elements,
// Linear(2->1) has 3 and pads to 4.
struct TwoUnit {
  ModelSpec model{std::vector<LayerSpec>{LinearSpec{3, 2}, LinearSpec{2, 1}}};
  std::vector<LayerRange> units{{0, 1}, {1, 2}};
};

std::int64_t param_peak(bool mixed, std::optional<int> limit, bool prefetch) {
  TwoUnit m;
  EngineConfig cfg;
  cfg.plan = build_plan(4, 4, 4);
  cfg.keep_outermost_unsharded = false;
  cfg.rate_limit = limit;
  cfg.backward_prefetch = prefetch;
  cfg.forward_prefetch = prefetch;
  cfg.precision.mixed = mixed;
  cfg.optimizer.lr = 0.01;
  const auto params = testing::simple_params(m.model, 3, false);
  const auto steps = testing::random_steps(9, 3, 1, 8, 3, 1, false);
  const auto run = run_sharded(m.model, m.units, cfg, shards_from_params(params, cfg.plan), steps);
  std::int64_t peak = 0;
  for (const auto& r : run.ranks) peak = std::max(peak, r.memory.peak_param_bytes);
  return peak;
}

Criterion memory_formula() {
  Criterion c{4, "parameter peak matches the sharded-plus-materialized formula", {}, ""};
  // psi = [8, 4], F = 4.
  const std::int64_t serialized = (8 + 4) / 4 + 8;       // 11 elements
  const std::int64_t two_inflight = (8 + 4) / 4 + 8 + 4;  // 15 elements
  const auto a = param_peak(false, 1, false);
  const auto b = param_peak(false, 2, true);
  c.checks.push_back({"serialized == 11 elements", a == serialized * 8});
  c.checks.push_back({"limiter 2 + prefetch == 15 elements", b == two_inflight * 8});
  c.detail = "serialized " + str(a / 8) + " elements (want " + str(serialized) + "), limiter 2 + prefetch " +
             str(b / 8) + " (want " + str(two_inflight) + ")";
  return c;
}

Criterion mixed_memory() {
  Criterion c{5, "mixed-precision parameter peak", {}, ""};
  const std::int64_t want = 8 * (8 + 4) / 4 + 4 * 8;  // 56 bytes
  const auto mixed = param_peak(true, 1, false);
  const auto full = param_peak(false, 1, false);
  c.checks.push_back({"mixed == 56 bytes", mixed == want});
  c.checks.push_back({"mixed < uniform full precision", mixed < full});
  c.detail = "mixed " + str(mixed) + " bytes (want " + str(want) + "), uniform " + str(full) + " bytes";
  return c;
}

// Cross-host elements per GPU per iteration for a single unit of M elements.
double measured_traffic(int w, int f, int g, int m) {
  ModelSpec model({LinearSpec{static_cast<std::size_t>(m - 1), 1}});
  EngineConfig cfg;
  cfg.plan = build_plan(w, f, g);
  cfg.keep_outermost_unsharded = false;
  std::vector<Tensor<double>> params;
  for (const auto& p : model.params()) params.emplace_back(p.shape, 0.5);
  Tensor<double> x({static_cast<std::size_t>(w), static_cast<std::size_t>(m - 1)}, 1.0);
  Tensor<double> y({static_cast<std::size_t>(w), 1}, 0.0);
  std::vector<StepBatches> steps{{MicroBatch{x, y, {}}}};
  const auto run = run_sharded(model, {{0, 1}}, cfg, shards_from_params(params, cfg.plan), steps);
  return traffic_report(run.traffic, cfg.plan, m, 1).measured;
}

Criterion traffic() {
  Criterion c{6, "cross-host traffic formulas", {}, ""};
  std::ostringstream d;
  auto one = [&](int m, int w, int g, const std::string& tag) {
    const double dw = w;
    const double rep_want = 2.0 * m * (dw - 1) / dw;
    const double full_want = 3.0 * m * (dw - 1) / dw;
    const double hyb_want = 2.0 * m * (dw - 1) / (g * dw);
    const double rep = measured_traffic(w, 1, g, m);
    const double full = measured_traffic(w, w, g, m);
    const double hyb = measured_traffic(w, w / g, g, m);
    c.checks.push_back({tag + " replication", rep == rep_want});
    c.checks.push_back({tag + " full sharding", full == full_want});
    c.checks.push_back({tag + " hybrid", hyb == hyb_want, true});
    d << tag << " (M=" << m << ",W=" << w << ",G=" << g << "): replicate " << rep << "/" << rep_want << ", full "
      << full << "/" << full_want << ", hybrid " << hyb << "/" << hyb_want << "; ";
  };
  one(96, 16, 8, "headline");
  std::mt19937 rng(6);
  const std::vector<std::pair<int, int>> shapes{{4, 2}, {8, 2}, {8, 4}, {16, 4}, {16, 2}, {12, 6}, {12, 3}};
  for (int i = 0; i < 5; ++i) {
    const auto [w, g] = shapes[rng() % shapes.size()];
    const int m = w * static_cast<int>(1 + rng() % 8);
    one(m, w, g, "random" + std::to_string(i));
  }
  c.detail = d.str();
  return c;
}

int first_seq(const std::vector<TraceRecord>& trace, TraceKind kind, int unit, int step, Phase phase) {
  for (const auto& t : trace) {
    if (t.kind == kind && t.unit == unit && t.step == step && t.phase == phase) return static_cast<int>(t.seq);
  }
  return -1;
}

Criterion prefetch_trace() {
  Criterion c{7, "prefetch ordering and keep-outermost gathers", {}, ""};
  const auto model = three_unit_mlp();
  const std::vector<LayerRange> three{{0, 2}, {2, 4}, {4, 5}};  // no root
  const auto params = testing::simple_params(model, 2, false);
  const auto steps = testing::random_steps(4, 3, 1, 8, 4, 2, false);

  EngineConfig cfg;
  cfg.plan = build_plan(2, 2, 2);
  cfg.backward_prefetch = true;
  cfg.forward_prefetch = true;
  cfg.rate_limit = 2;
  cfg.optimizer.lr = 0.01;
  const auto run = run_sharded(model, three, cfg, shards_from_params(params, cfg.plan), steps);
  bool bwd_ok = true, fwd_ok = true;
  int bwd_pairs = 0, fwd_pairs = 0;
  for (const auto& rk : run.ranks) {
    for (int s = 0; s < 3; ++s) {
      // Backward visits units 2, 1, 0.
      for (int u = 2; u >= 1; --u) {
        const int ag = first_seq(rk.trace, TraceKind::kAgIssue, u - 1, s, Phase::kBackward);
        const int rs = first_seq(rk.trace, TraceKind::kRsIssue, u, s, Phase::kBackward);
        bwd_ok = bwd_ok && ag >= 0 && rs >= 0 && ag < rs;
        ++bwd_pairs;
      }
      if (s == 0) continue;
      for (int u = 0; u < 2; ++u) {
        const int ag = first_seq(rk.trace, TraceKind::kAgIssue, u + 1, s, Phase::kForward);
        const int comp = first_seq(rk.trace, TraceKind::kComputeBegin, u, s, Phase::kForward);
        fwd_ok = fwd_ok && ag >= 0 && comp >= 0 && ag < comp;
        ++fwd_pairs;
      }
    }
  }

  EngineConfig keep = cfg;
  keep.keep_outermost_unsharded = true;
  const auto run2 = run_sharded(model, kTwoBlocks, keep, shards_from_params(params, keep.plan), steps);
  const int n = static_cast<int>(run2.layouts.size());
  bool count_ok = true;
  std::string counts;
  for (std::size_t r = 0; r < run2.ranks.size(); ++r) {
    for (int s = 0; s < 3; ++s) {
      int ags = 0;
      for (const auto& t : run2.ranks[r].trace) {
        ags += t.kind == TraceKind::kAgIssue && t.step == s && t.phase == Phase::kBackward;
      }
      count_ok = count_ok && ags == n - 1;
      if (r == 0) counts += str(ags) + " ";
    }
  }
  c.checks.push_back({"backward: AG(next) before RS(current)", bwd_ok});
  c.checks.push_back({"forward: AG(next) before compute(current) from iteration 2", fwd_ok});
  c.checks.push_back({"keep-outermost: N-1 backward AGs", count_ok});
  c.detail = str(bwd_pairs) + " backward pairs, " + str(fwd_pairs) + " forward pairs; N=" + str(n) +
             ", rank-0 backward AGs per step: " + counts;
  return c;
}

Criterion rate_limiter() {
  Criterion c{8, "rate limiter on the fast-host scenario", {}, ""};
  const auto r = retry_experiment(true);
  c.checks.push_back({"limiter off retries >= 1", r.off.retries >= 1});
  c.checks.push_back({"limiter off slower than limiter 2", r.off.makespan > r.limit2.makespan});
  c.checks.push_back({"limiter 2 retries == 0", r.limit2.retries == 0});
  c.checks.push_back({"inflight <= 2 with the limiter", r.limit2.max_inflight <= 2 && r.limit1.max_inflight <= 2});
  c.detail = "capacity " + str(r.capacity) + " B; off: retries " + str(r.off.retries) + " time " +
             str(r.off.makespan) + "; limit 2: retries " + str(r.limit2.retries) + " time " + str(r.limit2.makespan) +
             " inflight " + str(r.limit2.max_inflight) + "; limit 1: inflight " + str(r.limit1.max_inflight);
  return c;
}

Criterion sharded_scaler() {
  Criterion c{9, "sharded gradient scaler", {}, ""};
  const auto model = three_unit_mlp();
  const auto params = testing::simple_params(model, 11, true);
  const auto steps = testing::random_steps(8, 4, 1, 8, 4, 2, true);
  EngineConfig cfg;
  cfg.plan = build_plan(4, 2, 2);
  cfg.optimizer.lr = 8.0;
  cfg.scaler.enabled = true;

  EngineConfig inj = cfg;
  inj.inject_nonfinite = NonFiniteInjection{1, 3};
  const auto bad = run_sharded(model, kTwoBlocks, inj, shards_from_params(params, inj.plan), steps);
  bool all_skip = true, others_step = true;
  for (const auto& rk : bad.ranks) {
    all_skip = all_skip && !rk.steps[1].verdict.stepped && rk.steps[1].verdict.found_inf;
    others_step = others_step && rk.steps[0].verdict.stepped && rk.steps[2].verdict.stepped;
    // Scale reported for a step is the one used in it; the backoff shows next step.
    all_skip = all_skip && rk.steps[2].verdict.scale == cfg.scaler.init_scale * cfg.scaler.backoff_factor;
  }
  const bool unchanged = max_abs_diff(bad.params_per_step[0], bad.params_per_step[1]) == 0;

  const auto good = run_sharded(model, kTwoBlocks, cfg, shards_from_params(params, cfg.plan), steps);
  RefMlp ref{{4, 4, 4, 2}, testing::to_vectors(params)};
  double d = 0;
  bool scale_ok = true;
  for (std::size_t s = 0; s < steps.size(); ++s) {
    std::vector<std::vector<double>> x, t;
    testing::step_rows(steps[s], x, t);
    ref.step(x, t, cfg.optimizer.lr);
    d = std::max(d, testing::max_diff(ref.params, good.params_per_step[s]));
    for (const auto& rk : good.ranks) scale_ok = scale_ok && rk.steps[s].verdict.scale == cfg.scaler.init_scale;
  }
  c.checks.push_back({"one bad rank: every rank skips and backs off", all_skip && others_step && unchanged});
  c.checks.push_back({"no injection: matches the local run", d == 0 && scale_ok});
  c.detail = "injected rank 3 step 1; params unchanged across skip: " + str(unchanged) + "; clean max|d|=" + str(d);
  return c;
}

Criterion init_paths() {
  Criterion c{10, "initialization paths agree", {}, ""};
  const auto model = ModelSpec::mlp({5, 7, 3, 2});
  const auto assignment = assign_units(model, {{0, 2}, {2, 4}, {4, 5}});
  const std::size_t f = 4;
  const auto layouts = build_flat_params(model, assignment, f);
  const auto init = default_init(model);
  const auto rec = record(model, init);
  const auto host = eager_init(model, init, 99);
  bool same = true, bound = true;
  std::int64_t sharded = 0, biggest = 0;
  for (const auto& l : layouts) {
    sharded += static_cast<std::int64_t>(l.padded_numel / f * 8);
    biggest = std::max(biggest, static_cast<std::int64_t>(l.padded_numel * 8));
  }
  std::int64_t worst = 0, device_peak = 0;
  for (std::size_t k = 0; k < f; ++k) {
    const auto a = materialize_by_unit(rec, layouts, k, 99);
    const auto b = init_device(model, init, layouts, k, 99);
    const auto s = init_streamed_from_host(host, layouts, k);
    same = same && a.shards == b.shards && a.shards == s.shards;
    bound = bound && a.device.peak_allocated_bytes <= sharded + biggest && s.device.peak_allocated_bytes <= sharded + biggest;
    worst = std::max({worst, a.device.peak_allocated_bytes, s.device.peak_allocated_bytes});
    device_peak = std::max(device_peak, b.device.peak_allocated_bytes);
  }
  c.checks.push_back({"bit-identical shards on every rank", same});
  c.checks.push_back({"deferred and streamed peaks within one unit", bound});
  c.detail = "bound " + str(sharded + biggest) + " B, deferred/streamed peak " + str(worst) +
             " B, on-device peak " + str(device_peak) + " B";
  return c;
}

Criterion overlap() {
  Criterion c{11, "overlap shortens the step; small collectives cost more", {}, ""};
  const auto serial = run_scenario(1, 0, false);
  const auto two = run_scenario(2, 0, true);
  const auto unlimited = run_scenario(std::nullopt, 0, true);
  const auto sweep = collective_size_sweep(1 << 14, {1 << 14, 1 << 12, 1 << 10, 1 << 8, 1 << 6});
  bool monotone = true;
  std::string times;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    times += str(sweep[i].comm_time) + " ";
    if (i > 0) monotone = monotone && sweep[i].comm_time > sweep[i - 1].comm_time;
  }
  c.checks.push_back({"limiter 2 faster than serialized", two.makespan < serial.makespan && two.overlap});
  c.checks.push_back({"unlimited faster than serialized", unlimited.makespan < serial.makespan});
  c.checks.push_back({"comm time grows as collectives shrink", monotone});
  c.detail = "serialized " + str(serial.makespan) + ", limiter 2 " + str(two.makespan) + ", unlimited " +
             str(unlimited.makespan) + "; sweep " + times;
  return c;
}

}  // namespace

int main() {
  const std::vector<std::function<Criterion()>> all{equivalence, decomposition, padding,   memory_formula,
                                                    mixed_memory, traffic,       prefetch_trace, rate_limiter,
                                                    sharded_scaler, init_paths,  overlap};
  int hard_failures = 0;
  for (const auto& fn : all) {
    Criterion c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c.checks.push_back({std::string("threw: ") + e.what(), false});
    }
    bool pass = true;
    std::string failed;
    for (const auto& ch : c.checks) {
      if (ch.ok) continue;
      pass = false;
      failed += " [" + ch.what + (ch.known_unattainable ? ", known unattainable" : "") + "]";
      if (!ch.known_unattainable) ++hard_failures;
    }
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.name;
    if (!failed.empty()) std::cout << "; failed:" << failed;
    std::cout << " -- " << c.detail << std::endl;
  }
  return hard_failures == 0 ? 0 : 1;
}

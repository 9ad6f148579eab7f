// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsdp/collectives/plan.hpp"
#include "fsdp/collectives/traffic.hpp"
#include "fsdp/deferred_init/init.hpp"
#include "fsdp/engine/driver.hpp"
#include "fsdp/engine/local.hpp"
#include "fsdp/errors.hpp"
#include "fsdp/flatparam/flat_parameter.hpp"

namespace fsdp::cli {

using json = nlohmann::ordered_json;

inline constexpr int kMetricsSchema = 1;

enum class InitPath { kDeferred, kDevice, kStreamed };
enum class DataKind { kRandom, kInteger };

// Everything a run needs, as read from a JSON file and command-line overrides.
struct RunConfig {
  int world_size = 4;
  int sharding_factor = 4;
  int host_size = 0;  // 0: one host holds every rank
  std::string strategy;  // optional cross-check: full | hybrid | replicate
  bool reshard_after_forward = true;
  bool backward_prefetch = true;
  bool forward_prefetch = false;
  int rate_limit = 2;  // 0: unlimited
  bool mixed_precision = false;
  bool reduce_in_full = false;
  Accumulation accumulation = Accumulation::kOff;
  int micro_batches = 1;
  InitPath init_path = InitPath::kDeferred;
  std::vector<std::size_t> widths{8, 8, 8, 4};
  Activation activation = Activation::kReLU;
  std::vector<LayerRange> units;  // empty: one unit per linear layer
  bool keep_outermost = true;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  std::optional<double> lr;
  std::uint64_t seed = 0;
  int steps = 5;
  int batch_per_rank = 2;
  DataKind data = DataKind::kRandom;
  CostModel cost;
  std::int64_t capacity_bytes = 0;
  ScalerConfig scaler;
  int forward_passes = 1;
  bool round_robin = false;

  int host() const { return host_size > 0 ? host_size : world_size; }
  std::size_t global_rows() const { return static_cast<std::size_t>(world_size) * batch_per_rank; }

  double effective_lr() const {
    if (lr) return *lr;
    // With integer data the learning rate cancels the batch mean, which keeps
    // every update an integer.
    if (data == DataKind::kInteger) return static_cast<double>(global_rows() * micro_batches);
    return 0.05;
  }
};

inline std::uint64_t default_seed() {
  if (const char* s = std::getenv("FSDP_SIM_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("FSDP_SIM_SEED: not an unsigned integer: ") + s);
    }
  }
  return 0;
}

namespace detail {

template <typename T>
T get_as(const json& j, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(field + ": wrong type (" + j.dump() + ")");
  }
}

inline Accumulation parse_accumulation(const std::string& s) {
  if (s == "off") return Accumulation::kOff;
  if (s == "with_comm") return Accumulation::kWithComm;
  if (s == "no_comm") return Accumulation::kNoComm;
  throw ConfigError("accumulation.mode: expected off | with_comm | no_comm, got '" + s + "'");
}

inline InitPath parse_init_path(const std::string& s) {
  if (s == "deferred") return InitPath::kDeferred;
  if (s == "device") return InitPath::kDevice;
  if (s == "streamed") return InitPath::kStreamed;
  throw ConfigError("init_path: expected deferred | device | streamed, got '" + s + "'");
}

inline const char* init_path_name(InitPath p) {
  return p == InitPath::kDeferred ? "deferred" : p == InitPath::kDevice ? "device" : "streamed";
}

}  // namespace detail

// Applies the keys of `j` onto `cfg`. Unknown keys are errors, so a typo
// cannot silently fall back to a default.
inline void apply_json(RunConfig& cfg, const json& j) {
  using detail::get_as;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "world_size") {
      cfg.world_size = get_as<int>(v, key);
    } else if (key == "sharding_factor") {
      cfg.sharding_factor = get_as<int>(v, key);
    } else if (key == "host_size") {
      cfg.host_size = get_as<int>(v, key);
    } else if (key == "strategy") {
      cfg.strategy = get_as<std::string>(v, key);
    } else if (key == "reshard_after_forward") {
      cfg.reshard_after_forward = get_as<bool>(v, key);
    } else if (key == "backward_prefetch") {
      cfg.backward_prefetch = get_as<bool>(v, key);
    } else if (key == "forward_prefetch") {
      cfg.forward_prefetch = get_as<bool>(v, key);
    } else if (key == "rate_limit") {
      cfg.rate_limit = get_as<int>(v, key);
    } else if (key == "precision") {
      const auto s = get_as<std::string>(v, key);
      if (s != "uniform" && s != "mixed") throw ConfigError("precision: expected uniform | mixed, got '" + s + "'");
      cfg.mixed_precision = s == "mixed";
    } else if (key == "reduce_precision") {
      const auto s = get_as<std::string>(v, key);
      if (s != "low" && s != "full") throw ConfigError("reduce_precision: expected low | full, got '" + s + "'");
      cfg.reduce_in_full = s == "full";
    } else if (key == "accumulation") {
      if (!v.is_object()) throw ConfigError("accumulation: expected {\"mode\": ..., \"k\": ...}");
      for (const auto& [k2, v2] : v.items()) {
        if (k2 == "mode") {
          cfg.accumulation = detail::parse_accumulation(get_as<std::string>(v2, "accumulation.mode"));
        } else if (k2 == "k") {
          cfg.micro_batches = get_as<int>(v2, "accumulation.k");
        } else {
          throw ConfigError("accumulation." + k2 + ": unknown field");
        }
      }
    } else if (key == "init_path") {
      cfg.init_path = detail::parse_init_path(get_as<std::string>(v, key));
    } else if (key == "model") {
      if (!v.is_object()) throw ConfigError("model: expected an object");
      for (const auto& [k2, v2] : v.items()) {
        if (k2 == "widths") {
          cfg.widths = get_as<std::vector<std::size_t>>(v2, "model.widths");
        } else if (k2 == "activation") {
          const auto s = get_as<std::string>(v2, "model.activation");
          if (s != "relu" && s != "tanh") throw ConfigError("model.activation: expected relu | tanh");
          cfg.activation = s == "relu" ? Activation::kReLU : Activation::kTanh;
        } else if (k2 == "units") {
          cfg.units.clear();
          for (const auto& r : get_as<std::vector<std::vector<std::size_t>>>(v2, "model.units")) {
            if (r.size() != 2) throw ConfigError("model.units: each unit is [begin, end)");
            cfg.units.push_back({r[0], r[1]});
          }
        } else {
          throw ConfigError("model." + k2 + ": unknown field");
        }
      }
    } else if (key == "keep_outermost_unsharded") {
      cfg.keep_outermost = get_as<bool>(v, key);
    } else if (key == "optimizer") {
      if (!v.is_object()) throw ConfigError("optimizer: expected an object");
      for (const auto& [k2, v2] : v.items()) {
        if (k2 == "kind") {
          const auto s = get_as<std::string>(v2, "optimizer.kind");
          if (s != "sgd" && s != "adam") throw ConfigError("optimizer.kind: expected sgd | adam");
          cfg.optimizer = s == "sgd" ? OptimizerKind::kSgd : OptimizerKind::kAdam;
        } else if (k2 == "lr") {
          cfg.lr = get_as<double>(v2, "optimizer.lr");
        } else {
          throw ConfigError("optimizer." + k2 + ": unknown field");
        }
      }
    } else if (key == "seed") {
      cfg.seed = get_as<std::uint64_t>(v, key);
    } else if (key == "steps") {
      cfg.steps = get_as<int>(v, key);
    } else if (key == "batch_per_rank") {
      cfg.batch_per_rank = get_as<int>(v, key);
    } else if (key == "data") {
      const auto s = get_as<std::string>(v, key);
      if (s != "random" && s != "integer") throw ConfigError("data: expected random | integer, got '" + s + "'");
      cfg.data = s == "integer" ? DataKind::kInteger : DataKind::kRandom;
    } else if (key == "cost") {
      if (!v.is_object()) throw ConfigError("cost: expected an object");
      for (const auto& [k2, v2] : v.items()) {
        const double d = get_as<double>(v2, "cost." + k2);
        if (k2 == "alpha") {
          cfg.cost.alpha = d;
        } else if (k2 == "beta") {
          cfg.cost.beta = d;
        } else if (k2 == "gamma") {
          cfg.cost.gamma = d;
        } else if (k2 == "delta") {
          cfg.cost.delta = d;
        } else {
          throw ConfigError("cost." + k2 + ": unknown field");
        }
      }
    } else if (key == "capacity_bytes") {
      cfg.capacity_bytes = get_as<std::int64_t>(v, key);
    } else if (key == "scaler") {
      if (!v.is_object()) throw ConfigError("scaler: expected an object");
      for (const auto& [k2, v2] : v.items()) {
        if (k2 == "enabled") {
          cfg.scaler.enabled = get_as<bool>(v2, "scaler.enabled");
        } else if (k2 == "init_scale") {
          cfg.scaler.init_scale = get_as<double>(v2, "scaler.init_scale");
        } else if (k2 == "growth_factor") {
          cfg.scaler.growth_factor = get_as<double>(v2, "scaler.growth_factor");
        } else if (k2 == "backoff_factor") {
          cfg.scaler.backoff_factor = get_as<double>(v2, "scaler.backoff_factor");
        } else if (k2 == "growth_interval") {
          cfg.scaler.growth_interval = get_as<int>(v2, "scaler.growth_interval");
        } else {
          throw ConfigError("scaler." + k2 + ": unknown field");
        }
      }
    } else if (key == "forward_passes") {
      cfg.forward_passes = get_as<int>(v, key);
    } else if (key == "execution") {
      const auto s = get_as<std::string>(v, key);
      if (s != "threaded" && s != "round_robin") throw ConfigError("execution: expected threaded | round_robin");
      cfg.round_robin = s == "round_robin";
    } else {
      throw ConfigError(key + ": unknown field");
    }
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  RunConfig cfg;
  cfg.seed = default_seed();
  apply_json(cfg, j);
  return cfg;
}

inline ModelSpec build_model(const RunConfig& cfg) { return ModelSpec::mlp(cfg.widths, cfg.activation); }

// Default units: each linear layer together with the activation after it.
inline std::vector<LayerRange> unit_ranges(const RunConfig& cfg, const ModelSpec& model) {
  if (!cfg.units.empty()) return cfg.units;
  std::vector<LayerRange> out;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    if (!std::holds_alternative<LinearSpec>(model.layers()[l])) continue;
    std::size_t end = l + 1;
    if (end < model.num_layers() && std::holds_alternative<ActivationSpec>(model.layers()[end])) ++end;
    out.push_back({l, end});
  }
  return out;
}

// Checks every cross-field rule and names the offending field.
inline void validate(const RunConfig& cfg) {
  if (cfg.world_size < 1) throw ConfigError("world_size: must be >= 1");
  if (cfg.sharding_factor < 1) throw ConfigError("sharding_factor: must be >= 1");
  if (cfg.world_size % cfg.sharding_factor != 0) {
    throw ConfigError("sharding_factor: " + std::to_string(cfg.sharding_factor) + " does not divide world_size " +
                      std::to_string(cfg.world_size));
  }
  if (cfg.host_size < 0 || cfg.world_size % cfg.host() != 0) {
    throw ConfigError("host_size: " + std::to_string(cfg.host_size) + " does not divide world_size " +
                      std::to_string(cfg.world_size));
  }
  if (!cfg.strategy.empty()) {
    if (cfg.strategy == "full" && cfg.sharding_factor != cfg.world_size) {
      throw ConfigError("strategy: full requires sharding_factor == world_size");
    }
    if (cfg.strategy == "replicate" && cfg.sharding_factor != 1) {
      throw ConfigError("strategy: replicate requires sharding_factor == 1");
    }
    if (cfg.strategy == "hybrid" && (cfg.sharding_factor == 1 || cfg.sharding_factor == cfg.world_size)) {
      throw ConfigError("strategy: hybrid requires 1 < sharding_factor < world_size");
    }
    if (cfg.strategy != "full" && cfg.strategy != "replicate" && cfg.strategy != "hybrid") {
      throw ConfigError("strategy: expected full | hybrid | replicate, got '" + cfg.strategy + "'");
    }
  }
  if (cfg.rate_limit < 0) throw ConfigError("rate_limit: must be >= 0 (0 means unlimited)");
  if (cfg.micro_batches < 1) throw ConfigError("accumulation.k: must be >= 1");
  if (cfg.accumulation == Accumulation::kOff && cfg.micro_batches != 1) {
    throw ConfigError("accumulation.k: must be 1 when accumulation is off");
  }
  if (cfg.steps < 1) throw ConfigError("steps: must be >= 1");
  if (cfg.batch_per_rank < 1) throw ConfigError("batch_per_rank: must be >= 1");
  if (cfg.forward_passes < 1 || cfg.batch_per_rank % cfg.forward_passes != 0) {
    throw ConfigError("forward_passes: must be >= 1 and divide batch_per_rank");
  }
  if (cfg.widths.size() < 2) throw ConfigError("model.widths: need at least two widths");
  for (auto w : cfg.widths) {
    if (w == 0) throw ConfigError("model.widths: widths must be positive");
  }
  if (cfg.capacity_bytes < 0) throw ConfigError("capacity_bytes: must be >= 0");
  if (cfg.scaler.enabled && !(cfg.scaler.init_scale > 0 && std::isfinite(cfg.scaler.init_scale))) {
    throw ConfigError("scaler.init_scale: must be finite and positive");
  }
  const auto model = build_model(cfg);
  try {
    assign_units(model, unit_ranges(cfg, model));
  } catch (const Error& e) {
    throw ConfigError(std::string("model.units: ") + e.what());
  }
}

inline EngineConfig engine_config(const RunConfig& cfg) {
  EngineConfig e;
  e.plan = build_plan(cfg.world_size, cfg.sharding_factor, cfg.host());
  e.reshard_after_forward = cfg.reshard_after_forward;
  e.backward_prefetch = cfg.backward_prefetch;
  e.forward_prefetch = cfg.forward_prefetch;
  e.rate_limit = cfg.rate_limit > 0 ? std::optional<int>(cfg.rate_limit) : std::nullopt;
  e.precision.mixed = cfg.mixed_precision;
  e.precision.reduce_dtype = cfg.reduce_in_full ? DType::kFull : DType::kLow;
  e.keep_outermost_unsharded = cfg.keep_outermost;
  e.optimizer.kind = cfg.optimizer;
  e.optimizer.lr = cfg.effective_lr();
  e.scaler = cfg.scaler;
  e.cost = cfg.cost;
  e.capacity_bytes = cfg.capacity_bytes;
  e.forward_passes = cfg.forward_passes;
  return e;
}

inline ModelInit model_init(const RunConfig& cfg, const ModelSpec& model) {
  return cfg.data == DataKind::kInteger ? integer_init(model) : default_init(model);
}

// Global micro-batches for every step, from the seed alone.
inline std::vector<StepBatches> make_data(const RunConfig& cfg, const ModelSpec& model) {
  std::vector<StepBatches> steps;
  const std::size_t rows = cfg.global_rows();
  for (int s = 0; s < cfg.steps; ++s) {
    StepBatches sb;
    for (int m = 0; m < cfg.micro_batches; ++m) {
      auto stream = named_stream(cfg.seed, "data." + std::to_string(s) + "." + std::to_string(m));
      auto draw = [&]() {
        return cfg.data == DataKind::kInteger ? std::floor(unit_uniform(stream) * 3) - 1
                                              : 2 * unit_uniform(stream) - 1;
      };
      Tensor<double> x({rows, model.input_dim()});
      Tensor<double> y({rows, model.output_dim()});
      for (auto& v : x.storage()) v = draw();
      for (auto& v : y.storage()) v = draw();
      sb.push_back({std::move(x), std::move(y), {}});
    }
    steps.push_back(std::move(sb));
  }
  return steps;
}

inline std::vector<Tensor<double>> initial_params(const RunConfig& cfg, const ModelSpec& model) {
  return eager_init(model, model_init(cfg, model), cfg.seed);
}

inline ShardSource shard_source(const RunConfig& cfg, const ModelSpec& model) {
  const ShardingPlan plan = build_plan(cfg.world_size, cfg.sharding_factor, cfg.host());
  const auto init = model_init(cfg, model);
  const auto seed = cfg.seed;
  const auto path = cfg.init_path;
  return [&model, plan, init, seed, path](int rank, const std::vector<FlatParamLayout>& layouts) {
    const auto k = static_cast<std::size_t>(plan.shard_index(rank));
    switch (path) {
      case InitPath::kDeferred:
        return materialize_by_unit(record(model, init), layouts, k, seed).shards;
      case InitPath::kDevice:
        return init_device(model, init, layouts, k, seed).shards;
      case InitPath::kStreamed:
        return init_streamed_from_host(eager_init(model, init, seed), layouts, k).shards;
    }
    return std::vector<std::vector<double>>{};
  };
}

struct Outcome {
  RunConfig config;
  ShardedRun run;
  double model_elems = 0;  // M: total padded flat-parameter elements
};

inline Outcome execute(const RunConfig& cfg, FabricFaults faults = {}) {
  validate(cfg);
  const auto model = build_model(cfg);
  const auto units = unit_ranges(cfg, model);
  RunOptions opts;
  opts.mode = cfg.round_robin ? ExecutionMode::kRoundRobin : ExecutionMode::kThreaded;
  opts.faults = faults;
  opts.accumulation = cfg.accumulation;
  Outcome out;
  out.config = cfg;
  out.run = run_sharded(model, units, engine_config(cfg), shard_source(cfg, model), make_data(cfg, model), opts);
  for (const auto& l : out.run.layouts) out.model_elems += static_cast<double>(l.padded_numel);
  return out;
}

struct EventCounts {
  int all_gathers = 0;
  int reduce_scatters = 0;
  int all_reduces = 0;
};

inline EventCounts count_events(const std::vector<TraceRecord>& trace, std::optional<int> step = std::nullopt) {
  EventCounts c;
  for (const auto& t : trace) {
    if (step && t.step != *step) continue;
    if (t.kind == TraceKind::kAgIssue) ++c.all_gathers;
    if (t.kind == TraceKind::kRsIssue) ++c.reduce_scatters;
    if (t.kind == TraceKind::kArIssue) ++c.all_reduces;
  }
  return c;
}

inline json memory_json(const MemoryStats& m) {
  json j;
  for (int i = 0; i < kNumMemCategories; ++i) j[category_name(static_cast<MemCategory>(i))] = m.peak_by_category[i];
  j["params"] = m.peak_param_bytes;
  j["total"] = m.peak_allocated_bytes;
  j["reserved"] = m.peak_reserved_bytes;
  return j;
}

// Busiest rank per category, so one figure describes the whole world.
inline MemoryStats max_over_ranks(const std::vector<MemoryStats>& all) {
  MemoryStats m;
  for (const auto& s : all) {
    m.num_alloc_retries = std::max(m.num_alloc_retries, s.num_alloc_retries);
    m.peak_allocated_bytes = std::max(m.peak_allocated_bytes, s.peak_allocated_bytes);
    m.peak_reserved_bytes = std::max(m.peak_reserved_bytes, s.peak_reserved_bytes);
    m.peak_param_bytes = std::max(m.peak_param_bytes, s.peak_param_bytes);
    for (int i = 0; i < kNumMemCategories; ++i) {
      m.peak_by_category[i] = std::max(m.peak_by_category[i], s.peak_by_category[i]);
    }
  }
  return m;
}

// One record per step.
inline std::vector<json> metrics(const Outcome& o) {
  std::vector<json> out;
  const auto& ranks = o.run.ranks;
  for (std::size_t s = 0; s < o.run.losses.size(); ++s) {
    json rec;
    rec["schema"] = kMetricsSchema;
    rec["step"] = s;
    rec["loss"] = o.run.losses[s];
    rec["stepped"] = ranks[0].steps[s].verdict.stepped;
    rec["scale"] = ranks[0].steps[s].verdict.scale;
    rec["step_time"] = ranks[0].steps[s].step_time;
    json traffic = json::array();
    for (std::size_t r = 0; r < ranks.size(); ++r) {
      const auto& now = ranks[r].traffic_after_step[s];
      double intra = now.intra_host(), cross = now.cross_host();
      if (s > 0) {
        intra -= ranks[r].traffic_after_step[s - 1].intra_host();
        cross -= ranks[r].traffic_after_step[s - 1].cross_host();
      }
      traffic.push_back({{"rank", r}, {"intra_host", intra}, {"cross_host", cross}});
    }
    rec["traffic"] = traffic;
    std::vector<MemoryStats> mem;
    for (const auto& rk : ranks) mem.push_back(rk.memory_after_step[s]);
    const auto peak = max_over_ranks(mem);
    rec["peak_memory"] = memory_json(peak);
    rec["retries"] = peak.num_alloc_retries;
    const auto ev = count_events(ranks[0].trace, static_cast<int>(s));
    rec["events"] = {{"AG", ev.all_gathers}, {"RS", ev.reduce_scatters}, {"AR", ev.all_reduces}};
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_trace(const Outcome& o, std::ostream& os) {
  for (const auto& rk : o.run.ranks) {
    for (const auto& t : rk.trace) {
      json j;
      j["rank"] = t.rank;
      j["seq"] = t.seq;
      j["kind"] = trace_kind_name(t.kind);
      j["unit"] = t.unit;
      j["bytes"] = t.bytes;
      j["t"] = t.t;
      j["phase"] = phase_name(t.phase);
      j["step"] = t.step;
      os << j.dump() << "\n";
    }
  }
}

// ------------------------------------------------------------------ verify

struct VerifyReport {
  bool pass = true;
  std::vector<double> divergence;  // max |param diff| per step
  double tolerance = 0;
  double oracle_magnitude = 0;  // largest |param| seen in local training
  std::optional<TrafficReport> traffic;
  bool traffic_checked = false;
  std::int64_t predicted_param_bytes = 0;
  std::int64_t measured_param_bytes = 0;
  bool memory_checked = false;
  bool memory_exact = false;
  std::vector<std::string> failures;
};

inline double verify_tolerance(const RunConfig& cfg) {
  if (cfg.mixed_precision) return 1e-4;
  return cfg.data == DataKind::kInteger && cfg.optimizer == OptimizerKind::kSgd ? 0.0 : 1e-8;
}

inline VerifyReport verify(const RunConfig& cfg, FabricFaults faults = {}) {
  VerifyReport rep;
  const auto out = execute(cfg, faults);
  const auto model = build_model(cfg);
  const auto data = make_data(cfg, model);
  const auto engine = engine_config(cfg);
  rep.tolerance = verify_tolerance(cfg);

  auto compare = [&](auto& local) {
    for (std::size_t s = 0; s < data.size(); ++s) {
      local.step(data[s]);
      rep.divergence.push_back(max_abs_diff(local.params(), out.run.params_per_step[s]));
      for (const auto& p : local.params()) {
        for (std::size_t i = 0; i < p.numel(); ++i) {
          rep.oracle_magnitude = std::max(rep.oracle_magnitude, std::abs(static_cast<double>(p[i])));
        }
      }
    }
  };
  if (cfg.mixed_precision) {
    LocalTrainer<float> local(model, initial_params(cfg, model), engine.optimizer, engine.scaler);
    compare(local);
  } else {
    LocalTrainer<double> local(model, initial_params(cfg, model), engine.optimizer, engine.scaler);
    compare(local);
  }
  for (std::size_t s = 0; s < rep.divergence.size(); ++s) {
    if (!(rep.divergence[s] <= rep.tolerance)) {
      std::ostringstream os;
      os << "step " << s << ": parameter divergence " << rep.divergence[s] << " exceeds " << rep.tolerance;
      rep.failures.push_back(os.str());
    }
  }
  // Integer data is exact only while every value fits the double mantissa.
  if (rep.tolerance == 0 && !rep.failures.empty() && !(rep.oracle_magnitude < 9007199254740992.0)) {
    rep.failures.push_back("training diverged past 2^53, where integer arithmetic stops being exact");
  }
  if (out.run.replica_divergence > rep.tolerance) {
    rep.failures.push_back("replicas of one shard disagree by " + std::to_string(out.run.replica_divergence));
  }

  // Formula checks apply only where their counting conventions hold.
  const auto& plan = engine.plan;
  const auto assignment = assign_units(model, unit_ranges(cfg, model));
  const bool root_kept = assignment.has_root && cfg.keep_outermost;
  rep.traffic = traffic_report(out.run.traffic, plan, out.model_elems, cfg.steps);
  rep.traffic_checked = plan.num_hosts() > 1 && cfg.reshard_after_forward && !root_kept &&
                        cfg.accumulation == Accumulation::kOff && cfg.forward_passes == 1;
  if (rep.traffic_checked && !rep.traffic->matches()) {
    std::ostringstream os;
    os << "cross-host traffic " << rep.traffic->measured << " per GPU, formula " << rep.traffic->predicted;
    rep.failures.push_back(os.str());
  }

  std::vector<std::size_t> psis;
  for (const auto& l : out.run.layouts) psis.push_back(l.padded_numel);
  const bool two = cfg.forward_prefetch && cfg.rate_limit != 1;
  rep.predicted_param_bytes =
      predict_peak_param_bytes(psis, static_cast<std::size_t>(plan.sharding_factor), engine.precision,
                               two ? InflightPolicy::kTwo : InflightPolicy::kOne);
  std::vector<MemoryStats> mem;
  for (const auto& rk : out.run.ranks) mem.push_back(rk.memory);
  rep.measured_param_bytes = max_over_ranks(mem).peak_param_bytes;
  rep.memory_checked = cfg.reshard_after_forward && !root_kept && cfg.forward_passes == 1 &&
                       (cfg.rate_limit == 1 || cfg.rate_limit == 2);
  rep.memory_exact = !two;
  if (rep.memory_checked) {
    const bool ok = rep.memory_exact ? rep.measured_param_bytes == rep.predicted_param_bytes
                                     : rep.measured_param_bytes <= rep.predicted_param_bytes;
    if (!ok) {
      rep.failures.push_back("parameter peak " + std::to_string(rep.measured_param_bytes) + " bytes, formula " +
                             std::to_string(rep.predicted_param_bytes));
    }
  }
  rep.pass = rep.failures.empty();
  return rep;
}

// ------------------------------------------------------------------- sweep

struct Axis {
  std::string name;
  std::vector<std::string> values;
};

inline Axis parse_axis(const std::string& spec) {
  static const std::set<std::string> allowed{"F", "W", "rate_limit", "raf", "prefetch"};
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("axis '" + spec + "': expected name=v1,v2,...");
  Axis a;
  a.name = spec.substr(0, eq);
  if (!allowed.count(a.name)) throw ConfigError("axis '" + a.name + "': expected one of F, W, rate_limit, raf, prefetch");
  std::stringstream ss(spec.substr(eq + 1));
  for (std::string v; std::getline(ss, v, ',');) {
    if (!v.empty()) a.values.push_back(v);
  }
  if (a.values.empty()) throw ConfigError("axis '" + a.name + "': no values");
  return a;
}

inline bool parse_flag(const std::string& axis, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "RAF") return true;
  if (v == "0" || v == "false" || v == "off" || v == "NRAF") return false;
  throw ConfigError("axis '" + axis + "': invalid value '" + v + "'");
}

inline int parse_int(const std::string& axis, const std::string& v) {
  if (axis == "rate_limit" && (v == "inf" || v == "off")) return 0;
  try {
    std::size_t used = 0;
    const int n = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("axis '" + axis + "': invalid value '" + v + "'");
  }
}

inline void apply_axis(RunConfig& cfg, const std::string& axis, const std::string& v) {
  if (axis == "F") {
    cfg.sharding_factor = parse_int(axis, v);
  } else if (axis == "W") {
    cfg.world_size = parse_int(axis, v);
  } else if (axis == "rate_limit") {
    cfg.rate_limit = parse_int(axis, v);
  } else if (axis == "raf") {
    cfg.reshard_after_forward = parse_flag(axis, v);
  } else if (axis == "prefetch") {
    cfg.backward_prefetch = cfg.forward_prefetch = parse_flag(axis, v);
  }
}

struct SweepRow {
  std::vector<std::string> point;
  int all_gathers = 0;
  int reduce_scatters = 0;
  int all_reduces = 0;
  std::int64_t peak_param_bytes = 0;
  std::int64_t peak_unsharded_bytes = 0;
  int retries = 0;
  double step_time = 0;  // mean over steps
  double cross_host = 0;  // per GPU per iteration, busiest rank
  double final_loss = 0;
};

inline std::vector<SweepRow> sweep(const RunConfig& base, const std::vector<Axis>& axes) {
  std::vector<SweepRow> rows;
  std::vector<std::size_t> idx(axes.size(), 0);
  while (true) {
    RunConfig cfg = base;
    SweepRow row;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      apply_axis(cfg, axes[a].name, axes[a].values[idx[a]]);
      row.point.push_back(axes[a].values[idx[a]]);
    }
    const auto out = execute(cfg);
    const auto ev = count_events(out.run.ranks[0].trace);
    row.all_gathers = ev.all_gathers;
    row.reduce_scatters = ev.reduce_scatters;
    row.all_reduces = ev.all_reduces;
    std::vector<MemoryStats> mem;
    for (const auto& rk : out.run.ranks) mem.push_back(rk.memory);
    const auto peak = max_over_ranks(mem);
    row.peak_param_bytes = peak.peak_param_bytes;
    row.peak_unsharded_bytes = peak.peak_by_category[static_cast<int>(MemCategory::kUnshardedParams)];
    row.retries = peak.num_alloc_retries;
    for (const auto& s : out.run.ranks[0].steps) row.step_time += s.step_time / cfg.steps;
    const auto plan = build_plan(cfg.world_size, cfg.sharding_factor, cfg.host());
    row.cross_host = traffic_report(out.run.traffic, plan, out.model_elems, cfg.steps).measured;
    row.final_loss = out.run.losses.back();
    rows.push_back(std::move(row));

    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < axes[a].values.size()) break;
      idx[a] = 0;
      if (a == 0) return rows;
    }
    if (axes.empty()) return rows;
  }
}

inline void write_sweep_csv(const std::vector<Axis>& axes, const std::vector<SweepRow>& rows, std::ostream& os) {
  for (const auto& a : axes) os << a.name << ",";
  os << "ag_events,rs_events,ar_events,peak_param_bytes,peak_unsharded_bytes,retries,step_time,cross_host,final_loss\n";
  for (const auto& r : rows) {
    for (const auto& p : r.point) os << p << ",";
    os << r.all_gathers << "," << r.reduce_scatters << "," << r.all_reduces << "," << r.peak_param_bytes << ","
       << r.peak_unsharded_bytes << "," << r.retries << "," << r.step_time << "," << r.cross_host << ","
       << r.final_loss << "\n";
  }
}

// --------------------------------------------------------------- dump-plan

inline std::string dump_plan(const RunConfig& cfg) {
  validate(cfg);
  const auto model = build_model(cfg);
  const auto plan = build_plan(cfg.world_size, cfg.sharding_factor, cfg.host());
  const auto assignment = assign_units(model, unit_ranges(cfg, model));
  const auto layouts = build_flat_params(model, assignment, static_cast<std::size_t>(cfg.sharding_factor));
  return plan.describe() + dump_layouts(layouts);
}

}  // namespace fsdp::cli

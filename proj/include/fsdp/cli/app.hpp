// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fsdp/cli/harness.hpp"

namespace fsdp::cli {

// Command-line flags, kept as JSON so they go through the same validation as
// config files. Flags win over file values.
struct Overrides {
  std::optional<int> world_size, sharding_factor, host_size, rate_limit, steps, batch_per_rank;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy, precision, init_path, data, accumulation;
  std::optional<int> micro_batches;
  std::optional<bool> raf, backward_prefetch, forward_prefetch;

  void attach(CLI::App* app) {
    app->add_option("--world-size,-W", world_size, "number of simulated ranks");
    app->add_option("--sharding-factor,-F", sharding_factor, "ranks per shard group");
    app->add_option("--host-size,-G", host_size, "ranks per host");
    app->add_option("--strategy", strategy, "full | hybrid | replicate (checked against F)");
    app->add_option("--rate-limit", rate_limit, "max inflight unshards, 0 for unlimited");
    app->add_option("--steps", steps, "training iterations");
    app->add_option("--batch-per-rank", batch_per_rank, "rows per rank per micro-batch");
    app->add_option("--seed", seed, "seed for init and data (default: $FSDP_SIM_SEED or 0)");
    app->add_option("--precision", precision, "uniform | mixed");
    app->add_option("--init-path", init_path, "deferred | device | streamed");
    app->add_option("--data", data, "random | integer");
    app->add_option("--accumulation", accumulation, "off | with_comm | no_comm");
    app->add_option("--micro-batches,-k", micro_batches, "micro-batches per step when accumulating");
    app->add_option("--raf", raf, "reshard after forward (true/false)");
    app->add_option("--backward-prefetch", backward_prefetch, "true/false");
    app->add_option("--forward-prefetch", forward_prefetch, "true/false");
  }

  json to_json() const {
    json j = json::object();
    if (world_size) j["world_size"] = *world_size;
    if (sharding_factor) j["sharding_factor"] = *sharding_factor;
    if (host_size) j["host_size"] = *host_size;
    if (strategy) j["strategy"] = *strategy;
    if (rate_limit) j["rate_limit"] = *rate_limit;
    if (steps) j["steps"] = *steps;
    if (batch_per_rank) j["batch_per_rank"] = *batch_per_rank;
    if (seed) j["seed"] = *seed;
    if (precision) j["precision"] = *precision;
    if (init_path) j["init_path"] = *init_path;
    if (data) j["data"] = *data;
    if (accumulation || micro_batches) {
      json a = json::object();
      if (accumulation) a["mode"] = *accumulation;
      if (micro_batches) a["k"] = *micro_batches;
      j["accumulation"] = a;
    }
    if (raf) j["reshard_after_forward"] = *raf;
    if (backward_prefetch) j["backward_prefetch"] = *backward_prefetch;
    if (forward_prefetch) j["forward_prefetch"] = *forward_prefetch;
    return j;
  }
};

inline RunConfig resolve(const std::string& config_path, const Overrides& o) {
  RunConfig cfg;
  if (!config_path.empty()) {
    cfg = load_config(config_path);
  } else {
    cfg.seed = default_seed();
  }
  apply_json(cfg, o.to_json());
  // Changing W alone on the command line should keep full sharding the default.
  if (o.world_size && !o.sharding_factor && config_path.empty()) cfg.sharding_factor = cfg.world_size;
  validate(cfg);
  return cfg;
}

// Runs the command line; returns the process exit code.
inline int main_with(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"fsdp_sim: deterministic fully sharded data parallel simulator"};
  app.require_subcommand(1);

  std::string config_path, out_path, trace_path, fault;
  std::vector<std::string> axes;
  Overrides o;

  auto* run = app.add_subcommand("run", "train and emit one metrics line per step");
  auto* ver = app.add_subcommand("verify", "compare against local training and the closed-form formulas");
  auto* swp = app.add_subcommand("sweep", "run a grid over F, W, rate_limit, raf, prefetch and print CSV");
  auto* dump = app.add_subcommand("dump-plan", "print the rank groups and flat-parameter layouts");
  for (auto* sub : {run, ver, swp, dump}) {
    sub->add_option("--config,-c", config_path, "JSON config file");
    o.attach(sub);
  }
  run->add_option("--out,-o", out_path, "metrics file (default stdout)");
  run->add_option("--trace", trace_path, "write the event trace here");
  ver->add_option("--fault", fault, "test hook: misroute-reduce-scatter")
      ->check(CLI::IsMember({"misroute-reduce-scatter"}));
  swp->add_option("--axis,-a", axes, "name=v1,v2,... over F, W, rate_limit, raf, prefetch")->required();
  swp->add_option("--out,-o", out_path, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    const RunConfig cfg = resolve(config_path, o);
    if (*run) {
      const auto outcome = execute(cfg);
      std::ofstream file;
      if (!out_path.empty()) {
        file.open(out_path);
        if (!file) throw ConfigError("--out: cannot open '" + out_path + "'");
      }
      std::ostream& os = out_path.empty() ? out : file;
      for (const auto& rec : metrics(outcome)) os << rec.dump() << "\n";
      if (!trace_path.empty()) {
        std::ofstream tf(trace_path);
        if (!tf) throw ConfigError("--trace: cannot open '" + trace_path + "'");
        write_trace(outcome, tf);
      }
      for (const auto& rk : outcome.run.ranks) {
        for (const auto& w : rk.warnings) err << "warning: " << w << "\n";
      }
      return 0;
    }
    if (*ver) {
      FabricFaults faults;
      faults.misroute_reduce_scatter = fault == "misroute-reduce-scatter";
      const auto rep = verify(cfg, faults);
      for (std::size_t s = 0; s < rep.divergence.size(); ++s) {
        out << "step " << s << " max|dparam| " << rep.divergence[s] << " (tolerance " << rep.tolerance << ")\n";
      }
      if (rep.traffic) {
        out << "traffic cross-host per GPU: measured " << rep.traffic->measured << " formula "
            << rep.traffic->predicted << " delta " << rep.traffic->measured - rep.traffic->predicted
            << (rep.traffic_checked ? "" : " (not checked for this config)") << "\n";
      }
      out << "parameter peak bytes: measured " << rep.measured_param_bytes << " formula "
          << rep.predicted_param_bytes << " delta " << rep.measured_param_bytes - rep.predicted_param_bytes
          << (rep.memory_checked ? (rep.memory_exact ? " (exact)" : " (upper bound)") : " (not checked for this config)")
          << "\n";
      for (const auto& f : rep.failures) out << "failure: " << f << "\n";
      out << (rep.pass ? "PASS" : "FAIL") << "\n";
      return rep.pass ? 0 : 1;
    }
    if (*swp) {
      std::vector<Axis> parsed;
      for (const auto& a : axes) parsed.push_back(parse_axis(a));
      const auto rows = sweep(cfg, parsed);
      if (out_path.empty()) {
        write_sweep_csv(parsed, rows, out);
      } else {
        std::ofstream file(out_path);
        if (!file) throw ConfigError("--out: cannot open '" + out_path + "'");
        write_sweep_csv(parsed, rows, file);
      }
      return 0;
    }
    out << dump_plan(cfg);
    return 0;
  } catch (const SimulatedOOM& e) {
    err << "error: " << e.what() << "\n" << e.snapshot() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fsdp::cli

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "fsdp/errors.hpp"

namespace fsdp {

using Group = std::vector<int>;

enum class Strategy { kReplicate, kHybrid, kFull };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kReplicate:
      return "replicate";
    case Strategy::kHybrid:
      return "hybrid";
    case Strategy::kFull:
      return "full";
  }
  return "?";
}

// W ranks split into W/F sharded groups of F consecutive ranks and F
// replicated groups of stride F. Hosts own G consecutive ranks.
struct ShardingPlan {
  int world_size = 1;
  int sharding_factor = 1;
  int host_size = 1;
  std::vector<Group> sharded_groups;     // S_1..S_{W/F}
  std::vector<Group> replicated_groups;  // R_1..R_F

  int shard_index(int rank) const { return rank % sharding_factor; }
  int host_of(int rank) const { return rank / host_size; }
  int num_hosts() const { return world_size / host_size; }

  const Group& sharded_group_of(int rank) const { return sharded_groups.at(rank / sharding_factor); }
  const Group& replicated_group_of(int rank) const { return replicated_groups.at(rank % sharding_factor); }

  Group world_group() const {
    Group g(world_size);
    for (int r = 0; r < world_size; ++r) g[r] = r;
    return g;
  }

  // F = 1 is replication even at W = 1, which keeps the degenerate case
  // free of collectives.
  Strategy strategy() const {
    if (sharding_factor == 1) return Strategy::kReplicate;
    if (sharding_factor == world_size) return Strategy::kFull;
    return Strategy::kHybrid;
  }

  std::string describe() const {
    std::ostringstream os;
    auto dump = [&os](const char* label, const std::vector<Group>& groups) {
      for (std::size_t i = 0; i < groups.size(); ++i) {
        os << label << (i + 1) << "={";
        for (std::size_t k = 0; k < groups[i].size(); ++k) os << (k ? "," : "") << groups[i][k];
        os << "}\n";
      }
    };
    os << "plan W=" << world_size << " F=" << sharding_factor << " G=" << host_size
       << " strategy=" << strategy_name(strategy()) << "\n";
    dump("S", sharded_groups);
    dump("R", replicated_groups);
    return os.str();
  }
};

inline ShardingPlan build_plan(int world_size, int sharding_factor, int host_size) {
  if (world_size < 1) throw PlanError("world size must be >= 1, got " + std::to_string(world_size));
  if (sharding_factor < 1 || sharding_factor > world_size || world_size % sharding_factor != 0) {
    throw PlanError("sharding factor " + std::to_string(sharding_factor) + " must divide world size " +
                    std::to_string(world_size));
  }
  if (host_size < 1 || world_size % host_size != 0) {
    throw PlanError("host size " + std::to_string(host_size) + " must divide world size " +
                    std::to_string(world_size));
  }
  ShardingPlan plan;
  plan.world_size = world_size;
  plan.sharding_factor = sharding_factor;
  plan.host_size = host_size;
  const int num_sharded = world_size / sharding_factor;
  for (int i = 0; i < num_sharded; ++i) {
    Group g;
    for (int k = 0; k < sharding_factor; ++k) g.push_back(i * sharding_factor + k);
    plan.sharded_groups.push_back(std::move(g));
  }
  for (int j = 0; j < sharding_factor; ++j) {
    Group g;
    for (int i = 0; i < num_sharded; ++i) g.push_back(i * sharding_factor + j);
    plan.replicated_groups.push_back(std::move(g));
  }
  return plan;
}

}  // namespace fsdp

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "fsdp/collectives/fabric.hpp"
#include "fsdp/collectives/plan.hpp"

namespace fsdp {

// Sum over all W ranks, delivered as this rank's shard: reduce-scatter
// inside the sharded group, then all-reduce the shard across the replicated
// group. The world sum splits into per-sharded-group partial sums, which is
// what makes the two-stage decomposition exact.
template <Scalar T>
std::vector<T> hybrid_reduce(Fabric& fabric, const ShardingPlan& plan, int rank, std::span<const T> local,
                             ReduceOp op = ReduceOp::kSum) {
  const auto f = static_cast<std::size_t>(plan.sharding_factor);
  std::vector<T> shard;
  if (f > 1) {
    shard.resize(local.size() / f);
    fabric.reduce_scatter<T>(rank, plan.sharded_group_of(rank), local, shard, op);
  } else {
    shard.assign(local.begin(), local.end());
  }
  if (plan.world_size / plan.sharding_factor > 1) {
    fabric.all_reduce<T>(rank, plan.replicated_group_of(rank), std::span<T>(shard), op);
  }
  return shard;
}

}  // namespace fsdp

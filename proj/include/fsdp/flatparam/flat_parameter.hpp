// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fsdp/collectives/fabric.hpp"
#include "fsdp/errors.hpp"
#include "fsdp/flatparam/layout.hpp"
#include "fsdp/numerics/precision.hpp"
#include "fsdp/numerics/tensor.hpp"

namespace fsdp {

enum class FlatParamState { kSharded, kUnsharded };

inline const char* flat_param_state_name(FlatParamState s) {
  return s == FlatParamState::kSharded ? "sharded" : "unsharded";
}

// One rank's view of a unit's flat parameter. The rank always owns its
// full-precision shard (the master copy the optimizer updates); the unsharded
// buffer in compute precision exists only between unshard() and shard().
//
// With a single shard and full-precision compute the unsharded buffer is the
// master shard itself, so unsharding costs neither memory nor communication.
template <Scalar C>
class FlatParameter {
 public:
  FlatParameter(FlatParamLayout layout, std::size_t shard_index)
      : layout_(std::move(layout)), shard_index_(shard_index), master_(layout_.shard_numel(), 0.0) {
    if (shard_index_ >= layout_.shard_count) throw PlanError("shard index out of range");
  }

  const FlatParamLayout& layout() const { return layout_; }
  std::size_t shard_index() const { return shard_index_; }
  FlatParamState state() const { return state_; }
  bool aliases_master() const { return std::is_same_v<C, double> && layout_.shard_count == 1; }

  std::span<double> local_shard() { return master_; }
  std::span<const double> local_shard() const { return master_; }

  std::span<C> unsharded() {
    require_unsharded("unsharded()");
    if constexpr (std::is_same_v<C, double>) {
      if (aliases_master()) return master_;
    }
    return buffer_;
  }

  std::span<const C> unsharded() const { return const_cast<FlatParameter*>(this)->unsharded(); }

  // View of original parameter `i` (position within this unit) inside the
  // unsharded buffer.
  std::span<C> view(std::size_t i) {
    const auto& o = layout_.originals.at(i);
    return unsharded().subspan(o.offset, o.numel);
  }
  std::span<const C> view(std::size_t i) const { return const_cast<FlatParameter*>(this)->view(i); }

  // Zero-filled unsharded buffer with no communication; used while
  // materializing freshly initialized parameters.
  void begin_materialize() {
    if (state_ == FlatParamState::kUnsharded) throw StateError("unit " + std::to_string(layout_.unit) + " is already unsharded");
    if (aliases_master()) {
      std::fill(master_.begin(), master_.end(), 0.0);
    } else {
      buffer_.assign(layout_.padded_numel, C{0});
    }
    state_ = FlatParamState::kUnsharded;
  }

  // All-gathers the shards of the group. The local shard is cast into this
  // rank's own chunk of the output buffer and gathered in place.
  void unshard(Fabric* fabric, int rank, const Group& group, TrafficClass cls = TrafficClass::kData) {
    if (state_ == FlatParamState::kUnsharded) throw StateError("unit " + std::to_string(layout_.unit) + " is already unsharded");
    if (group.size() != layout_.shard_count) throw PlanError("unshard group size does not match shard count");
    if (!aliases_master()) {
      buffer_.assign(layout_.padded_numel, C{0});
      std::span<C> own = std::span<C>(buffer_).subspan(layout_.shard_offset(shard_index_), layout_.shard_numel());
      std::transform(master_.begin(), master_.end(), own.begin(), [](double v) { return static_cast<C>(v); });
      if (layout_.shard_count > 1) {
        if (fabric == nullptr) throw StateError("unshard of a sharded unit needs a fabric");
        fabric->all_gather<C>(rank, group, std::span<const C>(own), std::span<C>(buffer_), cls);
      }
    }
    state_ = FlatParamState::kUnsharded;
  }

  // Drops the unsharded buffer. With write_back the rank's chunk is copied
  // back into its master shard first.
  void shard(bool write_back = false) {
    if (state_ == FlatParamState::kSharded) throw StateError("unit " + std::to_string(layout_.unit) + " is already sharded");
    if (!aliases_master()) {
      if (write_back) {
        const std::size_t off = layout_.shard_offset(shard_index_);
        for (std::size_t i = 0; i < master_.size(); ++i) master_[i] = static_cast<double>(buffer_[off + i]);
      }
      buffer_.clear();
      buffer_.shrink_to_fit();
    }
    state_ = FlatParamState::kSharded;
  }

  // Bytes the unsharded buffer occupies while materialized.
  std::int64_t unsharded_bytes() const {
    return aliases_master() ? 0 : static_cast<std::int64_t>(layout_.padded_numel * sizeof(C));
  }
  std::int64_t shard_bytes() const { return static_cast<std::int64_t>(master_.size() * sizeof(double)); }

 private:
  void require_unsharded(const char* what) const {
    if (state_ != FlatParamState::kUnsharded) {
      throw StateError(std::string(what) + ": unit " + std::to_string(layout_.unit) + " is sharded");
    }
  }

  FlatParamLayout layout_;
  std::size_t shard_index_;
  std::vector<double> master_;
  std::vector<C> buffer_;
  FlatParamState state_ = FlatParamState::kSharded;
};

// Packs per-original gradients into one padded flat gradient. A missing
// gradient (an original that did not take part in the pass) contributes
// zeros and a warning; a wrong shape is an error.
template <Scalar T>
std::vector<T> writeback_grad(const FlatParamLayout& layout, const std::vector<const Tensor<T>*>& grads,
                              std::vector<std::string>* warnings = nullptr) {
  if (grads.size() != layout.originals.size()) {
    throw ShapeError("unit " + std::to_string(layout.unit) + ": expected " + std::to_string(layout.originals.size()) +
                     " gradients, got " + std::to_string(grads.size()));
  }
  std::vector<T> flat(layout.padded_numel, T{0});
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& o = layout.originals[i];
    if (grads[i] == nullptr) {
      if (warnings) warnings->push_back("unit " + std::to_string(layout.unit) + ": no gradient for " + o.name +
                                        ", using zeros");
      continue;
    }
    if (grads[i]->shape() != o.shape) {
      throw ShapeError("gradient for " + o.name + " has shape " + shape_str(grads[i]->shape()) + ", expected " +
                       shape_str(o.shape));
    }
    std::copy(grads[i]->span().begin(), grads[i]->span().end(), flat.begin() + static_cast<std::ptrdiff_t>(o.offset));
  }
  return flat;
}

// How many units may be materialized at once.
enum class InflightPolicy {
  kOne,  // serialized: unshard, compute, reshard
  kTwo,  // one unit computing while the next is prefetched
  kAll,  // nothing is resharded until the pass ends
};

// Predicted peak parameter memory (sharded + unsharded) in bytes. Sharded
// storage is full precision; materialized units are in compute precision.
// With one shard and full precision nothing is ever materialized separately.
inline std::int64_t predict_peak_param_bytes(std::span<const std::size_t> psis, std::size_t shard_count,
                                             const PrecisionPolicy& precision, InflightPolicy inflight) {
  std::int64_t resident = 0;
  std::vector<std::int64_t> materialized;
  for (std::size_t psi : psis) {
    resident += static_cast<std::int64_t>(precision.k_full() * psi / shard_count);
    materialized.push_back(static_cast<std::int64_t>(precision.k_compute() * psi));
  }
  if (shard_count == 1 && !precision.mixed) return resident;
  std::sort(materialized.begin(), materialized.end(), std::greater<>());
  std::size_t take = inflight == InflightPolicy::kOne ? 1 : inflight == InflightPolicy::kTwo ? 2 : materialized.size();
  take = std::min(take, materialized.size());
  std::int64_t extra = 0;
  for (std::size_t i = 0; i < take; ++i) extra += materialized[i];
  return resident + extra;
}

}  // namespace fsdp

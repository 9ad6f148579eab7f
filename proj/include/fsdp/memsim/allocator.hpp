// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fsdp/errors.hpp"

namespace fsdp {

enum class Queue { kCompute = 0, kComm = 1 };

inline const char* queue_name(Queue q) { return q == Queue::kCompute ? "compute" : "comm"; }

using EventId = std::int64_t;
using BlockId = std::int64_t;

inline constexpr EventId kNoEvent = -1;

struct AllocationRecord {
  BlockId block = 0;
  Queue queue = Queue::kCompute;
  std::int64_t bytes = 0;
  bool reused = false;
};

// Caching allocator with exact-size blocks and one free list per queue.
// A cached block is handed out again only to its owning queue, and only once
// the last device event that used it has completed at the moment the host
// asks. Capacity bounds reserved bytes (live + cached); 0 means unbounded.
class CachingAllocator {
 public:
  explicit CachingAllocator(std::int64_t capacity = 0) : capacity_(capacity) {}

  std::int64_t capacity() const { return capacity_; }
  std::int64_t reserved() const { return reserved_; }
  std::int64_t peak_reserved() const { return peak_reserved_; }
  int retries() const { return retries_; }
  const std::vector<AllocationRecord>& log() const { return log_; }

  bool fits(std::int64_t bytes) const { return capacity_ == 0 || reserved_ + bytes <= capacity_; }

  // Reuses a cached block when allowed, else reserves a new one if it fits.
  std::optional<BlockId> try_allocate(std::int64_t bytes, Queue queue,
                                      const std::function<bool(EventId)>& completed) {
    for (auto& b : blocks_) {
      if (b.live || b.released || b.bytes != bytes || b.queue != queue) continue;
      if (b.last_use != kNoEvent && !completed(b.last_use)) continue;
      b.live = true;
      b.last_use = kNoEvent;
      log_.push_back({b.id, queue, bytes, true});
      return b.id;
    }
    if (!fits(bytes)) return std::nullopt;
    Block b;
    b.id = static_cast<BlockId>(blocks_.size());
    b.bytes = bytes;
    b.queue = queue;
    b.live = true;
    blocks_.push_back(b);
    reserved_ += bytes;
    peak_reserved_ = std::max(peak_reserved_, reserved_);
    log_.push_back({b.id, queue, bytes, false});
    return b.id;
  }

  // Host-side free: the block goes to its queue's cache, pending `last_use`.
  void free(BlockId id, EventId last_use) {
    Block& b = blocks_.at(static_cast<std::size_t>(id));
    if (!b.live) throw SimulationError("double free of block " + std::to_string(id));
    b.live = false;
    b.last_use = last_use;
  }

  void note_retry() { ++retries_; }

  // Returns every cached block to the device. Callers must have drained the
  // queues first.
  void release_cached() {
    for (auto& b : blocks_) {
      if (!b.live && !b.released) {
        b.released = true;
        reserved_ -= b.bytes;
      }
    }
  }

  std::int64_t block_bytes(BlockId id) const { return blocks_.at(static_cast<std::size_t>(id)).bytes; }
  Queue block_queue(BlockId id) const { return blocks_.at(static_cast<std::size_t>(id)).queue; }

 private:
  struct Block {
    BlockId id = 0;
    std::int64_t bytes = 0;
    Queue queue = Queue::kCompute;
    bool live = false;
    bool released = false;
    EventId last_use = kNoEvent;
  };

  std::int64_t capacity_;
  std::int64_t reserved_ = 0;
  std::int64_t peak_reserved_ = 0;
  int retries_ = 0;
  std::vector<Block> blocks_;
  std::vector<AllocationRecord> log_;
};

}  // namespace fsdp

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>

#include "fsdp/numerics/tensor.hpp"

namespace fsdp {

// Which precision each stage runs in. Master parameters and optimizer state
// are always full precision; with `mixed` the unsharded parameters, the
// forward/backward computation and (optionally) the gradient reduction run in
// low precision.
struct PrecisionPolicy {
  bool mixed = false;
  DType reduce_dtype = DType::kLow;  // only consulted when mixed

  std::size_t k_full() const { return bytes_per_element(DType::kFull); }
  std::size_t k_low() const { return bytes_per_element(DType::kLow); }
  DType compute_dtype() const { return mixed ? DType::kLow : DType::kFull; }
  std::size_t k_compute() const { return bytes_per_element(compute_dtype()); }
  DType reduction_dtype() const { return mixed ? reduce_dtype : DType::kFull; }
};

}  // namespace fsdp

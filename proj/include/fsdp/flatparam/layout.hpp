// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fsdp/errors.hpp"
#include "fsdp/numerics/model.hpp"

namespace fsdp {

// Half-open range of layer indices forming one annotated block.
struct LayerRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool contains(std::size_t layer) const { return layer >= begin && layer < end; }
  std::size_t size() const { return end - begin; }
};

// Result of the annotation rule: every parameter of an annotated block goes
// to that block's unit unless an inner block already took it; whatever is
// left belongs to the root (outermost) unit.
struct UnitAssignment {
  int num_units = 0;
  bool has_root = false;                        // unit 0 is the root when true
  std::vector<int> param_unit;                  // parameter index -> unit
  std::vector<int> layer_unit;                  // layer -> unit, -1 if none
  std::vector<std::vector<std::size_t>> unit_params;  // declaration order

  bool is_root(int unit) const { return has_root && unit == 0; }
};

inline UnitAssignment assign_units(const ModelSpec& model, const std::vector<LayerRange>& annotated) {
  const std::size_t num_layers = model.num_layers();
  for (const auto& r : annotated) {
    if (r.begin >= r.end || r.end > num_layers) {
      throw PlanError("annotated block [" + std::to_string(r.begin) + "," + std::to_string(r.end) + ") is invalid");
    }
  }
  for (std::size_t a = 0; a < annotated.size(); ++a) {
    for (std::size_t b = a + 1; b < annotated.size(); ++b) {
      const auto& x = annotated[a];
      const auto& y = annotated[b];
      const bool disjoint = x.end <= y.begin || y.end <= x.begin;
      const bool nested = (x.begin <= y.begin && y.end <= x.end) || (y.begin <= x.begin && x.end <= y.end);
      if (!disjoint && !nested) throw PlanError("annotated blocks overlap without nesting");
      if (x.begin == y.begin && x.end == y.end) throw PlanError("annotated block listed twice");
    }
  }

  // Inner blocks first, so that nesting hands residual parameters outward.
  std::vector<std::size_t> order(annotated.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return annotated[a].size() < annotated[b].size(); });

  const auto& params = model.params();
  std::vector<int> owner_block(params.size(), -1);
  for (std::size_t bi : order) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (owner_block[p] == -1 && annotated[bi].contains(params[p].layer)) owner_block[p] = static_cast<int>(bi);
    }
  }

  // Units: root (if it owns anything) then blocks by first declared parameter.
  UnitAssignment out;
  out.param_unit.assign(params.size(), -1);
  const bool residual = std::any_of(owner_block.begin(), owner_block.end(), [](int b) { return b == -1; });
  std::vector<int> block_unit(annotated.size(), -1);
  int next = 0;
  if (residual) {
    out.has_root = true;
    next = 1;
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    const int b = owner_block[p];
    if (b >= 0 && block_unit[b] == -1) block_unit[b] = next++;
  }
  out.num_units = next;
  out.unit_params.resize(next);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const int unit = owner_block[p] == -1 ? 0 : block_unit[owner_block[p]];
    out.param_unit[p] = unit;
    out.unit_params[unit].push_back(p);
  }

  // A layer executes as part of its innermost annotated block that owns a
  // unit, otherwise as part of the root.
  out.layer_unit.assign(num_layers, out.has_root ? 0 : -1);
  for (std::size_t l = 0; l < num_layers; ++l) {
    std::optional<std::size_t> best;
    for (std::size_t b = 0; b < annotated.size(); ++b) {
      if (!annotated[b].contains(l) || block_unit[b] == -1) continue;
      if (!best || annotated[b].size() < annotated[*best].size()) best = b;
    }
    if (best) out.layer_unit[l] = block_unit[*best];
  }
  // Parameter-bearing layers must run in the unit that owns their bias.
  for (std::size_t l = 0; l < num_layers; ++l) {
    const auto& lp = model.layer_params(l);
    if (lp.bias) out.layer_unit[l] = out.param_unit[*lp.bias];
  }

  // A parameter used by layers of two different units cannot be sharded
  // with reshard-after-forward semantics.
  for (std::size_t l = 0; l < num_layers; ++l) {
    const auto& lp = model.layer_params(l);
    if (!lp.weight) continue;
    const int owner = out.param_unit[*lp.weight];
    const int user = out.layer_unit[l];
    if (owner != user) {
      throw SharedParameterError("parameter '" + params[*lp.weight].name + "' is owned by unit " +
                                 std::to_string(owner) + " but also used by layer " + std::to_string(l) +
                                 " in unit " + std::to_string(user) +
                                 "; shared parameters across units are not supported (keep both users in one unit, "
                                 "or use the no-reshard-after-forward strategy, SHARD_GRAD_OP-equivalent)");
    }
  }
  return out;
}

// Every layer in one unit (plus a root holding nothing) is the trivial
// wrapping used when a caller does not annotate anything.
inline UnitAssignment assign_single_unit(const ModelSpec& model) { return assign_units(model, {}); }

struct OriginalParam {
  std::string name;
  Shape shape;
  std::size_t numel = 0;
  std::size_t offset = 0;  // into the unsharded flat buffer
  std::size_t param_index = 0;
};

// Flatten-concat-pad layout of one unit: originals back to back in
// declaration order, then zero padding up to a multiple of the shard count.
struct FlatParamLayout {
  int unit = 0;
  std::vector<OriginalParam> originals;
  std::size_t padded_numel = 0;  // psi
  std::size_t padding = 0;
  std::size_t shard_count = 1;  // F

  std::size_t unpadded_numel() const { return padded_numel - padding; }
  std::size_t shard_numel() const { return padded_numel / shard_count; }
  std::size_t shard_offset(std::size_t shard) const { return shard * shard_numel(); }

  std::string dump_line() const {
    std::ostringstream os;
    os << "unit=" << unit << " ψ=" << padded_numel << " padding=" << padding << " originals=[";
    for (std::size_t i = 0; i < originals.size(); ++i) {
      os << (i ? "," : "") << originals[i].name << ":" << shape_str(originals[i].shape);
    }
    os << "]";
    return os.str();
  }
};

inline FlatParamLayout make_layout(int unit, std::vector<OriginalParam> originals, std::size_t shard_count) {
  if (shard_count == 0) throw PlanError("shard count must be positive");
  FlatParamLayout layout;
  layout.unit = unit;
  layout.shard_count = shard_count;
  std::size_t offset = 0;
  for (auto& o : originals) {
    o.numel = numel(o.shape);
    o.offset = offset;
    offset += o.numel;
  }
  layout.originals = std::move(originals);
  layout.padded_numel = (offset + shard_count - 1) / shard_count * shard_count;
  layout.padding = layout.padded_numel - offset;
  return layout;
}

inline std::vector<FlatParamLayout> build_flat_params(const ModelSpec& model, const UnitAssignment& assignment,
                                                      std::size_t shard_count) {
  std::vector<FlatParamLayout> out;
  for (int u = 0; u < assignment.num_units; ++u) {
    std::vector<OriginalParam> originals;
    for (std::size_t p : assignment.unit_params[u]) {
      const auto& info = model.params()[p];
      originals.push_back({info.name, info.shape, 0, 0, p});
    }
    out.push_back(make_layout(u, std::move(originals), shard_count));
  }
  return out;
}

inline std::string dump_layouts(const std::vector<FlatParamLayout>& layouts) {
  std::string s;
  for (const auto& l : layouts) s += l.dump_line() + "\n";
  return s;
}

}  // namespace fsdp

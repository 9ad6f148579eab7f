// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsdp/errors.hpp"
#include "fsdp/flatparam/flat_parameter.hpp"
#include "fsdp/flatparam/layout.hpp"
#include "fsdp/memsim/timeline.hpp"
#include "fsdp/numerics/model.hpp"

namespace fsdp {

// ------------------------------------------------------------ random streams

// A generator per (seed, parameter name), so values do not depend on the
// order in which parameters are initialized.
inline std::mt19937_64 named_stream(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 1099511628211ULL;
  };
  for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(seed >> (8 * i)));
  for (char c : name) mix(static_cast<unsigned char>(c));
  return std::mt19937_64(h);
}

// Uniform in [0, 1) from the top 53 bits; spelled out so results do not
// depend on the standard library's distribution implementations.
inline double unit_uniform(std::mt19937_64& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

inline double standard_normal(std::mt19937_64& g) {
  const double u1 = 1.0 - unit_uniform(g);  // (0, 1]
  const double u2 = unit_uniform(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// ------------------------------------------------------------------ programs

enum class InitOpKind { kFill, kUniform, kNormal, kRandint, kScale, kAdd };

inline const char* init_op_name(InitOpKind k) {
  switch (k) {
    case InitOpKind::kFill:
      return "fill";
    case InitOpKind::kUniform:
      return "uniform";
    case InitOpKind::kNormal:
      return "normal";
    case InitOpKind::kRandint:
      return "randint";
    case InitOpKind::kScale:
      return "scale";
    case InitOpKind::kAdd:
      return "add";
  }
  return "?";
}

struct InitOp {
  InitOpKind kind = InitOpKind::kFill;
  double a = 0;  // fill value / lo / mean / factor / addend
  double b = 0;  // hi / stddev
};

struct InitProgram {
  std::string param;
  Shape shape;
  std::vector<InitOp> ops;
};

// Runs a program over a buffer in row-major element order. Every random op
// draws from the parameter's own stream, continuing where the previous op
// stopped.
inline void apply_ops(std::span<const InitOp> ops, std::span<double> out, std::mt19937_64& stream) {
  for (const auto& op : ops) {
    for (auto& v : out) {
      switch (op.kind) {
        case InitOpKind::kFill:
          v = op.a;
          break;
        case InitOpKind::kUniform:
          v = op.a + (op.b - op.a) * unit_uniform(stream);
          break;
        case InitOpKind::kNormal:
          v = op.a + op.b * standard_normal(stream);
          break;
        case InitOpKind::kRandint:
          v = op.a + std::floor(unit_uniform(stream) * (op.b - op.a + 1));
          break;
        case InitOpKind::kScale:
          v *= op.a;
          break;
        case InitOpKind::kAdd:
          v += op.a;
          break;
      }
    }
  }
}

inline void replay(const InitProgram& program, std::span<double> out, std::uint64_t seed) {
  if (out.size() != numel(program.shape)) {
    throw ShapeError("replay of " + program.param + ": program shape " + shape_str(program.shape) + " but buffer has " +
                     std::to_string(out.size()) + " elements");
  }
  auto stream = named_stream(seed, program.param);
  apply_ops(program.ops, out, stream);
}

// What a model's initializer may do. The recording implementation captures
// ops without storage; the eager one runs them on real tensors.
class InitBuilder {
 public:
  virtual ~InitBuilder() = default;
  virtual void fill(const std::string& param, double value) = 0;
  virtual void uniform(const std::string& param, double lo, double hi) = 0;
  virtual void normal(const std::string& param, double mean, double stddev) = 0;
  virtual void randint(const std::string& param, double lo, double hi) = 0;
  virtual void scale(const std::string& param, double factor) = 0;
  virtual void add(const std::string& param, double addend) = 0;
  // Initializes `param` from another parameter's current values.
  virtual void copy_from(const std::string& param, const std::string& source) = 0;
};

using ModelInit = std::function<void(InitBuilder&)>;

// The default initializer: uniform weights in +-1/sqrt(fan_in), zero bias.
inline ModelInit default_init(const ModelSpec& model) {
  return [&model](InitBuilder& b) {
    for (const auto& p : model.params()) {
      if (p.role == ParamRole::kWeight) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.shape.at(1)));
        b.uniform(p.name, -bound, bound);
      } else {
        b.fill(p.name, 0.0);
      }
    }
  };
}

// Small integers everywhere; keeps training arithmetic exact.
inline ModelInit integer_init(const ModelSpec& model, double lo = -1, double hi = 1) {
  return [&model, lo, hi](InitBuilder& b) {
    for (const auto& p : model.params()) b.randint(p.name, lo, hi);
  };
}

namespace detail {

inline std::size_t require_param(const ModelSpec& model, const std::string& name) {
  auto idx = model.param_index(name);
  if (!idx) throw ConfigError("initializer refers to unknown parameter '" + name + "'");
  return *idx;
}

class Recorder final : public InitBuilder {
 public:
  explicit Recorder(const ModelSpec& model) : model_(model) {
    for (const auto& p : model.params()) programs_.push_back({p.name, p.shape, {}});
  }

  void fill(const std::string& p, double v) override { push(p, {InitOpKind::kFill, v, 0}); }
  void uniform(const std::string& p, double lo, double hi) override { push(p, {InitOpKind::kUniform, lo, hi}); }
  void normal(const std::string& p, double m, double s) override { push(p, {InitOpKind::kNormal, m, s}); }
  void randint(const std::string& p, double lo, double hi) override { push(p, {InitOpKind::kRandint, lo, hi}); }
  void scale(const std::string& p, double f) override { push(p, {InitOpKind::kScale, f, 0}); }
  void add(const std::string& p, double a) override { push(p, {InitOpKind::kAdd, a, 0}); }

  void copy_from(const std::string& param, const std::string& source) override {
    throw UnsupportedInitOp("unsupported op 'copy_from' while recording: " + param + " reads " + source +
                            ", which may belong to a different unit and is not materialized during replay");
  }

  std::vector<InitProgram> take() { return std::move(programs_); }

 private:
  void push(const std::string& p, InitOp op) { programs_[require_param(model_, p)].ops.push_back(op); }

  const ModelSpec& model_;
  std::vector<InitProgram> programs_;
};

class Eager final : public InitBuilder {
 public:
  Eager(const ModelSpec& model, std::uint64_t seed) : model_(model), seed_(seed) {
    for (const auto& p : model.params()) params_.emplace_back(p.shape);
  }

  void fill(const std::string& p, double v) override { run(p, {InitOpKind::kFill, v, 0}); }
  void uniform(const std::string& p, double lo, double hi) override { run(p, {InitOpKind::kUniform, lo, hi}); }
  void normal(const std::string& p, double m, double s) override { run(p, {InitOpKind::kNormal, m, s}); }
  void randint(const std::string& p, double lo, double hi) override { run(p, {InitOpKind::kRandint, lo, hi}); }
  void scale(const std::string& p, double f) override { run(p, {InitOpKind::kScale, f, 0}); }
  void add(const std::string& p, double a) override { run(p, {InitOpKind::kAdd, a, 0}); }

  void copy_from(const std::string& param, const std::string& source) override {
    auto& dst = params_[require_param(model_, param)];
    const auto& src = params_[require_param(model_, source)];
    if (dst.shape() != src.shape()) throw ShapeError("copy_from " + source + " into " + param + ": shape mismatch");
    dst.storage() = src.storage();
  }

  std::vector<Tensor<double>> take() { return std::move(params_); }

 private:
  void run(const std::string& p, InitOp op) {
    const std::size_t idx = require_param(model_, p);
    auto it = streams_.find(p);
    if (it == streams_.end()) it = streams_.emplace(p, named_stream(seed_, p)).first;
    apply_ops(std::span<const InitOp>(&op, 1), params_[idx].span(), it->second);
  }

  const ModelSpec& model_;
  std::uint64_t seed_;
  std::vector<Tensor<double>> params_;
  std::map<std::string, std::mt19937_64> streams_;
};

}  // namespace detail

// Model skeleton plus the captured programs; holds no parameter storage.
struct RecordedModel {
  const ModelSpec* model = nullptr;
  std::vector<InitProgram> programs;  // one per parameter, declaration order
};

inline RecordedModel record(const ModelSpec& model, const ModelInit& init) {
  detail::Recorder rec(model);
  init(rec);
  return {&model, rec.take()};
}

// Runs the initializer on real full-size tensors.
inline std::vector<Tensor<double>> eager_init(const ModelSpec& model, const ModelInit& init, std::uint64_t seed) {
  detail::Eager eager(model, seed);
  init(eager);
  return eager.take();
}

struct InitResult {
  std::vector<std::vector<double>> shards;  // this rank's shard per unit
  MemoryStats device;
  std::int64_t host_peak_bytes = 0;
};

namespace detail {

inline std::vector<BlockId> allocate_shards(Timeline& tl, const std::vector<FlatParamLayout>& layouts) {
  std::vector<BlockId> blocks;
  for (const auto& l : layouts) {
    blocks.push_back(tl.allocate(MemCategory::kShardedParams,
                                 static_cast<std::int64_t>(l.shard_numel() * sizeof(double)), Queue::kCompute, l.unit));
  }
  return blocks;
}

// Materializes each unit in turn, fills it through `fill_unit`, and keeps
// only this rank's chunk.
template <typename FillUnit>
std::vector<std::vector<double>> unit_by_unit(Timeline& tl, const std::vector<FlatParamLayout>& layouts,
                                              std::size_t shard_index, FillUnit&& fill_unit) {
  std::vector<std::vector<double>> shards;
  for (const auto& l : layouts) {
    FlatParameter<double> fp(l, shard_index);
    std::optional<BlockId> block;
    if (fp.unsharded_bytes() > 0) {
      block = tl.allocate(MemCategory::kUnshardedParams, fp.unsharded_bytes(), Queue::kCompute, l.unit);
    }
    fp.begin_materialize();
    fill_unit(l, fp);
    fp.shard(true);
    if (block) tl.free(*block, kNoEvent, l.unit);
    shards.emplace_back(fp.local_shard().begin(), fp.local_shard().end());
  }
  return shards;
}

}  // namespace detail

// Deferred path: replay the recorded programs one unit at a time.
inline InitResult materialize_by_unit(const RecordedModel& rec, const std::vector<FlatParamLayout>& layouts,
                                      std::size_t shard_index, std::uint64_t seed) {
  Timeline tl;
  tl.set_phase(Phase::kInit);
  detail::allocate_shards(tl, layouts);
  InitResult r;
  r.shards = detail::unit_by_unit(tl, layouts, shard_index, [&](const FlatParamLayout& l, FlatParameter<double>& fp) {
    for (std::size_t i = 0; i < l.originals.size(); ++i) {
      const auto& prog = rec.programs.at(l.originals[i].param_index);
      if (prog.shape != l.originals[i].shape) {
        throw ShapeError("program for " + prog.param + " has shape " + shape_str(prog.shape) + ", unit expects " +
                         shape_str(l.originals[i].shape));
      }
      replay(prog, fp.view(i), seed);
    }
  });
  r.device = tl.memory_stats();
  return r;
}

// Unsharded-on-device path: the whole model is built on the device, then
// every unit is sharded and the full copy dropped.
inline InitResult init_device(const ModelSpec& model, const ModelInit& init, const std::vector<FlatParamLayout>& layouts,
                              std::size_t shard_index, std::uint64_t seed) {
  Timeline tl;
  tl.set_phase(Phase::kInit);
  std::int64_t total = 0;
  for (const auto& l : layouts) total += static_cast<std::int64_t>(l.padded_numel * sizeof(double));
  const BlockId full = tl.allocate(MemCategory::kUnshardedParams, total, Queue::kCompute);
  const auto params = eager_init(model, init, seed);
  detail::allocate_shards(tl, layouts);
  InitResult r;
  for (const auto& l : layouts) {
    std::vector<double> flat(l.padded_numel, 0.0);
    for (const auto& o : l.originals) {
      const auto& p = params[o.param_index];
      std::copy(p.storage().begin(), p.storage().end(), flat.begin() + static_cast<std::ptrdiff_t>(o.offset));
    }
    auto begin = flat.begin() + static_cast<std::ptrdiff_t>(l.shard_offset(shard_index));
    r.shards.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(l.shard_numel()));
  }
  tl.free(full, kNoEvent);
  r.device = tl.memory_stats();
  return r;
}

// Streamed path: the model was built eagerly in host memory; units move to
// the device one at a time and are sharded there.
inline InitResult init_streamed_from_host(const std::vector<Tensor<double>>& host_params,
                                          const std::vector<FlatParamLayout>& layouts, std::size_t shard_index) {
  MemoryLedger host;
  std::int64_t total = 0;
  for (const auto& p : host_params) total += static_cast<std::int64_t>(p.numel() * sizeof(double));
  host.allocate(MemCategory::kUnshardedParams, total, 0);

  Timeline tl;
  tl.set_phase(Phase::kInit);
  detail::allocate_shards(tl, layouts);
  InitResult r;
  r.shards = detail::unit_by_unit(tl, layouts, shard_index, [&](const FlatParamLayout& l, FlatParameter<double>& fp) {
    for (std::size_t i = 0; i < l.originals.size(); ++i) {
      const auto& p = host_params.at(l.originals[i].param_index);
      if (p.shape() != l.originals[i].shape) throw ShapeError("host parameter " + l.originals[i].name + " has wrong shape");
      std::copy(p.storage().begin(), p.storage().end(), fp.view(i).begin());
    }
  });
  host.release(MemCategory::kUnshardedParams, total, tl.host_time());
  r.device = tl.memory_stats();
  r.host_peak_bytes = host.peak_total();
  return r;
}

}  // namespace fsdp

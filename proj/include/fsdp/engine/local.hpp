// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "fsdp/engine/config.hpp"
#include "fsdp/engine/rank_engine.hpp"
#include "fsdp/engine/scaler.hpp"
#include "fsdp/errors.hpp"
#include "fsdp/numerics/model.hpp"
#include "fsdp/numerics/optimizer.hpp"

namespace fsdp {

// Plain single-process training: the reference every sharded run is
// compared against. All micro-batches of a step are trained as one batch.
template <Scalar T>
class LocalTrainer {
 public:
  LocalTrainer(const ModelSpec& model, std::vector<Tensor<double>> params, OptimizerConfig opt, ScalerConfig scaler = {})
      : model_(model), params_(std::move(params)), opt_(opt, lengths(params_)), scaler_(scaler) {
    if (params_.size() != model_.params().size()) throw ShapeError("local trainer: parameter count mismatch");
  }

  const std::vector<Tensor<double>>& params() const { return params_; }
  const GradScaler& scaler() const { return scaler_; }

  // Returns the loss; `stepped` reports whether the scaler let the update through.
  double step(std::span<const MicroBatch> micro, bool* stepped = nullptr) {
    if (micro.empty()) throw ConfigError("a step needs at least one micro-batch");
    std::vector<Tensor<double>> inputs, targets;
    for (const auto& mb : micro) {
      if (mb.sequence != micro.front().sequence) throw ConfigError("local trainer needs one layer sequence per step");
      inputs.push_back(mb.input);
      targets.push_back(mb.target);
    }
    const Tensor<T> x = concat_rows<double>(inputs).template cast<T>();
    const Tensor<T> t = concat_rows<double>(targets).template cast<T>();

    std::vector<Tensor<T>> low;
    ParamRefs<T> refs;
    for (const auto& p : params_) low.push_back(p.template cast<T>());
    for (const auto& p : low) refs.push_back(p.span());

    const double scale = scaler_.scale();
    auto cache = forward<T>(model_, refs, x, micro.front().sequence);
    auto loss = mse_loss<T>(cache.output, t, static_cast<T>(scale));
    auto grads = backward<T>(model_, refs, cache, loss.grad);

    std::vector<std::vector<double>> g;
    bool found_inf = false;
    for (const auto& gt : grads) {
      std::vector<double> v(gt.storage().begin(), gt.storage().end());
      if (scaler_.enabled()) {
        for (auto& e : v) e /= scale;
        found_inf = found_inf || GradScaler::has_nonfinite(v);
      }
      g.push_back(std::move(v));
    }
    const bool ok = scaler_.update(found_inf);
    if (ok) {
      for (std::size_t i = 0; i < params_.size(); ++i) opt_.step(i, params_[i].span(), g[i]);
    }
    if (stepped) *stepped = ok;
    return static_cast<double>(loss.loss);
  }

 private:
  static std::vector<std::size_t> lengths(const std::vector<Tensor<double>>& ps) {
    std::vector<std::size_t> out;
    for (const auto& p : ps) out.push_back(p.numel());
    return out;
  }

  const ModelSpec& model_;
  std::vector<Tensor<double>> params_;
  Optimizer opt_;
  GradScaler scaler_;
};

}  // namespace fsdp

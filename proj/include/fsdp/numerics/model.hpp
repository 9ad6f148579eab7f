// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fsdp/errors.hpp"
#include "fsdp/numerics/tensor.hpp"

namespace fsdp {

enum class Activation { kReLU, kTanh };

inline const char* activation_name(Activation a) { return a == Activation::kReLU ? "relu" : "tanh"; }

// y = x W^T + b with W stored [out, in]. A layer may reuse another layer's
// weight (`tie_weight_to`), which is how shared parameters are declared.
struct LinearSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  std::optional<std::size_t> tie_weight_to = std::nullopt;
};

struct ActivationSpec {
  Activation kind = Activation::kReLU;
};

using LayerSpec = std::variant<LinearSpec, ActivationSpec>;

enum class ParamRole { kWeight, kBias };

struct ParamInfo {
  std::string name;  // fully-qualified, e.g. "layers.2.weight"
  Shape shape;
  std::size_t layer = 0;
  ParamRole role = ParamRole::kWeight;
};

struct LayerParams {
  std::optional<std::size_t> weight;
  std::optional<std::size_t> bias;
};

// Static description of a layered feed-forward model. Parameters are listed
// in declaration order; storage lives elsewhere (local tensors or flat
// parameter views), which is why every kernel takes parameter spans.
class ModelSpec {
 public:
  ModelSpec() = default;

  explicit ModelSpec(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ShapeError("model has no layers");
    layer_params_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto* lin = std::get_if<LinearSpec>(&layers_[i]);
      if (!lin) continue;
      if (lin->in == 0 || lin->out == 0) {
        throw ShapeError("layer " + std::to_string(i) + ": linear extents must be positive");
      }
      if (lin->tie_weight_to) {
        const std::size_t owner = *lin->tie_weight_to;
        const auto* src = owner < i ? std::get_if<LinearSpec>(&layers_[owner]) : nullptr;
        if (!src || src->tie_weight_to) {
          throw ShapeError("layer " + std::to_string(i) + ": weight tie must name an earlier untied linear layer");
        }
        if (src->in != lin->in || src->out != lin->out) {
          throw ShapeError("layer " + std::to_string(i) + ": tied weight shape mismatch");
        }
        layer_params_[i].weight = layer_params_[owner].weight;
      } else {
        layer_params_[i].weight = params_.size();
        params_.push_back({"layers." + std::to_string(i) + ".weight", {lin->out, lin->in}, i, ParamRole::kWeight});
      }
      layer_params_[i].bias = params_.size();
      params_.push_back({"layers." + std::to_string(i) + ".bias", {lin->out}, i, ParamRole::kBias});
    }
    validate_chain(default_sequence());
  }

  // Linear(w0->w1), act, Linear(w1->w2), act, ..., Linear (no trailing act).
  static ModelSpec mlp(const std::vector<std::size_t>& widths, Activation act = Activation::kReLU) {
    if (widths.size() < 2) throw ShapeError("mlp needs at least two widths");
    std::vector<LayerSpec> layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers.emplace_back(LinearSpec{widths[i], widths[i + 1], std::nullopt});
      if (i + 2 < widths.size()) layers.emplace_back(ActivationSpec{act});
    }
    return ModelSpec(std::move(layers));
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t num_layers() const { return layers_.size(); }
  const std::vector<ParamInfo>& params() const { return params_; }
  const LayerParams& layer_params(std::size_t layer) const { return layer_params_.at(layer); }

  std::optional<std::size_t> param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += fsdp::numel(p.shape);
    return n;
  }

  std::vector<std::size_t> default_sequence() const {
    std::vector<std::size_t> seq(layers_.size());
    for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = i;
    return seq;
  }

  // Fan-in of the first linear layer in `sequence`.
  std::size_t input_dim(std::span<const std::size_t> sequence) const {
    for (std::size_t l : sequence) {
      if (const auto* lin = std::get_if<LinearSpec>(&layers_.at(l))) return lin->in;
    }
    throw ShapeError("sequence contains no linear layer");
  }
  std::size_t input_dim() const { return input_dim(default_sequence()); }

  std::size_t output_dim(std::span<const std::size_t> sequence) const {
    for (auto it = sequence.rbegin(); it != sequence.rend(); ++it) {
      if (const auto* lin = std::get_if<LinearSpec>(&layers_.at(*it))) return lin->out;
    }
    throw ShapeError("sequence contains no linear layer");
  }
  std::size_t output_dim() const { return output_dim(default_sequence()); }

  void validate_chain(std::span<const std::size_t> sequence) const {
    std::optional<std::size_t> width;
    for (std::size_t l : sequence) {
      if (l >= layers_.size()) throw ShapeError("sequence names unknown layer " + std::to_string(l));
      const auto* lin = std::get_if<LinearSpec>(&layers_[l]);
      if (!lin) continue;
      if (width && *width != lin->in) {
        throw ShapeError("layer " + std::to_string(l) + ": expects fan-in " + std::to_string(lin->in) + ", got " +
                         std::to_string(*width));
      }
      width = lin->out;
    }
  }

 private:
  std::vector<LayerSpec> layers_;
  std::vector<ParamInfo> params_;
  std::vector<LayerParams> layer_params_;
};

template <Scalar T>
using ParamRefs = std::vector<std::span<const T>>;

template <Scalar T>
using GradRefs = std::vector<std::span<T>>;

// ---------------------------------------------------------------------------
// Layer kernels. Batch reductions always run in ascending row order so that
// results are reproducible bit for bit.

template <Scalar T>
Tensor<T> linear_forward(const LinearSpec& spec, std::span<const T> w, std::span<const T> b, const Tensor<T>& x,
                         std::size_t layer) {
  if (x.shape().size() != 2 || x.cols() != spec.in) {
    throw ShapeError("layer " + std::to_string(layer) + ": input " + shape_str(x.shape()) + " does not match fan-in " +
                     std::to_string(spec.in));
  }
  if (w.size() != spec.in * spec.out || b.size() != spec.out) {
    throw ShapeError("layer " + std::to_string(layer) + ": parameter storage has wrong length");
  }
  Tensor<T> y({x.rows(), spec.out});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t o = 0; o < spec.out; ++o) {
      T acc{0};
      for (std::size_t i = 0; i < spec.in; ++i) acc += w[o * spec.in + i] * x.at(r, i);
      y.at(r, o) = acc + b[o];
    }
  }
  return y;
}

// Adds dW and db into `dw` / `db`; returns dX.
template <Scalar T>
Tensor<T> linear_backward(const LinearSpec& spec, std::span<const T> w, const Tensor<T>& x, const Tensor<T>& dy,
                          std::span<T> dw, std::span<T> db) {
  const std::size_t rows = x.rows();
  for (std::size_t o = 0; o < spec.out; ++o) {
    for (std::size_t i = 0; i < spec.in; ++i) {
      T acc{0};
      for (std::size_t r = 0; r < rows; ++r) acc += dy.at(r, o) * x.at(r, i);
      dw[o * spec.in + i] += acc;
    }
    T acc{0};
    for (std::size_t r = 0; r < rows; ++r) acc += dy.at(r, o);
    db[o] += acc;
  }
  Tensor<T> dx({rows, spec.in});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < spec.in; ++i) {
      T acc{0};
      for (std::size_t o = 0; o < spec.out; ++o) acc += dy.at(r, o) * w[o * spec.in + i];
      dx.at(r, i) = acc;
    }
  }
  return dx;
}

template <Scalar T>
Tensor<T> activation_forward(Activation kind, const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.storage()) v = kind == Activation::kReLU ? (v > T{0} ? v : T{0}) : std::tanh(v);
  return y;
}

template <Scalar T>
Tensor<T> activation_backward(Activation kind, const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.numel(); ++i) {
    if (kind == Activation::kReLU) {
      dx[i] = x[i] > T{0} ? dy[i] : T{0};
    } else {
      const T t = std::tanh(x[i]);
      dx[i] = dy[i] * (T{1} - t * t);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Whole-model passes.

template <Scalar T>
struct ForwardCache {
  std::vector<std::size_t> sequence;
  std::vector<Tensor<T>> inputs;  // input of each executed layer
  Tensor<T> output;

  bool valid() const { return !sequence.empty() && inputs.size() == sequence.size(); }
};

template <Scalar T>
Tensor<T> layer_forward(const ModelSpec& model, std::size_t layer, const ParamRefs<T>& params, const Tensor<T>& x) {
  const auto& spec = model.layers().at(layer);
  if (const auto* lin = std::get_if<LinearSpec>(&spec)) {
    const auto& lp = model.layer_params(layer);
    return linear_forward<T>(*lin, params.at(*lp.weight), params.at(*lp.bias), x, layer);
  }
  return activation_forward<T>(std::get<ActivationSpec>(spec).kind, x);
}

// Accumulates parameter gradients of `layer` into `grads`; returns dX.
template <Scalar T>
Tensor<T> layer_backward(const ModelSpec& model, std::size_t layer, const ParamRefs<T>& params, const Tensor<T>& x,
                         const Tensor<T>& dy, const GradRefs<T>& grads) {
  const auto& spec = model.layers().at(layer);
  if (const auto* lin = std::get_if<LinearSpec>(&spec)) {
    const auto& lp = model.layer_params(layer);
    return linear_backward<T>(*lin, params.at(*lp.weight), x, dy, grads.at(*lp.weight), grads.at(*lp.bias));
  }
  return activation_backward<T>(std::get<ActivationSpec>(spec).kind, x, dy);
}

template <Scalar T>
ForwardCache<T> forward(const ModelSpec& model, const ParamRefs<T>& params, const Tensor<T>& input,
                        std::vector<std::size_t> sequence = {}) {
  if (sequence.empty()) sequence = model.default_sequence();
  if (params.size() != model.params().size()) throw ShapeError("forward: parameter count mismatch");
  ForwardCache<T> cache;
  cache.sequence = std::move(sequence);
  Tensor<T> x = input;
  for (std::size_t layer : cache.sequence) {
    Tensor<T> y = layer_forward<T>(model, layer, params, x);
    cache.inputs.push_back(std::move(x));
    x = std::move(y);
  }
  cache.output = std::move(x);
  return cache;
}

template <Scalar T>
std::vector<Tensor<T>> backward(const ModelSpec& model, const ParamRefs<T>& params, const ForwardCache<T>& cache,
                                const Tensor<T>& grad_output) {
  if (!cache.valid()) throw StateError("backward called without a matching forward cache");
  if (grad_output.shape() != cache.output.shape()) {
    throw ShapeError("backward: gradient shape " + shape_str(grad_output.shape()) + " does not match output " +
                     shape_str(cache.output.shape()));
  }
  std::vector<Tensor<T>> grads;
  GradRefs<T> refs;
  grads.reserve(model.params().size());
  for (const auto& p : model.params()) grads.emplace_back(p.shape);
  for (auto& g : grads) refs.push_back(g.span());
  Tensor<T> dy = grad_output;
  for (std::size_t k = cache.sequence.size(); k-- > 0;) {
    dy = layer_backward<T>(model, cache.sequence[k], params, cache.inputs[k], dy, refs);
  }
  return grads;
}

template <Scalar T>
struct LossResult {
  T loss{0};
  Tensor<T> grad;  // dLoss/dOutput, already multiplied by grad_scale
};

// Half squared error averaged over the batch: mean_b 0.5 * ||y_b - t_b||^2.
// The returned gradient is (y - t) * (grad_scale / B).
template <Scalar T>
LossResult<T> mse_loss(const Tensor<T>& output, const Tensor<T>& target, T grad_scale = T{1}) {
  if (output.shape() != target.shape()) {
    throw ShapeError("loss: output " + shape_str(output.shape()) + " vs target " + shape_str(target.shape()));
  }
  const std::size_t batch = output.rows();
  const T factor = grad_scale / static_cast<T>(batch);
  LossResult<T> res;
  res.grad = Tensor<T>(output.shape());
  T sum{0};
  for (std::size_t i = 0; i < output.numel(); ++i) {
    const T d = output[i] - target[i];
    sum += T{0.5} * d * d;
    res.grad[i] = d * factor;
  }
  res.loss = sum / static_cast<T>(batch);
  return res;
}

}  // namespace fsdp

// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

// Test-side oracles. Nothing here calls library numerics, so they check the
// library instead of restating it.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fsdp/engine/driver.hpp"

namespace fsdp::testing {

// Plain-loop MLP trainer: linear layers with ReLU between, half squared error
// averaged over rows, SGD on the mean gradient. Params are [W0, b0, W1, b1, ...]
// with W stored out x in.
struct RefMlp {
  std::vector<std::size_t> widths;
  std::vector<std::vector<double>> params;

  double step(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& t, double lr) {
    const std::size_t layers = widths.size() - 1;
    const std::size_t rows = x.size();
    std::vector<std::vector<double>> grads(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) grads[p].assign(params[p].size(), 0.0);
    double loss = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<std::vector<double>> acts{x[r]};   // post-activation inputs
      std::vector<std::vector<double>> pre;          // pre-activation outputs
      for (std::size_t l = 0; l < layers; ++l) {
        const auto& w = params[2 * l];
        const auto& b = params[2 * l + 1];
        std::vector<double> z(widths[l + 1]);
        for (std::size_t o = 0; o < z.size(); ++o) {
          double s = 0;
          for (std::size_t i = 0; i < widths[l]; ++i) s += w[o * widths[l] + i] * acts.back()[i];
          z[o] = s + b[o];
        }
        pre.push_back(z);
        if (l + 1 < layers) {
          for (auto& v : z) v = v > 0 ? v : 0;
        }
        acts.push_back(z);
      }
      std::vector<double> d(widths.back());
      for (std::size_t o = 0; o < d.size(); ++o) {
        const double e = acts.back()[o] - t[r][o];
        loss += 0.5 * e * e / static_cast<double>(rows);
        d[o] = e / static_cast<double>(rows);
      }
      for (std::size_t l = layers; l-- > 0;) {
        if (l + 1 < layers) {
          for (std::size_t o = 0; o < d.size(); ++o) d[o] = pre[l][o] > 0 ? d[o] : 0;
        }
        const auto& w = params[2 * l];
        std::vector<double> dx(widths[l], 0.0);
        for (std::size_t o = 0; o < widths[l + 1]; ++o) {
          for (std::size_t i = 0; i < widths[l]; ++i) {
            grads[2 * l][o * widths[l] + i] += d[o] * acts[l][i];
            dx[i] += d[o] * w[o * widths[l] + i];
          }
          grads[2 * l + 1][o] += d[o];
        }
        d = dx;
      }
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (std::size_t i = 0; i < params[p].size(); ++i) params[p][i] -= lr * grads[p][i];
    }
    return loss;
  }
};

inline std::vector<std::vector<double>> rows_of(const Tensor<double>& t) {
  std::vector<std::vector<double>> out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) out[r][c] = t.at(r, c);
  }
  return out;
}

// Rows of all micro-batches of one step, concatenated.
inline void step_rows(const StepBatches& sb, std::vector<std::vector<double>>& x, std::vector<std::vector<double>>& t) {
  x.clear();
  t.clear();
  for (const auto& mb : sb) {
    for (auto& r : rows_of(mb.input)) x.push_back(r);
    for (auto& r : rows_of(mb.target)) t.push_back(r);
  }
}

inline double max_diff(const std::vector<std::vector<double>>& ref, const std::vector<Tensor<double>>& got) {
  double d = 0;
  for (std::size_t p = 0; p < ref.size(); ++p) {
    for (std::size_t i = 0; i < ref[p].size(); ++i) {
      const double e = std::abs(ref[p][i] - got.at(p)[i]);
      d = std::isnan(e) ? INFINITY : std::max(d, e);
    }
  }
  return d;
}

inline std::vector<std::vector<double>> to_vectors(const std::vector<Tensor<double>>& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& p : ps) out.emplace_back(p.storage().begin(), p.storage().end());
  return out;
}

inline std::vector<StepBatches> random_steps(std::uint32_t seed, int steps, int micro, std::size_t rows,
                                             std::size_t in, std::size_t out, bool integer) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  auto draw = [&] { return integer ? static_cast<double>(static_cast<int>(rng() % 3) - 1) : u(rng); };
  std::vector<StepBatches> all;
  for (int s = 0; s < steps; ++s) {
    StepBatches sb;
    for (int m = 0; m < micro; ++m) {
      Tensor<double> x({rows, in}), y({rows, out});
      for (auto& v : x.storage()) v = draw();
      for (auto& v : y.storage()) v = draw();
      sb.push_back({std::move(x), std::move(y), {}});
    }
    all.push_back(std::move(sb));
  }
  return all;
}

// Parameters with deterministic small values; integer when asked.
inline std::vector<Tensor<double>> simple_params(const ModelSpec& model, std::uint32_t seed, bool integer) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<Tensor<double>> out;
  for (const auto& p : model.params()) {
    Tensor<double> t(p.shape);
    for (auto& v : t.storage()) v = integer ? static_cast<double>(static_cast<int>(rng() % 3) - 1) : u(rng);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace fsdp::testing

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference oracle. It only ever evaluates forward values
// on constant inputs, so it shares no code path with reverse-mode sweeps.

#include <cmath>
#include <functional>
#include <vector>

#include "wnet/nn.hpp"
#include "wnet/random.hpp"

namespace wnet::testing {

using Fn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

/// Like random_tensor but keeps every entry at least `gap` away from zero,
/// so kinks at the origin are never straddled by the difference stencil.
inline Tensor<double> random_away_from_zero(Shape shape, Rng& rng, double gap = 0.05) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) {
    const double u = uniform(rng, gap, 1.0);
    v = uniform01(rng) < 0.5 ? -u : u;
  }
  return t;
}

inline double evaluate(const Fn& f, const std::vector<Tensor<double>>& inputs) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t));
  return f(g, vars).item();
}

inline std::vector<Tensor<double>> finite_difference(const Fn& f, std::vector<Tensor<double>> inputs,
                                                     double step = 1e-5) {
  std::vector<Tensor<double>> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double> g(inputs[i].shape());
    for (Index e = 0; e < inputs[i].size(); ++e) {
      const double saved = inputs[i][e];
      inputs[i][e] = saved + step;
      const double up = evaluate(f, inputs);
      inputs[i][e] = saved - step;
      const double down = evaluate(f, inputs);
      inputs[i][e] = saved;
      g[e] = (up - down) / (2.0 * step);
    }
    out.push_back(std::move(g));
  }
  return out;
}

inline std::vector<Tensor<double>> analytic(const Fn& f, const std::vector<Tensor<double>>& inputs) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  auto grads = g.backward(f(g, vars));
  std::vector<Tensor<double>> out;
  for (const auto& v : vars) out.push_back(grads.of(v));
  return out;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-8) {
  double diff = 0, na = 0, nb = 0;
  for (Index i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Worst relative error over all inputs.
inline double gradcheck(const Fn& f, const std::vector<Tensor<double>>& inputs, double step = 1e-5) {
  const auto a = analytic(f, inputs);
  const auto n = finite_difference(f, inputs, step);
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], n[i]));
  return worst;
}

/// Weights an arbitrary-shaped output by fixed random coefficients and sums,
/// so every output element contributes to the checked scalar.
inline Var<double> project(const Var<double>& y, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 0xC0FFEE);
  return sum_all(mul(y, Var<double>::constant(random_tensor(y.shape(), rng))));
}

/// Central differences over every trainable element of `sets`, compared
/// with reverse-mode gradients of the same scalar.
inline double parameter_gradcheck(const std::function<Var<double>(Graph<double>&)>& loss,
                                  std::vector<ParameterSet<double>*> sets, double step = 1e-5) {
  GradientMap<double> grads;
  {
    Graph<double> g;
    grads = g.backward(loss(g));
  }
  auto eval = [&] {
    Graph<double> g;
    return loss(g).item();
  };
  double worst = 0;
  for (auto* ps : sets) {
    for (auto& p : *ps) {
      if (!p.trainable) continue;
      Tensor<double> numeric(p.value.shape());
      for (Index i = 0; i < p.value.size(); ++i) {
        const double saved = p.value[i];
        p.value[i] = saved + step;
        const double up = eval();
        p.value[i] = saved - step;
        const double down = eval();
        p.value[i] = saved;
        numeric[i] = (up - down) / (2 * step);
      }
      const Tensor<double> analytic = grads.contains(p) ? grads.of(p) : Tensor<double>(p.value.shape());
      worst = std::max(worst, relative_error(analytic, numeric, 1e-6));
    }
  }
  return worst;
}

}  // namespace wnet::testing

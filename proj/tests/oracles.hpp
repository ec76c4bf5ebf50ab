// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

// Independent reference computations used by the test suites. Nothing here
// calls into the backward pass it is meant to check.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "circuitlab/ops.hpp"

namespace circuitlab::testing {

struct GradInput {
  Shape shape;
  std::vector<double> data;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central finite differences with step h for every scalar of every input.
inline std::vector<std::vector<double>> numeric_grads(const ScalarFn& f, const std::vector<GradInput>& inputs,
                                                      double h = 1e-5) {
  std::vector<std::vector<double>> out;
  auto eval = [&](const std::vector<GradInput>& in) {
    std::vector<Tensor> ts;
    for (const auto& g : in) ts.push_back(Tensor::from(g.shape, g.data));
    return f(ts).item();
  };
  std::vector<GradInput> work = inputs;
  for (std::size_t k = 0; k < work.size(); ++k) {
    std::vector<double> g(work[k].data.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x0 = work[k].data[i];
      work[k].data[i] = x0 + h;
      const double fp = eval(work);
      work[k].data[i] = x0 - h;
      const double fm = eval(work);
      work[k].data[i] = x0;
      g[i] = (fp - fm) / (2 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2), over all
/// inputs jointly. Returns 0 when both gradients vanish.
inline double gradcheck_rel_error(const ScalarFn& f, const std::vector<GradInput>& inputs, double h = 1e-5) {
  std::vector<Tensor> leaves;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    leaves.push_back(Tensor::leaf(inputs[k].shape, inputs[k].data, "in" + std::to_string(k)));
  const GradMap grads = backward(f(leaves));
  const auto numeric = numeric_grads(f, inputs, h);
  double diff = 0, na = 0, nn = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto it = grads.find("in" + std::to_string(k));
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      const double a = it == grads.end() ? 0.0 : it->second[i];
      diff += (a - numeric[k][i]) * (a - numeric[k][i]);
      na += a * a;
      nn += numeric[k][i] * numeric[k][i];
    }
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0 ? 0.0 : std::sqrt(diff) / denom;
}

inline std::vector<double> uniform_vec(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

/// Projects an op output to a scalar with fixed random weights so every
/// output coordinate contributes to the checked gradient.
inline Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, Tensor::from(y.shape(), uniform_vec(rng, y.numel(), -1.0, 1.0))));
}

struct GradCase {
  std::string op;
  ScalarFn fn;
  std::vector<GradInput> inputs;
};

inline GradInput rand_input(std::mt19937_64& rng, Shape s, double mag = 10.0) {
  const std::size_t n = shape_numel(s);
  return {std::move(s), uniform_vec(rng, n, -mag, mag)};
}

/// One random case per differentiable op. `seed` fixes the projection
/// weights; `rng` draws the inputs.
inline std::vector<GradCase> gradcheck_cases(std::mt19937_64& rng, std::uint64_t seed) {
  static const std::vector<int> ids{2, 0, 4, 2, 1};
  static const std::vector<int> targets{3, 0, 6, 1};
  auto un = [seed](auto op) -> ScalarFn { return [op, seed](const std::vector<Tensor>& t) { return project(op(t[0]), seed); }; };
  auto bin = [seed](auto op) -> ScalarFn {
    return [op, seed](const std::vector<Tensor>& t) { return project(op(t[0], t[1]), seed); };
  };
  std::vector<GradCase> c;
  c.push_back({"add", bin([](auto a, auto b) { return add(a, b); }), {rand_input(rng, {3, 4}), rand_input(rng, {3, 4})}});
  c.push_back({"add_scalar", bin([](auto a, auto b) { return add(a, b); }), {rand_input(rng, {3, 4}), rand_input(rng, {1})}});
  c.push_back({"sub", bin([](auto a, auto b) { return sub(a, b); }), {rand_input(rng, {5}), rand_input(rng, {5})}});
  c.push_back({"mul", bin([](auto a, auto b) { return mul(a, b); }), {rand_input(rng, {2, 3}), rand_input(rng, {2, 3})}});
  c.push_back({"mul_scalar", bin([](auto a, auto b) { return mul(a, b); }), {rand_input(rng, {1}), rand_input(rng, {2, 3})}});
  c.push_back({"scale", un([](auto a) { return scale(a, -1.75); }), {rand_input(rng, {6})}});
  c.push_back({"sigmoid", un([](auto a) { return sigmoid(a); }), {rand_input(rng, {7})}});
  c.push_back({"relu", un([](auto a) { return relu(a); }), {rand_input(rng, {7})}});
  c.push_back({"gelu", un([](auto a) { return gelu(a); }), {rand_input(rng, {7})}});
  c.push_back({"scale_columns", bin([](auto a, auto b) { return scale_columns(a, b); }),
               {rand_input(rng, {4, 3}), rand_input(rng, {3})}});
  c.push_back({"sum", un([](auto a) { return mul(sum(a), sum(a)); }), {rand_input(rng, {2, 2})}});
  c.push_back({"mean", un([](auto a) { return mul(mean(a), mean(a)); }), {rand_input(rng, {5})}});
  c.push_back({"reshape", un([](auto a) { return reshape(a, {3, 2}); }), {rand_input(rng, {2, 3})}});
  c.push_back({"slice", un([](auto a) { return slice(a, 2, 5); }), {rand_input(rng, {3, 3})}});
  c.push_back({"transpose_last2", un([](auto a) { return transpose_last2(a); }), {rand_input(rng, {2, 3, 4})}});
  c.push_back({"gather_rows", un([](auto a) { return gather_rows(a, ids); }), {rand_input(rng, {5, 3})}});
  c.push_back({"matmul", bin([](auto a, auto b) { return matmul(a, b); }), {rand_input(rng, {3, 4}), rand_input(rng, {4, 2})}});
  c.push_back({"matmul_batched", bin([](auto a, auto b) { return matmul(a, b); }),
               {rand_input(rng, {2, 3, 4}), rand_input(rng, {2, 4, 2})}});
  c.push_back({"causal_softmax", un([](auto a) { return softmax_rows(add_causal_mask(a)); }), {rand_input(rng, {2, 4, 4})}});
  c.push_back({"softmax_rows", un([](auto a) { return softmax_rows(a); }), {rand_input(rng, {3, 5})}});
  c.push_back({"rms_norm_rows", bin([](auto a, auto b) { return rms_norm_rows(a, b); }),
               {rand_input(rng, {3, 6}), rand_input(rng, {6})}});
  c.push_back({"cross_entropy", [](const std::vector<Tensor>& t) { return cross_entropy(t[0], targets); },
               {rand_input(rng, {4, 7})}});
  const Tensor ref = Tensor::from({4, 7}, uniform_vec(rng, 28, -10, 10));
  c.push_back({"kl_divergence", [ref](const std::vector<Tensor>& t) { return kl_divergence(ref, t[0]); },
               {rand_input(rng, {4, 7})}});
  return c;
}

/// Plain-loop reference softmax and KL used to freeze expected values.
inline std::vector<double> ref_softmax(const std::vector<double>& x) {
  double mx = *std::max_element(x.begin(), x.end()), s = 0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s += (out[i] = std::exp(x[i] - mx));
  for (double& v : out) v /= s;
  return out;
}

inline double ref_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

}  // namespace circuitlab::testing

#pragma once

// Central finite-difference checking of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cstnet/ops.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

struct GradCheckOptions {
  double step = 1e-5;
  // Elements probed per tensor; 0 probes every element.
  std::size_t max_probes_per_tensor = 0;
  std::uint64_t probe_seed = 1;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::string worst;  // "tensor#index" of the worst probe

  bool passed(double tol) const { return max_rel_error <= tol && std::isfinite(max_rel_error); }
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// loss_fn must rebuild the graph from the current values of `inputs` and
// return a scalar. Every input is probed after one analytic backward pass.
template <typename LossFn>
GradCheckResult gradcheck(LossFn&& loss_fn, std::vector<Tensord> inputs, const GradCheckOptions& opt = {}) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensord loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  GradCheckResult res;
  std::mt19937_64 rng(opt.probe_seed);
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto values = inputs[ti].mutable_data();
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_probes_per_tensor && idx.size() > opt.max_probes_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_probes_per_tensor);
    }
    for (auto i : idx) {
      const double orig = values[i];
      values[i] = orig + opt.step;
      const double up = loss_fn().item();
      values[i] = orig - opt.step;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(analytic[ti][i], numeric);
      ++res.probes;
      if (!(err <= res.max_rel_error)) {
        res.max_rel_error = err;
        res.worst = "input" + std::to_string(ti) + "#" + std::to_string(i);
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return res;
}

// Scalar loss Σ w ⊙ out with fixed random weights, so a tensor-valued op can be
// checked through every output element.
inline Tensord random_projection(const Tensord& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = Tensord::uniform(out.shape(), -1.0, 1.0, rng);
  return sum(mul(out, w));
}

}  // namespace cstnet

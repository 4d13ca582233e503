#pragma once

// Central finite-difference oracle for the hand-written backward passes.

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmc/kernel.hpp"

namespace cmc {

struct GradCheckTarget {
  std::string name;
  Tensor2<double>* value;       // perturbed in place, restored afterwards
  const Tensor2<double>* grad;  // analytic gradient of the objective
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<target>[i,j]"
};

// For every scalar entry of every target: numeric = (f(x+h) - f(x-h)) / 2h,
// error = |analytic - numeric| / max(1, |numeric|). `compute_gradients` is
// called once, before any perturbation, and must fill the grad tensors.
// Throws a numeric error if any evaluated value is non-finite.
GradCheckResult finite_diff_check(const std::function<double()>& objective,
                                  const std::function<void()>& compute_gradients,
                                  std::span<const GradCheckTarget> targets,
                                  double h = 1e-5);

Tensor2<double> random_tensor(Index rows, Index cols, std::mt19937_64& rng,
                              double lo = -1.0, double hi = 1.0);

// Checks a layer-like object (forward(x) -> y, backward(dy) -> dx) under the
// objective sum(R .* forward(x)) for a fixed random R. `params` are the
// layer's learnable parameters; their grads are zeroed before the analytic
// pass.
template <typename Layer>
GradCheckResult check_layer(Layer& layer, Tensor2<double>& input,
                            std::span<const NamedParam<double>> params,
                            std::mt19937_64& rng, double h = 1e-5) {
  Tensor2<double> probe_out = layer.forward(input);
  const Tensor2<double> weights =
      random_tensor(probe_out.rows(), probe_out.cols(), rng);
  Tensor2<double> grad_input;

  auto objective = [&]() {
    return (layer.forward(input).array() * weights.array()).sum();
  };
  auto analytic = [&]() {
    for (const auto& p : params) p.param->zero_grad();
    layer.forward(input);
    grad_input = layer.backward(weights);
  };

  std::vector<GradCheckTarget> targets;
  targets.push_back({"input", &input, &grad_input});
  for (const auto& p : params) {
    targets.push_back({p.name, &p.param->value, &p.param->grad});
  }
  return finite_diff_check(objective, analytic, targets, h);
}

}  // namespace cmc

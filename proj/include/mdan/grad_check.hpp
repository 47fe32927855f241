#pragma once

#include <functional>
#include <vector>

#include "mdan/tensor.hpp"

namespace mdan {

// Max over coordinates of |a-n| / max(1e-8, |a|+|n|).
double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

// Central-difference check of a scalar-valued tensor function at x.
// f receives a fresh leaf tensor each call and must be deterministic.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-6);

// Central-difference check of a parameterless loss against the analytic
// gradients of `params`, perturbing each parameter in place. Used for
// whole-model checks where the parameters live inside a structure.
// `stride` > 1 probes every stride-th coordinate to bound the runtime.
double grad_check_params(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                         double h = 1e-6, std::size_t stride = 1);

}  // namespace mdan

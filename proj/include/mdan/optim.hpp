#pragma once

#include <vector>

#include "mdan/tensor.hpp"

namespace mdan {

// SGD with momentum and weight decay over one parameter group.
// step(): v <- momentum*v + grad + weight_decay*param; param <- param - lr*v;
// gradients are cleared afterwards.
class SgdState {
  public:
    explicit SgdState(std::vector<Tensor> params);
    void step(double lr, double momentum, double weight_decay);
    const std::vector<Tensor>& params() const { return params_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
};

void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity, double lr,
              double momentum, double weight_decay);

}  // namespace mdan

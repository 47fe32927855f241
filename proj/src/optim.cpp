#include "mdan/optim.hpp"

#include "mdan/errors.hpp"

namespace mdan {

void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity, double lr,
              double momentum, double weight_decay) {
    if (velocity.size() != params.size()) {
        velocity.assign(params.size(), {});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        std::vector<double>& v = velocity[i];
        if (v.empty()) v.assign(p.size(), 0.0);
        const std::vector<double> g =
            p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
        std::vector<double>& data = p.mutable_values();
        for (std::size_t j = 0; j < data.size(); ++j) {
            v[j] = momentum * v[j] + g[j] + weight_decay * data[j];
            data[j] -= lr * v[j];
        }
        p.zero_grad();
    }
}

SgdState::SgdState(std::vector<Tensor> params) : params_(std::move(params)) {}

void SgdState::step(double lr, double momentum, double weight_decay) {
    sgd_step(params_, velocity_, lr, momentum, weight_decay);
}

}  // namespace mdan

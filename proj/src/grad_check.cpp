#include "mdan/grad_check.hpp"

#include <cmath>

#include "mdan/errors.hpp"

namespace mdan {

double max_relative_error(const std::vector<double>& analytic,
                          const std::vector<double>& numeric) {
    if (analytic.size() != numeric.size()) {
        throw ContractError("max_relative_error: length mismatch");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double denom = std::max(1e-8, std::abs(a) + std::abs(n));
        worst = std::max(worst, std::abs(a - n) / denom);
    }
    return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    Tensor leaf(x.shape(), x.values(), /*requires_grad=*/true);
    Tensor out = f(leaf);
    if (out.size() != 1) throw ContractError("grad_check: f must return a scalar");
    backward(out);
    const std::vector<double> analytic =
        leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.size(), 0.0);

    std::vector<double> numeric(x.size());
    std::vector<double> probe = x.values();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig - h;
        const double fm = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    return max_relative_error(analytic, numeric);
}

double grad_check_params(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& params, double h, std::size_t stride) {
    if (stride == 0) throw ContractError("grad_check_params: stride must be positive");
    for (auto p : params) p.zero_grad();
    backward(loss_fn());

    double worst = 0.0;
    for (auto p : params) {
        const std::vector<double> analytic =
            p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
        std::vector<double>& data = p.mutable_values();
        for (std::size_t i = 0; i < data.size(); i += stride) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = loss_fn().item();
            data[i] = orig - h;
            const double fm = loss_fn().item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            worst = std::max(worst, max_relative_error({analytic[i]}, {numeric}));
        }
    }
    for (auto p : params) p.zero_grad();
    return worst;
}

}  // namespace mdan

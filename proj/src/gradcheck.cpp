#include "mudaf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mudaf/errors.hpp"

namespace mudaf {

GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> params) {
    for (Tensor& p : params) {
        require(p.is_leaf() && p.requires_grad(), ErrorKind::usage, "check_gradients: params must be leaf tensors with requires_grad");
        p.zero_grad();
    }
    Tensor root = loss();
    require(std::isfinite(root.item()), ErrorKind::numeric, "check_gradients: non-finite loss");
    root.backward();

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                          : std::vector<double>(p.numel(), 0.0);
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            const double h = 1e-5 * std::max(1.0, std::abs(original));
            double plus = 0.0, minus = 0.0;
            {
                NoGradGuard no_grad;
                values[i] = original + h;
                plus = loss().item();
                values[i] = original - h;
                minus = loss().item();
            }
            values[i] = original;
            require(std::isfinite(plus) && std::isfinite(minus), ErrorKind::numeric,
                    "check_gradients: non-finite loss under perturbation");
            const double numeric = (plus - minus) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            const double err = std::abs(analytic[i] - numeric) / denom;
            ++result.elements_checked;
            if (err > result.max_relative_error || result.elements_checked == 1) {
                result.max_relative_error = err;
                result.worst_param = pi;
                result.worst_element = i;
                result.worst_analytic = analytic[i];
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace mudaf

#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "mudaf/tensor.hpp"

namespace mudaf {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_element = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t elements_checked = 0;
};

// Compares reverse-mode gradients of a scalar computation against central
// differences with step h = 1e-5 * max(1, |theta|). The relative error of an
// element is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// `loss` must be deterministic for fixed parameter values; parameter values
// are restored before returning.
GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> params);

}  // namespace mudaf

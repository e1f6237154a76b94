#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "csipred/error.hpp"
#include "csipred/numkit/mat.hpp"

namespace csipred::numkit {

using ScalarFn = std::function<double(std::span<const Mat>)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
};

/// Compares `analytic` against central differences of `f` at `theta`.
/// Relative error per coordinate is |a - n| / max(1e-12, |a| + |n|).
inline GradCheckResult grad_check_detail(const ScalarFn& f, std::vector<Mat> theta,
                                         std::span<const Mat> analytic, double h)
{
    if (!(h > 0.0)) {
        throw ConfigError("grad_check: step must be positive");
    }
    if (analytic.size() != theta.size()) {
        throw ShapeError("grad_check: gradient count does not match parameter count");
    }
    GradCheckResult res;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        require_same_shape(theta[k], analytic[k], "grad_check");
        for (std::size_t i = 0; i < theta[k].size(); ++i) {
            const double orig = theta[k][i];
            theta[k][i] = orig + h;
            const double fp = f(theta);
            theta[k][i] = orig - h;
            const double fm = f(theta);
            theta[k][i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError("grad_check: non-finite function value");
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[k][i];
            const double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
            if (rel > res.max_rel_error) {
                res = {rel, k, i};
            }
        }
    }
    return res;
}

inline double grad_check(const ScalarFn& f, std::vector<Mat> theta, std::span<const Mat> analytic,
                         double h = 1e-6)
{
    return grad_check_detail(f, std::move(theta), analytic, h).max_rel_error;
}

}  // namespace csipred::numkit

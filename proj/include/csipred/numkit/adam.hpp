#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "csipred/error.hpp"
#include "csipred/numkit/mat.hpp"

namespace csipred::numkit {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    std::size_t step = 0;
    std::vector<Mat> m;
    std::vector<Mat> v;
};

/// Zero moments shaped like `params`.
inline AdamState adam_init(std::span<const Mat* const> params, AdamConfig cfg = {})
{
    AdamState s{cfg, 0, {}, {}};
    for (const Mat* p : params) {
        s.m.emplace_back(p->rows(), p->cols());
        s.v.emplace_back(p->rows(), p->cols());
    }
    return s;
}

/// One bias-corrected Adam update, in place.
inline void adam_step(AdamState& state, std::span<Mat* const> params, std::span<const Mat> grads)
{
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " +
                         std::to_string(state.m.size()) + " moment slots");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        require_same_shape(*params[k], grads[k], "adam_step");
        require_same_shape(*params[k], state.m[k], "adam_step");
    }
    const auto& c = state.cfg;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Mat& p = *params[k];
        Mat& m = state.m[k];
        Mat& v = state.v[k];
        const Mat& g = grads[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

}  // namespace csipred::numkit

#pragma once

// Discrete-time linear state-space layer.
//
// Continuous system h' = A h + B x, y = C h (+ skip . x) with diagonal
// A = -exp(a_log) and per-state step dt = exp(log_dt), discretized with the
// bilinear (Tustin) rule. The layer runs either as a recurrent scan or as a
// causal convolution with the materialized kernel C A^t B; both agree for
// LTI parameters. A selective variant makes dt, B and C input dependent and
// can only run as a scan.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "csipred/error.hpp"
#include "csipred/numkit/mat.hpp"
#include "csipred/numkit/rng.hpp"
#include "csipred/numkit/tape.hpp"

namespace csipred::ssm {

using numkit::Mat;
using numkit::Tape;
using numkit::Var;

struct SsmParams {
    std::size_t state_dim = 0;    // F
    std::size_t feature_dim = 0;  // E
    bool use_skip = true;
    bool selective = false;

    Mat a_log;   // 1 x F, A = diag(-exp(a_log))
    Mat log_dt;  // 1 x F (LTI only)
    Mat b;       // F x E
    Mat c;       // E x F
    Mat skip;    // 1 x E (when use_skip)

    // Selective maps: dt_t = softplus(x_t W_dt + b_dt), B gate = x_t W_b + b_b,
    // C gate = x_t W_c + b_c. All W are E x F, all biases 1 x F.
    Mat w_dt, b_dt, w_b, b_b, w_c, b_c;

    std::vector<Mat*> tensors()
    {
        std::vector<Mat*> out{&a_log};
        if (!selective) {
            out.push_back(&log_dt);
        }
        out.push_back(&b);
        out.push_back(&c);
        if (use_skip) {
            out.push_back(&skip);
        }
        if (selective) {
            for (Mat* m : {&w_dt, &b_dt, &w_b, &b_b, &w_c, &b_c}) {
                out.push_back(m);
            }
        }
        return out;
    }

    std::vector<const Mat*> tensors() const
    {
        auto mut = const_cast<SsmParams*>(this)->tensors();
        return {mut.begin(), mut.end()};
    }

    friend bool operator==(const SsmParams&, const SsmParams&) = default;
};

struct SsmDiscrete {
    Mat a_bar;  // F x F
    Mat b_bar;  // F x E
    Mat c_bar;  // E x F
    Mat skip;   // 1 x E, empty when disabled
};

/// Impulse response taps C A^t B, t = 0..T-1, plus the direct skip term.
struct SsmKernel {
    std::vector<Mat> taps;  // each E x E
    Mat skip;               // 1 x E, empty when disabled
};

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }

/// Random init: A = -1/2 per state, dt log-uniform in [1e-3, 1e-1],
/// B and C scaled uniform, skip scaled uniform.
inline SsmParams ssm_init(std::size_t state_dim, std::size_t feature_dim, std::uint64_t seed,
                          bool use_skip = true, bool selective = false)
{
    if (state_dim < 1 || feature_dim < 1) {
        throw ConfigError("ssm_init: dimensions must be >= 1");
    }
    const std::size_t f = state_dim, e = feature_dim;
    SsmParams p;
    p.state_dim = f;
    p.feature_dim = e;
    p.use_skip = use_skip;
    p.selective = selective;
    numkit::Rng rng(numkit::derive_seed({seed, numkit::tag_hash("ssm_init")}));
    auto uniform_fill = [&rng](Mat& m, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& v : m.values()) {
            v = u(rng);
        }
    };
    p.a_log = Mat(1, f, std::log(0.5));
    Mat log_dt(1, f);
    std::uniform_real_distribution<double> ldt(std::log(1e-3), std::log(1e-1));
    for (double& v : log_dt.values()) {
        v = ldt(rng);
    }
    p.b = Mat(f, e);
    uniform_fill(p.b, std::sqrt(3.0 / static_cast<double>(e)));
    p.c = Mat(e, f);
    uniform_fill(p.c, std::sqrt(3.0 / static_cast<double>(f)));
    if (use_skip) {
        p.skip = Mat(1, e);
        uniform_fill(p.skip, std::sqrt(3.0 / static_cast<double>(e)));
    }
    if (selective) {
        const double bound = std::sqrt(3.0 / static_cast<double>(e)) * 0.1;
        for (Mat* w : {&p.w_dt, &p.w_b, &p.w_c}) {
            *w = Mat(e, f);
            uniform_fill(*w, bound);
        }
        p.b_dt = Mat(1, f);
        for (std::size_t i = 0; i < f; ++i) {
            p.b_dt[i] = softplus_inverse(std::exp(log_dt[i]));
        }
        p.b_b = Mat(1, f, 1.0);
        p.b_c = Mat(1, f, 1.0);
    } else {
        p.log_dt = std::move(log_dt);
    }
    return p;
}

/// Diagonal of the continuous state matrix.
inline Mat state_eigenvalues(const SsmParams& p)
{
    Mat lam(1, p.state_dim);
    for (std::size_t i = 0; i < p.state_dim; ++i) {
        lam[i] = -std::exp(p.a_log[i]);
    }
    return lam;
}

/// Bilinear discretization for arbitrary (A, B, C) with per-state steps `dt`
/// (1 x F): A_bar = (I - dt/2 A)^-1 (I + dt/2 A), B_bar = (I - dt/2 A)^-1 dt B.
/// Throws NumericError when the resolvent is singular.
inline SsmDiscrete bilinear_discretize(const Mat& a, const Mat& b, const Mat& c, const Mat& dt)
{
    const std::size_t f = a.rows();
    if (a.cols() != f || b.rows() != f || c.cols() != f || dt.size() != f) {
        throw ShapeError("bilinear_discretize: inconsistent dims A " + a.shape_str() + ", B " +
                         b.shape_str() + ", C " + c.shape_str() + ", dt " + dt.shape_str());
    }
    Mat lhs(f, f), rhs(f, f), db(b.rows(), b.cols());
    for (std::size_t i = 0; i < f; ++i) {
        for (std::size_t j = 0; j < f; ++j) {
            const double id = i == j ? 1.0 : 0.0;
            lhs(i, j) = id - 0.5 * dt[i] * a(i, j);
            rhs(i, j) = id + 0.5 * dt[i] * a(i, j);
        }
        for (std::size_t j = 0; j < b.cols(); ++j) {
            db(i, j) = dt[i] * b(i, j);
        }
    }
    SsmDiscrete d;
    d.a_bar = numkit::solve(lhs, rhs);
    d.b_bar = numkit::solve(lhs, db);
    d.c_bar = c;
    return d;
}

/// Closed-form bilinear discretization of the diagonal parameterization.
/// Entry f of A_bar is (1 + dt*l/2) / (1 - dt*l/2) with l = -exp(a_log[f]) < 0,
/// so |A_bar| < 1 for every reachable parameter value.
inline SsmDiscrete ssm_discretize(const SsmParams& p)
{
    if (p.selective) {
        throw ConfigError("ssm_discretize: selective parameters have no fixed discretization");
    }
    const std::size_t f = p.state_dim, e = p.feature_dim;
    SsmDiscrete d;
    d.a_bar = Mat(f, f);
    d.b_bar = Mat(f, e);
    for (std::size_t i = 0; i < f; ++i) {
        const double lam = -std::exp(p.a_log[i]);
        const double dt = std::exp(p.log_dt[i]);
        const double den = 1.0 - 0.5 * dt * lam;
        if (den == 0.0 || !std::isfinite(den)) {
            throw NumericError("ssm_discretize: singular resolvent at state " + std::to_string(i));
        }
        d.a_bar(i, i) = (1.0 + 0.5 * dt * lam) / den;
        for (std::size_t j = 0; j < e; ++j) {
            d.b_bar(i, j) = dt * p.b(i, j) / den;
        }
    }
    d.c_bar = p.c;
    if (p.use_skip) {
        d.skip = p.skip;
    }
    return d;
}

/// Largest |A_bar| entry on the diagonal, i.e. the spectral radius of the
/// discretized diagonal system.
inline double spectral_radius(const SsmParams& p)
{
    double r = 0.0;
    if (p.selective) {
        // Bounded by 1 for any positive step; report the bias-only value.
        for (std::size_t i = 0; i < p.state_dim; ++i) {
            const double h = 0.5 * softplus(p.b_dt[i]) * -std::exp(p.a_log[i]);
            r = std::max(r, std::abs((1.0 + h) / (1.0 - h)));
        }
        return r;
    }
    const SsmDiscrete d = ssm_discretize(p);
    for (std::size_t i = 0; i < p.state_dim; ++i) {
        r = std::max(r, std::abs(d.a_bar(i, i)));
    }
    return r;
}

/// T(F^2 + 2FE) multiply-accumulates for one recurrent pass: state update,
/// input map and output map. The diagonal skip is not counted.
constexpr std::uint64_t ssm_flops(std::uint64_t t, std::uint64_t e, std::uint64_t f)
{
    return t * (f * f + 2 * f * e);
}

/// Recurrent scan over the rows of `x` (T x E):
/// h_t = A_bar h_{t-1} + B_bar x_t, y_t = C_bar h_t (+ skip . x_t).
/// `h0` is 1 x F; an empty h0 means the zero state.
inline Mat ssm_scan(const SsmDiscrete& d, const Mat& x, const Mat& h0 = {},
                    numkit::FlopCounter* flops = nullptr)
{
    const std::size_t f = d.a_bar.rows(), e = d.b_bar.cols();
    if (x.cols() != e) {
        throw ShapeError("ssm_scan: input " + x.shape_str() + " but system expects " +
                         std::to_string(e) + " features");
    }
    if (!h0.empty() && h0.size() != f) {
        throw ShapeError("ssm_scan: initial state " + h0.shape_str() + " but system has " +
                         std::to_string(f) + " states");
    }
    std::vector<double> h(f, 0.0), next(f);
    if (!h0.empty()) {
        std::copy(h0.values().begin(), h0.values().end(), h.begin());
    }
    Mat y(x.rows(), e);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto xt = x.row(t);
        for (std::size_t i = 0; i < f; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < f; ++j) {
                s += d.a_bar(i, j) * h[j];
            }
            for (std::size_t j = 0; j < e; ++j) {
                s += d.b_bar(i, j) * xt[j];
            }
            next[i] = s;
        }
        h.swap(next);
        auto yt = y.row(t);
        for (std::size_t k = 0; k < e; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < f; ++j) {
                s += d.c_bar(k, j) * h[j];
            }
            if (!d.skip.empty()) {
                s += d.skip[k] * xt[k];
            }
            yt[k] = s;
        }
        if (flops) {
            flops->add(f * f + 2 * f * e);
        }
    }
    return y;
}

/// Kernel taps by repeated state propagation (no explicit matrix powers).
inline SsmKernel ssm_kernel(const SsmDiscrete& d, std::size_t length)
{
    if (length < 1) {
        throw ConfigError("ssm_kernel: length must be >= 1");
    }
    SsmKernel k;
    k.skip = d.skip;
    Mat prop = d.b_bar;  // A_bar^t B_bar
    for (std::size_t t = 0; t < length; ++t) {
        k.taps.push_back(numkit::matmul(d.c_bar, prop));
        if (t + 1 < length) {
            prop = numkit::matmul(d.a_bar, prop);
        }
    }
    return k;
}

inline SsmKernel ssm_kernel(const SsmParams& p, std::size_t length)
{
    if (p.selective) {
        throw ConfigError("ssm_kernel: convolution mode is unavailable for selective parameters");
    }
    return ssm_kernel(ssm_discretize(p), length);
}

/// Causal convolution y_t = sum_{s<=t} K[s] x_{t-s} (+ skip . x_t), zero initial state.
inline Mat ssm_conv(const SsmKernel& k, const Mat& x)
{
    if (k.taps.size() < x.rows()) {
        throw ConfigError("ssm_conv: kernel length " + std::to_string(k.taps.size()) +
                          " shorter than input length " + std::to_string(x.rows()));
    }
    const std::size_t e = x.cols();
    if (k.taps.empty() || k.taps[0].cols() != e) {
        throw ShapeError("ssm_conv: kernel/input feature mismatch");
    }
    Mat y(x.rows(), k.taps[0].rows());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto yt = y.row(t);
        for (std::size_t s = 0; s <= t; ++s) {
            const Mat& tap = k.taps[s];
            auto xs = x.row(t - s);
            for (std::size_t i = 0; i < tap.rows(); ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < e; ++j) {
                    acc += tap(i, j) * xs[j];
                }
                yt[i] += acc;
            }
        }
        if (!k.skip.empty()) {
            auto xt = x.row(t);
            for (std::size_t i = 0; i < e; ++i) {
                yt[i] += k.skip[i] * xt[i];
            }
        }
    }
    return y;
}

/// Input-dependent scan: per step dt_t = softplus(x_t W_dt + b_dt),
/// A_bar_t = (1 + dt_t l/2)/(1 - dt_t l/2),
/// h_t = A_bar_t . h_{t-1} + (dt_t / (1 - dt_t l/2)) . g_b(x_t) . (B x_t),
/// y_t = C (g_c(x_t) . h_t) (+ skip . x_t).
inline Mat ssm_selective_scan(const SsmParams& p, const Mat& x)
{
    if (!p.selective) {
        throw ConfigError("ssm_selective_scan: selective flag is off");
    }
    const std::size_t f = p.state_dim, e = p.feature_dim;
    if (x.cols() != e) {
        throw ShapeError("ssm_selective_scan: input " + x.shape_str() + " but layer expects " +
                         std::to_string(e) + " features");
    }
    const Mat lam = state_eigenvalues(p);
    const Mat dt_pre = numkit::matmul(x, p.w_dt);
    const Mat gb = numkit::matmul(x, p.w_b);
    const Mat gc = numkit::matmul(x, p.w_c);
    const Mat bx = numkit::matmul_nt(x, p.b);
    std::vector<double> h(f, 0.0), gh(f);
    Mat y(x.rows(), e);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t i = 0; i < f; ++i) {
            const double dt = softplus(dt_pre(t, i) + p.b_dt[i]);
            const double half = 0.5 * dt * lam[i];
            const double den = 1.0 - half;
            h[i] = (1.0 + half) / den * h[i] + dt / den * (gb(t, i) + p.b_b[i]) * bx(t, i);
            gh[i] = (gc(t, i) + p.b_c[i]) * h[i];
        }
        auto yt = y.row(t);
        auto xt = x.row(t);
        for (std::size_t k = 0; k < e; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < f; ++j) {
                s += p.c(k, j) * gh[j];
            }
            if (p.use_skip) {
                s += p.skip[k] * xt[k];
            }
            yt[k] = s;
        }
    }
    return y;
}

/// Output for either mode without recording gradients.
inline Mat ssm_predict(const SsmParams& p, const Mat& x)
{
    if (p.selective) {
        return ssm_selective_scan(p, x);
    }
    const std::size_t f = p.state_dim, e = p.feature_dim;
    if (x.cols() != e) {
        throw ShapeError("ssm_predict: input " + x.shape_str() + " but layer expects " +
                         std::to_string(e) + " features");
    }
    // Diagonal fast path of ssm_scan.
    const SsmDiscrete d = ssm_discretize(p);
    const Mat u = numkit::matmul_nt(x, d.b_bar);  // T x F
    Mat hs(x.rows(), f);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t i = 0; i < f; ++i) {
            const double prev = t == 0 ? 0.0 : hs(t - 1, i);
            hs(t, i) = d.a_bar(i, i) * prev + u(t, i);
        }
    }
    Mat y = numkit::matmul_nt(hs, d.c_bar);
    if (p.use_skip) {
        for (std::size_t t = 0; t < y.rows(); ++t) {
            for (std::size_t k = 0; k < e; ++k) {
                y(t, k) += p.skip[k] * x(t, k);
            }
        }
    }
    return y;
}

/// Tape handles in SsmParams::tensors() order.
struct SsmVars {
    std::vector<Var> all;
    Var a_log, log_dt, b, c, skip, w_dt, b_dt, w_b, b_b, w_c, b_c;
};

inline SsmVars ssm_bind(Tape& t, const SsmParams& p)
{
    SsmVars v;
    v.a_log = t.param(p.a_log);
    if (!p.selective) {
        v.log_dt = t.param(p.log_dt);
    }
    v.b = t.param(p.b);
    v.c = t.param(p.c);
    if (p.use_skip) {
        v.skip = t.param(p.skip);
    }
    if (p.selective) {
        v.w_dt = t.param(p.w_dt);
        v.b_dt = t.param(p.b_dt);
        v.w_b = t.param(p.w_b);
        v.b_b = t.param(p.b_b);
        v.w_c = t.param(p.w_c);
        v.b_c = t.param(p.b_c);
    }
    return v;
}

/// Differentiable forward pass (recurrent mode) recorded on `x`'s tape.
inline Var ssm_forward(const SsmParams& p, const SsmVars& w, Var x)
{
    using namespace numkit;
    if (x.value().cols() != p.feature_dim) {
        throw ShapeError("ssm_forward: input " + x.value().shape_str() + " but layer expects " +
                         std::to_string(p.feature_dim) + " features");
    }
    const std::size_t steps = x.value().rows();
    Var lam = scale(numkit::exp(w.a_log), -1.0);  // 1 x F
    Var a_bar;   // T x F (selective) or 1 x F
    Var u;       // T x F driven input
    Var gate_c;  // T x F, selective only
    if (p.selective) {
        Var dt = softplus(add_row(matmul(x, w.w_dt), w.b_dt));
        Var half = scale(mul_row(dt, lam), 0.5);
        Var den = add_scalar(scale(half, -1.0), 1.0);
        a_bar = divide(add_scalar(half, 1.0), den);
        Var gate_b = add_row(matmul(x, w.w_b), w.b_b);
        u = hadamard(hadamard(matmul_nt(x, w.b), divide(dt, den)), gate_b);
        gate_c = add_row(matmul(x, w.w_c), w.b_c);
    } else {
        Var dt = numkit::exp(w.log_dt);
        Var half = scale(hadamard(dt, lam), 0.5);
        Var den = add_scalar(scale(half, -1.0), 1.0);
        a_bar = divide(add_scalar(half, 1.0), den);
        u = mul_row(matmul_nt(x, w.b), divide(dt, den));
    }
    std::vector<Var> states;
    states.reserve(steps);
    Var h = slice_rows(u, 0, 1);
    states.push_back(h);
    for (std::size_t t = 1; t < steps; ++t) {
        Var decay = p.selective ? slice_rows(a_bar, t, 1) : a_bar;
        h = add(hadamard(h, decay), slice_rows(u, t, 1));
        states.push_back(h);
    }
    Var hs = concat_rows(states);
    if (p.selective) {
        hs = hadamard(hs, gate_c);
    }
    Var y = matmul_nt(hs, w.c);
    if (p.use_skip) {
        y = add(y, mul_row(x, w.skip));
    }
    return y;
}

}  // namespace csipred::ssm

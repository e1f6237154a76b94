#pragma once

// Single multi-head self-attention layer: per-head QKV projection, scaled
// dot-product attention map, per-head outputs, concatenation and an output
// projection. No bias, no positional encoding, no residual.

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

namespace csipred::attention {

using numkit::Mat;
using numkit::Tape;
using numkit::Var;

struct MsaParams {
    std::size_t seq_len = 0;   // N
    std::size_t dim = 0;       // D
    std::size_t heads = 0;     // H
    std::size_t head_dim = 0;  // D_h = D / H
    /// One D x 3*D_h matrix per head, columns laid out as [Q | K | V].
    std::vector<Mat> w_qkv;
    Mat w_proj;  // D x D

    std::vector<Mat*> tensors()
    {
        std::vector<Mat*> out;
        for (auto& w : w_qkv) {
            out.push_back(&w);
        }
        out.push_back(&w_proj);
        return out;
    }

    std::vector<const Mat*> tensors() const
    {
        std::vector<const Mat*> out;
        for (const auto& w : w_qkv) {
            out.push_back(&w);
        }
        out.push_back(&w_proj);
        return out;
    }

    friend bool operator==(const MsaParams&, const MsaParams&) = default;
};

struct HeadActivations {
    Mat q, k, v;  // N x D_h
    Mat m;        // N x N attention map
    Mat o;        // N x D_h
};

struct MsaActivations {
    std::vector<HeadActivations> heads;
    Mat y;  // N x D
};

inline void validate_dims(std::size_t n, std::size_t d, std::size_t h)
{
    if (n < 1 || d < 1 || h < 1) {
        throw ConfigError("msa: all dimensions must be >= 1");
    }
    if (d % h != 0) {
        throw ConfigError("msa: head count " + std::to_string(h) + " does not divide embedding dim " +
                          std::to_string(d));
    }
}

/// Uniform init with variance 1/D, deterministic per seed.
inline MsaParams msa_init(std::size_t n, std::size_t d, std::size_t h, std::uint64_t seed)
{
    validate_dims(n, d, h);
    MsaParams p{n, d, h, d / h, {}, {}};
    numkit::Rng rng(numkit::derive_seed({seed, numkit::tag_hash("msa_init")}));
    const double a = std::sqrt(3.0 / static_cast<double>(d));
    std::uniform_real_distribution<double> u(-a, a);
    for (std::size_t i = 0; i < h; ++i) {
        Mat w(d, 3 * p.head_dim);
        for (double& v : w.values()) {
            v = u(rng);
        }
        p.w_qkv.push_back(std::move(w));
    }
    p.w_proj = Mat(d, d);
    for (double& v : p.w_proj.values()) {
        v = u(rng);
    }
    return p;
}

/// 4*N*D^2 + 2*N^2*D multiply-accumulates: QKV projections (3ND^2), attention
/// map (N^2 D), attention-weighted values (N^2 D), output projection (ND^2).
/// Softmax is not counted.
constexpr std::uint64_t msa_flops(std::uint64_t n, std::uint64_t d, std::uint64_t /*heads*/ = 1)
{
    return 4 * n * d * d + 2 * n * n * d;
}

inline void check_input(const MsaParams& p, const Mat& x)
{
    if (x.rows() != p.seq_len || x.cols() != p.dim) {
        throw ShapeError("msa_forward: input " + x.shape_str() + " but layer expects " +
                         std::to_string(p.seq_len) + "x" + std::to_string(p.dim));
    }
}

/// Forward pass keeping every intermediate. `flops`, when given, is
/// incremented by the multiply-accumulates actually executed.
inline MsaActivations msa_forward(const MsaParams& p, const Mat& x, numkit::FlopCounter* flops = nullptr)
{
    check_input(p, x);
    const std::size_t dh = p.head_dim;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    MsaActivations acts;
    std::vector<Mat> outs;
    for (std::size_t h = 0; h < p.heads; ++h) {
        HeadActivations ha;
        Mat qkv = numkit::matmul(x, p.w_qkv[h], flops);
        ha.q = numkit::slice_cols(qkv, 0, dh);
        ha.k = numkit::slice_cols(qkv, dh, dh);
        ha.v = numkit::slice_cols(qkv, 2 * dh, dh);
        ha.m = numkit::softmax_rows(numkit::scale(numkit::matmul_nt(ha.q, ha.k, flops), inv_sqrt));
        ha.o = numkit::matmul(ha.m, ha.v, flops);
        outs.push_back(ha.o);
        acts.heads.push_back(std::move(ha));
    }
    acts.y = numkit::matmul(numkit::concat_cols(outs), p.w_proj, flops);
    return acts;
}

inline Mat msa_predict(const MsaParams& p, const Mat& x) { return msa_forward(p, x).y; }

/// Tape handles for the layer parameters, in MsaParams::tensors() order.
struct MsaVars {
    std::vector<Var> w_qkv;
    Var w_proj;
};

inline MsaVars msa_bind(Tape& t, const MsaParams& p)
{
    MsaVars v;
    for (const auto& w : p.w_qkv) {
        v.w_qkv.push_back(t.param(w));
    }
    v.w_proj = t.param(p.w_proj);
    return v;
}

/// Differentiable forward pass recorded on `x`'s tape.
inline Var msa_forward(const MsaParams& p, const MsaVars& w, Var x)
{
    check_input(p, x.value());
    const std::size_t dh = p.head_dim;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    for (std::size_t h = 0; h < p.heads; ++h) {
        Var qkv = numkit::matmul(x, w.w_qkv[h]);
        Var q = numkit::slice_cols(qkv, 0, dh);
        Var k = numkit::slice_cols(qkv, dh, dh);
        Var v = numkit::slice_cols(qkv, 2 * dh, dh);
        Var m = numkit::softmax_rows(numkit::scale(numkit::matmul_nt(q, k), inv_sqrt));
        outs.push_back(numkit::matmul(m, v));
    }
    Var cat = p.heads == 1 ? outs[0] : numkit::concat_cols(outs);
    return numkit::matmul(cat, w.w_proj);
}

}  // namespace csipred::attention

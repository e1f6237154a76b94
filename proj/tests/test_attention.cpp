#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "csipred/attention.hpp"
#include "csipred/numkit/grad_check.hpp"
#include "oracles.hpp"

using namespace csipred;
using namespace csipred::attention;
using numkit::Mat;

namespace {

Mat permute_rows(const Mat& x, const std::vector<std::size_t>& perm)
{
    Mat out(x.rows(), x.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            out(i, j) = x(perm[i], j);
        }
    }
    return out;
}

}  // namespace

TEST(MsaInit, PaperGeometryGivesTwoHeadsOfSeventyTwo)
{
    const auto p = msa_init(14, 144, 2, 0);
    EXPECT_EQ(p.head_dim, 72u);
    ASSERT_EQ(p.w_qkv.size(), 2u);
    EXPECT_EQ(p.w_qkv[0].rows(), 144u);
    EXPECT_EQ(p.w_qkv[0].cols(), 216u);
    EXPECT_EQ(p.w_proj.rows(), 144u);
    EXPECT_EQ(p.w_proj.cols(), 144u);
}

TEST(MsaInit, DeterministicPerSeed)
{
    EXPECT_EQ(msa_init(5, 8, 2, 3), msa_init(5, 8, 2, 3));
    EXPECT_NE(msa_init(5, 8, 2, 3), msa_init(5, 8, 2, 4));
}

TEST(MsaInit, HeadCountMustDivideDim)
{
    EXPECT_THROW(msa_init(14, 144, 5, 0), ConfigError);
    EXPECT_THROW(msa_init(0, 4, 1, 0), ConfigError);
}

TEST(MsaInit, ZeroMeanUnitOverDVariance)
{
    const auto p = msa_init(4, 64, 4, 9);
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (const Mat* m : p.tensors()) {
        for (double v : m->values()) {
            s += v;
            s2 += v * v;
            ++n;
        }
    }
    const double mean = s / static_cast<double>(n);
    const double var = s2 / static_cast<double>(n) - mean * mean;
    EXPECT_NEAR(mean, 0.0, 0.01);
    EXPECT_NEAR(var * 64.0, 1.0, 0.03);
}

TEST(MsaForward, MatchesDefinitionOracle)
{
    std::mt19937_64 rng(1);
    for (auto [n, d, h] : {std::tuple{4, 8, 2}, {7, 12, 3}, {1, 6, 1}, {14, 16, 4}}) {
        const auto p = msa_init(n, d, h, 11);
        const Mat x = oracle::random_mat(n, d, rng);
        const auto acts = msa_forward(p, x);
        EXPECT_LT(oracle::max_abs_diff(acts.y, oracle::attention_by_definition(p.w_qkv, p.w_proj, x)), 1e-12);
        EXPECT_TRUE(acts.y.same_shape(x));
    }
}

TEST(MsaForward, SingleTokenAttendsToItself)
{
    std::mt19937_64 rng(2);
    const auto p = msa_init(1, 6, 2, 5);
    const Mat x = oracle::random_mat(1, 6, rng);
    const auto acts = msa_forward(p, x);
    Mat concat(1, 6);
    for (std::size_t h = 0; h < 2; ++h) {
        EXPECT_EQ(acts.heads[h].m, Mat{{1.0}});
        for (std::size_t c = 0; c < 3; ++c) {
            concat(0, h * 3 + c) = acts.heads[h].v(0, c);
        }
    }
    EXPECT_LT(oracle::max_abs_diff(acts.y, oracle::triple_loop_matmul(concat, p.w_proj)), 1e-14);
}

TEST(MsaForward, ZeroInputGivesUniformMapAndZeroOutput)
{
    const auto p = msa_init(5, 8, 2, 5);
    const auto acts = msa_forward(p, Mat(5, 8));
    for (const auto& h : acts.heads) {
        EXPECT_EQ(h.q, Mat(5, 4));
        EXPECT_EQ(h.k, Mat(5, 4));
        EXPECT_EQ(h.v, Mat(5, 4));
        for (double v : h.m.values()) {
            EXPECT_DOUBLE_EQ(v, 0.2);
        }
    }
    EXPECT_EQ(acts.y, Mat(5, 8));
}

TEST(MsaForward, ShapeMismatchRejected)
{
    const auto p = msa_init(4, 8, 2, 0);
    EXPECT_THROW(msa_forward(p, Mat(5, 8)), ShapeError);
    EXPECT_THROW(msa_forward(p, Mat(4, 6)), ShapeError);
}

TEST(MsaForward, RowPermutationPermutesOutput)
{
    std::mt19937_64 rng(3);
    const auto p = msa_init(4, 8, 2, 7);
    std::vector<std::size_t> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 24; ++trial) {
        std::shuffle(perm.begin(), perm.end(), rng);
        const Mat x = oracle::random_mat(4, 8, rng, -2, 2);
        const Mat lhs = msa_predict(p, permute_rows(x, perm));
        const Mat rhs = permute_rows(msa_predict(p, x), perm);
        EXPECT_LT(oracle::max_abs_diff(lhs, rhs), 1e-10);
    }
}

TEST(MsaForward, AttentionMapsAreRowStochastic)
{
    std::mt19937_64 rng(4);
    const auto p = msa_init(6, 12, 3, 8);
    for (int trial = 0; trial < 1000; ++trial) {
        const Mat x = oracle::random_mat(6, 12, rng, -3, 3);
        for (const auto& h : msa_forward(p, x).heads) {
            for (std::size_t i = 0; i < h.m.rows(); ++i) {
                double s = 0.0;
                for (double v : h.m.row(i)) {
                    s += v;
                }
                ASSERT_NEAR(s, 1.0, 1e-12);
            }
        }
    }
}

TEST(MsaFlops, ClosedFormValues)
{
    EXPECT_EQ(msa_flops(14, 144), 1'217'664u);
    EXPECT_EQ(msa_flops(1, 1), 6u);
    static_assert(msa_flops(14, 144) == 4 * 14 * 144 * 144 + 2 * 14 * 14 * 144);
    // Doubling N quadruples the quadratic term and doubles the linear one.
    const std::uint64_t n = 9, d = 20;
    const std::uint64_t quad = msa_flops(2 * n, d) - 2 * msa_flops(n, d);
    EXPECT_EQ(quad, 2 * (2 * n) * (2 * n) * d - 2 * (2 * n * n * d));
    EXPECT_EQ(quad, 2 * 2 * n * n * d);
}

TEST(MsaFlops, InstrumentedForwardMatchesClosedForm)
{
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> ns(1, 20), hs(1, 4), dhs(1, 12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = ns(rng), h = hs(rng), d = h * dhs(rng);
        const auto p = msa_init(n, d, h, trial);
        numkit::FlopCounter fc;
        msa_forward(p, oracle::random_mat(n, d, rng), &fc);
        EXPECT_EQ(fc.macs, msa_flops(n, d, h)) << "n=" << n << " d=" << d << " h=" << h;
    }
}

TEST(MsaTape, ForwardMatchesPlainForward)
{
    std::mt19937_64 rng(6);
    const auto p = msa_init(5, 8, 2, 1);
    const Mat x = oracle::random_mat(5, 8, rng);
    numkit::Tape t;
    const auto vars = msa_bind(t, p);
    const Mat y = msa_forward(p, vars, t.constant(x)).value();
    EXPECT_LT(oracle::max_abs_diff(y, msa_predict(p, x)), 1e-14);
}

TEST(MsaTape, MseGradientPassesCheck)
{
    std::mt19937_64 rng(7);
    const auto p0 = msa_init(4, 8, 2, 21);
    const Mat x = oracle::random_mat(4, 8, rng);
    const Mat target = oracle::random_mat(4, 8, rng);

    auto loss_of = [&](std::span<const Mat> th) {
        MsaParams p = p0;
        auto ts = p.tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) {
            *ts[i] = th[i];
        }
        const Mat y = msa_predict(p, x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            s += (y[i] - target[i]) * (y[i] - target[i]);
        }
        return s / static_cast<double>(y.size());
    };
    numkit::Tape t;
    const auto vars = msa_bind(t, p0);
    const auto grads = t.backward(numkit::mse_loss(msa_forward(p0, vars, t.constant(x)), target));
    std::vector<Mat> theta;
    for (const Mat* m : p0.tensors()) {
        theta.push_back(*m);
    }
    EXPECT_LT(numkit::grad_check(loss_of, theta, grads, 1e-6), 1e-5);
}

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "csipred/numkit/adam.hpp"
#include "csipred/numkit/binio.hpp"
#include "csipred/numkit/grad_check.hpp"
#include "csipred/numkit/mat.hpp"
#include "csipred/numkit/rng.hpp"
#include "csipred/numkit/tape.hpp"
#include "csipred/text.hpp"
#include "oracles.hpp"

using namespace csipred;
using namespace csipred::numkit;

namespace {

std::mt19937_64 rng_for(std::uint64_t s) { return std::mt19937_64(s); }

}  // namespace

TEST(Mat, DataLengthMustMatchShape)
{
    EXPECT_THROW(Mat(2, 3, std::vector<double>(5)), ShapeError);
    EXPECT_THROW((Mat{{1, 2}, {3}}), ShapeError);
    const Mat m(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
    EXPECT_EQ(m(1, 0), 4.0);
    EXPECT_EQ(m.size(), 6u);
}

TEST(Mat, ComplexPartsSplit)
{
    CMat c(1, 2);
    c(0, 0) = {1.0, -2.0};
    c(0, 1) = {3.5, 0.25};
    EXPECT_EQ(c.real(), (Mat{{1.0, 3.5}}));
    EXPECT_EQ(c.imag(), (Mat{{-2.0, 0.25}}));
}

TEST(Matmul, IdentityLeavesMatrixUnchanged)
{
    const Mat a{{3.0, -1.0}, {0.5, 7.0}};
    EXPECT_EQ(matmul(Mat::identity(2), a), a);
}

TEST(Matmul, HandEvaluatedSwap)
{
    const Mat a{{1, 2}, {3, 4}};
    const Mat b{{0, 1}, {1, 0}};
    const Mat expect{{2, 1}, {4, 3}};
    EXPECT_EQ(matmul(a, b), expect);
    EXPECT_EQ(oracle::triple_loop_matmul(a, b), expect);
}

TEST(Matmul, ShapeErrorNamesBothOperands)
{
    try {
        matmul(Mat(2, 3), Mat(2, 2));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("2x3"), std::string::npos);
        EXPECT_NE(msg.find("2x2"), std::string::npos);
    }
}

TEST(Matmul, AgreesWithTripleLoopOnRandomShapes)
{
    auto rng = rng_for(1);
    std::uniform_int_distribution<std::size_t> dim(1, 17);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = dim(rng), k = dim(rng), m = dim(rng);
        const Mat a = oracle::random_mat(n, k, rng);
        const Mat b = oracle::random_mat(k, m, rng);
        const Mat ref = oracle::triple_loop_matmul(a, b);
        EXPECT_LT(oracle::max_abs_diff(matmul(a, b), ref), 1e-13);
        EXPECT_LT(oracle::max_abs_diff(matmul_nt(a, oracle::naive_transpose(b)), ref), 1e-13);
        EXPECT_LT(oracle::max_abs_diff(matmul_tn(oracle::naive_transpose(a), b), ref), 1e-13);
    }
}

TEST(Matmul, AssociativeOnRandomChains)
{
    auto rng = rng_for(2);
    for (int trial = 0; trial < 100; ++trial) {
        const Mat a = oracle::random_mat(8, 8, rng), b = oracle::random_mat(8, 8, rng),
                  c = oracle::random_mat(8, 8, rng);
        const Mat left = matmul(matmul(a, b), c);
        const Mat right = matmul(a, matmul(b, c));
        double scale = 0.0;
        for (double v : left.values()) {
            scale = std::max(scale, std::abs(v));
        }
        EXPECT_LT(max_abs_diff(left, right) / scale, 1e-10);
    }
}

TEST(Matmul, FlopCounterCountsMacs)
{
    FlopCounter fc;
    matmul(Mat(3, 4), Mat(4, 5), &fc);
    EXPECT_EQ(fc.macs, 60u);
    matmul_nt(Mat(2, 7), Mat(3, 7), &fc);
    EXPECT_EQ(fc.macs, 60u + 42u);
}

TEST(Softmax, UniformRow)
{
    const Mat s = softmax_rows(Mat{{0, 0, 0}});
    for (double v : s.values()) {
        EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    }
}

TEST(Softmax, LogTwoRow)
{
    const Mat s = softmax_rows(Mat{{std::numbers::ln2, 0.0}});
    EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeEqualEntriesDoNotOverflow)
{
    const Mat s = softmax_rows(Mat{{1000.0, 1000.0}});
    EXPECT_EQ(s[0], 0.5);
    EXPECT_EQ(s[1], 0.5);
}

TEST(Softmax, EmptyInputRejected) { EXPECT_THROW(softmax_rows(Mat()), ShapeError); }

TEST(Softmax, RowsSumToOneOverRandomMatrices)
{
    auto rng = rng_for(3);
    std::uniform_int_distribution<std::size_t> dim(1, 20);
    std::uniform_real_distribution<double> mag(0.1, 300.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const Mat a = oracle::random_mat(dim(rng), dim(rng), rng, -mag(rng), mag(rng));
        const Mat s = softmax_rows(a);
        ASSERT_TRUE(s.all_finite());
        for (std::size_t i = 0; i < s.rows(); ++i) {
            double sum = 0.0;
            for (double v : s.row(i)) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Softmax, MatchesUnshiftedLongDoubleReference)
{
    auto rng = rng_for(4);
    const Mat a = oracle::random_mat(6, 9, rng, -5, 5);
    EXPECT_LT(max_abs_diff(softmax_rows(a), oracle::plain_softmax(a)), 1e-15);
}

TEST(Solve, MatchesGaussJordanInverse)
{
    auto rng = rng_for(5);
    for (int trial = 0; trial < 20; ++trial) {
        Mat a = oracle::random_mat(6, 6, rng);
        for (std::size_t i = 0; i < 6; ++i) {
            a(i, i) += 3.0;
        }
        const Mat inv = solve(a, Mat::identity(6));
        EXPECT_LT(max_abs_diff(inv, oracle::gauss_jordan_inverse(a)), 1e-12);
    }
    EXPECT_THROW(solve(Mat{{1, 2}, {2, 4}}, Mat::identity(2)), NumericError);
}

// ---------------------------------------------------------------------------
// Tape

TEST(Tape, QuadraticGradientIsTwiceTheWeights)
{
    Tape t;
    const Mat w0{{1.5}, {-2.0}, {0.25}};
    Var w = t.param(w0);
    auto g = t.backward(matmul(transpose(w), w));
    ASSERT_EQ(g.size(), 1u);
    EXPECT_EQ(g[0], scale(w0, 2.0));
}

TEST(Tape, SumOfProductGradientIsOuterProduct)
{
    auto rng = rng_for(6);
    const Mat w0 = oracle::random_mat(3, 4, rng);
    const Mat x0 = oracle::random_mat(4, 1, rng);
    Tape t;
    Var w = t.param(w0);
    auto g = t.backward(sum(matmul(w, t.constant(x0))));
    const Mat expect = oracle::triple_loop_matmul(Mat(3, 1, 1.0), oracle::naive_transpose(x0));
    EXPECT_LT(max_abs_diff(g[0], expect), 1e-15);
}

TEST(Tape, ConstantLossGivesZeroGradients)
{
    Tape t;
    t.param(Mat{{1.0, 2.0}});
    auto g = t.backward(sum(t.constant(Mat{{3.0}})));
    EXPECT_EQ(g[0], Mat(1, 2));
}

TEST(Tape, BackwardTwiceIsAUsageError)
{
    Tape t;
    Var w = t.param(Mat{{1.0}});
    Var loss = sum(w);
    t.backward(loss);
    EXPECT_THROW(t.backward(loss), UsageError);
}

TEST(Tape, LossMustBeScalar)
{
    Tape t;
    Var w = t.param(Mat{{1.0, 2.0}});
    EXPECT_THROW(t.backward(w), ShapeError);
}

TEST(Tape, GradientShapesMatchParameters)
{
    auto rng = rng_for(7);
    Tape t;
    Var a = t.param(oracle::random_mat(3, 5, rng));
    Var b = t.param(oracle::random_mat(5, 2, rng));
    Var c = t.param(oracle::random_mat(1, 2, rng));
    auto g = t.backward(mean(add_row(matmul(a, b), c)));
    EXPECT_TRUE(g[0].same_shape(a.value()));
    EXPECT_TRUE(g[1].same_shape(b.value()));
    EXPECT_TRUE(g[2].same_shape(c.value()));
}

// Every primitive inside one composite loss, checked against central
// differences.
TEST(Tape, AllPrimitivesPassGradientCheck)
{
    auto rng = rng_for(8);
    std::vector<Mat> theta{oracle::random_mat(4, 3, rng), oracle::random_mat(3, 4, rng),
                           oracle::random_mat(1, 4, rng, 0.5, 1.5), oracle::random_mat(4, 4, rng)};
    const Mat target = oracle::random_mat(8, 4, rng);

    auto build = [&](Tape& t, std::span<const Mat> th) {
        Var a = t.param(th[0]), b = t.param(th[1]), r = t.param(th[2]), d = t.param(th[3]);
        Var ab = matmul(a, b);                                // 4x4
        Var abt = matmul_nt(ab, d);                           // 4x4
        Var m1 = add(hadamard(tanh(ab), sigmoid(abt)), d);    // 4x4
        Var m2 = sub(softplus(m1), scale(exp(scale(d, 0.3)), 0.5));
        Var m3 = mul_row(add_row(m2, r), r);
        Var m4 = divide(m3, add_scalar(exp(d), 1.0));
        Var sm = softmax_rows(m4);
        Var top = slice_rows(sm, 0, 2);
        Var bottom = slice_rows(transpose(m4), 2, 2);
        const Var halves[] = {slice_cols(top, 0, 2), slice_cols(bottom, 2, 2)};
        const Var stack[] = {concat_cols(halves), m4, slice_rows(sm, 0, 2)};
        Var out = concat_rows(stack);  // 8x4
        return add(mse_loss(out, target), scale(sum(hadamard(r, r)), 0.1));
    };
    auto f = [&](std::span<const Mat> th) {
        Tape t;
        return build(t, th).value()[0];
    };
    Tape t;
    auto g = t.backward(build(t, theta));
    EXPECT_LT(grad_check(f, theta, g), 1e-6);
}

// ---------------------------------------------------------------------------
// grad_check

TEST(GradCheck, QuadraticIsTight)
{
    auto rng = rng_for(9);
    std::vector<Mat> theta{oracle::random_mat(5, 1, rng)};
    auto f = [](std::span<const Mat> th) {
        double s = 0.0;
        for (double v : th[0].values()) {
            s += v * v;
        }
        return s;
    };
    const std::vector<Mat> analytic{scale(theta[0], 2.0)};
    EXPECT_LT(grad_check(f, theta, analytic, 1e-6), 1e-8);
}

TEST(GradCheck, DetectsCorruptedGradient)
{
    auto rng = rng_for(10);
    std::vector<Mat> theta{oracle::random_mat(5, 1, rng)};
    auto f = [](std::span<const Mat> th) {
        double s = 0.0;
        for (double v : th[0].values()) {
            s += v * v;
        }
        return s;
    };
    std::vector<Mat> analytic{scale(theta[0], 2.0)};
    analytic[0][3] += 1.0;
    const auto res = grad_check_detail(f, theta, analytic, 1e-6);
    EXPECT_GT(res.max_rel_error, 0.1);
    EXPECT_EQ(res.worst_index, 3u);
}

TEST(GradCheck, NonFiniteFunctionIsANumericError)
{
    std::vector<Mat> theta{Mat{{1.0}}};
    auto f = [](std::span<const Mat>) { return std::nan(""); };
    const std::vector<Mat> g{Mat{{0.0}}};
    EXPECT_THROW(grad_check(f, theta, g), NumericError);
    auto ok = [](std::span<const Mat>) { return 0.0; };
    EXPECT_THROW(grad_check(ok, theta, g, 0.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments)
{
    const Mat p0{{1.0, -2.0}};
    const Mat g[] = {Mat(1, 2)};

    Mat p = p0;
    Mat* ps[] = {&p};
    const Mat* cps[] = {&p};
    auto fresh = adam_init(cps);
    adam_step(fresh, ps, g);
    EXPECT_EQ(p, p0);
    EXPECT_EQ(fresh.step, 1u);

    auto warm = adam_init(cps);
    warm.m[0] = Mat{{0.5, -0.5}};
    warm.v[0] = Mat{{0.25, 0.25}};
    for (int i = 0; i < 3; ++i) {
        adam_step(warm, ps, g);
    }
    EXPECT_DOUBLE_EQ(warm.m[0][0], 0.5 * std::pow(0.9, 3));
    EXPECT_DOUBLE_EQ(warm.v[0][1], 0.25 * std::pow(0.999, 3));
}

TEST(Adam, FirstStepMagnitudeIsLearningRate)
{
    for (double gv : {3.0, -0.01, 250.0}) {
        Mat p{{0.7}};
        Mat* ps[] = {&p};
        const Mat* cps[] = {&p};
        AdamConfig cfg;
        auto st = adam_init(cps, cfg);
        const Mat g[] = {Mat{{gv}}};
        adam_step(st, ps, g);
        // m_hat = g, v_hat = g^2 after bias correction.
        const double expect = cfg.lr * std::abs(gv) / (std::abs(gv) + cfg.eps);
        EXPECT_NEAR(std::abs(p[0] - 0.7), expect, 1e-15);
        EXPECT_EQ(std::signbit(p[0] - 0.7), gv > 0);
    }
}

TEST(Adam, DeterministicAndStateInvariants)
{
    auto run = [&](std::uint64_t seed) {
        auto r = rng_for(seed);
        Mat p = oracle::random_mat(3, 3, r);
        Mat* ps[] = {&p};
        const Mat* cps[] = {&p};
        auto st = adam_init(cps);
        for (int i = 0; i < 5; ++i) {
            const Mat g[] = {oracle::random_mat(3, 3, r)};
            const std::size_t before = st.step;
            adam_step(st, ps, g);
            EXPECT_EQ(st.step, before + 1);
            for (double v : st.v[0].values()) {
                EXPECT_GE(v, 0.0);
            }
        }
        return p;
    };
    EXPECT_EQ(run(42), run(42));
}

TEST(Adam, ShapeMismatchRejected)
{
    Mat p{{1.0, 2.0}};
    Mat* ps[] = {&p};
    const Mat* cps[] = {&p};
    auto st = adam_init(cps);
    const Mat g[] = {Mat(2, 1)};
    EXPECT_THROW(adam_step(st, ps, g), ShapeError);
}

// ---------------------------------------------------------------------------
// Seeds, binary IO, text

TEST(Rng, DerivedSeedsAreStableAndDistinct)
{
    EXPECT_EQ(derive_seed({1, 2, 3}), derive_seed({1, 2, 3}));
    EXPECT_NE(derive_seed({1, 2, 3}), derive_seed({1, 3, 2}));
    EXPECT_NE(derive_seed({0}), derive_seed({0, 0}));
    EXPECT_NE(tag_hash("taps"), tag_hash("noise"));
}

TEST(BinIo, RoundTripAndTruncation)
{
    const auto dir = oracle::scratch_dir("binio");
    BinWriter w;
    w.bytes("HDR!");
    w.u8(7);
    w.u32(0xdeadbeef);
    w.u64(1ULL << 60);
    w.f64(-0.1);
    w.save((dir / "x.bin").string());
    auto r = BinReader::load((dir / "x.bin").string());
    EXPECT_EQ(r.bytes(4), "HDR!");
    EXPECT_EQ(r.u8(), 7);
    EXPECT_EQ(r.u32(), 0xdeadbeefu);
    EXPECT_EQ(r.u64(), 1ULL << 60);
    EXPECT_EQ(r.f64(), -0.1);
    EXPECT_EQ(r.remaining(), 0u);
    EXPECT_THROW(r.u8(), FormatError);
    EXPECT_THROW(BinReader::load((dir / "missing.bin").string()), IoError);
    std::filesystem::remove_all(dir);
}

TEST(Text, ShortestDoubleFormRoundTrips)
{
    auto rng = rng_for(12);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double v = u(rng) * std::pow(10.0, static_cast<int>(i % 40) - 20);
        EXPECT_EQ(parse_double(format_double(v)), v);
    }
    EXPECT_THROW(parse_double("1.5x"), FormatError);
    EXPECT_THROW(parse_u64("-3"), FormatError);
}

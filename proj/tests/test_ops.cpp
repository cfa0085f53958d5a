#include <gtest/gtest.h>

#include <cmath>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "snet/ops.hpp"

using namespace snet;
using snet::testing::check_gradients;
using snet::testing::make_weights;
using snet::testing::random_tensor;
using snet::testing::weighted_sum;
namespace op = snet::ops;
namespace oracle = snet::testing::oracle;

namespace {
Tensor ones(Shape s) { return Tensor::full(std::move(s), 1.0); }
}  // namespace

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, OnesKernelCountsOverlap) {
    Tensor in = ones({1, 1, 3, 3});
    Tensor ker = ones({1, 1, 3, 3});
    Tensor out = op::conv2d(in, ker, Tensor(), 1, 1);
    ASSERT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
    EXPECT_DOUBLE_EQ(out.data()[4], 9.0);  // center
    EXPECT_DOUBLE_EQ(out.data()[0], 4.0);  // corners
    EXPECT_DOUBLE_EQ(out.data()[2], 4.0);
    EXPECT_DOUBLE_EQ(out.data()[6], 4.0);
    EXPECT_DOUBLE_EQ(out.data()[8], 4.0);
}

TEST(Conv2d, CenteredDeltaKernelIsIdentity) {
    Rng rng(11);
    Tensor in = random_tensor({2, 3, 5, 5}, rng, -2.0, 2.0, false);
    Tensor ker = Tensor::zeros({3, 3, 3, 3});
    for (int oc = 0; oc < 3; ++oc) {
        // delta at kernel center of the matching input channel
        ker.data()[static_cast<std::size_t>(((oc * 3 + oc) * 3 + 1) * 3 + 1)] = 1.0;
    }
    Tensor out = op::conv2d(in, ker, Tensor(), 1, 1);
    ASSERT_EQ(out.shape(), in.shape());
    for (std::size_t i = 0; i < in.data().size(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], in.data()[i]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
    Rng rng(12);
    Tensor in = random_tensor({2, 3, 8, 8}, rng, -1.0, 1.0, false);
    Tensor ker = random_tensor({4, 3, 3, 3}, rng, -1.0, 1.0, false);
    Tensor bias = random_tensor({4}, rng, -0.5, 0.5, false);
    Tensor out = op::conv2d(in, ker, bias, 1, 1);
    const auto ref = oracle::conv2d(in.data(), 2, 3, 8, 8, ker.data(), 4, 3, 3, bias.data(), 1, 1, 1);
    ASSERT_EQ(out.data().size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(out.data()[i], ref[i], 1e-6 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST(Conv2d, StridedAndGroupedMatchOracle) {
    Rng rng(13);
    for (auto [stride, pad, groups] : {std::tuple<int, int, int>{2, 1, 1}, {1, 0, 2}, {2, 2, 4}}) {
        Tensor in = random_tensor({2, 4, 9, 9}, rng, -1.0, 1.0, false);
        Tensor ker = random_tensor({8, 4 / groups, 3, 3}, rng, -1.0, 1.0, false);
        Tensor out = op::conv2d(in, ker, Tensor(), stride, pad, groups);
        const auto ref =
            oracle::conv2d(in.data(), 2, 4, 9, 9, ker.data(), 8, 3, 3, {}, stride, pad, groups);
        ASSERT_EQ(out.data().size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-9);
    }
}

TEST(Conv2d, DepthwiseEqualsPerChannelCorrelation) {
    Rng rng(14);
    const std::int64_t channels = 3;
    Tensor in = random_tensor({1, channels, 6, 6}, rng, -1.0, 1.0, false);
    Tensor ker = random_tensor({channels, 1, 3, 3}, rng, -1.0, 1.0, false);
    Tensor out = op::conv2d(in, ker, Tensor(), 1, 1, channels);
    for (std::int64_t c = 0; c < channels; ++c) {
        std::vector<double> one_in(in.data().begin() + c * 36, in.data().begin() + (c + 1) * 36);
        std::vector<double> one_ker(ker.data().begin() + c * 9, ker.data().begin() + (c + 1) * 9);
        const auto ref = oracle::conv2d(one_in, 1, 1, 6, 6, one_ker, 1, 3, 3, {}, 1, 1, 1);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            EXPECT_NEAR(out.data()[static_cast<std::size_t>(c) * 36 + i], ref[i], 1e-12);
        }
    }
}

TEST(Conv2d, ShapeErrors) {
    Tensor in = ones({1, 3, 8, 8});
    EXPECT_THROW(op::conv2d(in, ones({4, 2, 3, 3}), Tensor(), 1, 1), ConfigError);       // channel mismatch
    EXPECT_THROW(op::conv2d(in, ones({4, 3, 3, 3}), Tensor(), 1, 1, 2), ConfigError);    // 3 % 2 != 0
    EXPECT_THROW(op::conv2d(in, ones({4, 3, 11, 11}), Tensor(), 1, 1), ConfigError);     // kernel too large
    EXPECT_THROW(op::conv2d(in, ones({4, 3, 3, 3}), ones({5}), 1, 1), ConfigError);      // bad bias
}

// ---------------------------------------------------------------- matmul

TEST(Matmul, IdentityTimesXIsX) {
    Rng rng(21);
    Tensor x = random_tensor({3, 5}, rng, -2.0, 2.0, false);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.data()[static_cast<std::size_t>(i * 3 + i)] = 1.0;
    Tensor out = op::matmul(eye, x);
    for (std::size_t i = 0; i < x.data().size(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], x.data()[i]);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    Rng rng(22);
    Tensor a = random_tensor({2, 3}, rng, -1.0, 1.0, false);
    Tensor b = random_tensor({3, 2}, rng, -1.0, 1.0, false);
    Tensor out = op::matmul(a, b);
    const auto ref = oracle::matmul(a.data(), b.data(), 2, 3, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-12);
}

TEST(Matmul, TimesZeroMatrixIsZero) {
    Rng rng(23);
    Tensor a = random_tensor({4, 3}, rng, -1.0, 1.0, false);
    Tensor z = Tensor::zeros({3, 2});
    Tensor out = op::matmul(a, z);
    for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Matmul, DimensionMismatchThrows) {
    EXPECT_THROW(op::matmul(ones({2, 3}), ones({2, 3})), ConfigError);
}

// ---------------------------------------------------------------- softmax

TEST(Softmax, SymmetricPair) {
    Tensor x = Tensor::from_data({2}, {0.0, 0.0});
    Tensor p = op::softmax(x, 0);
    EXPECT_NEAR(p.data()[0], 0.5, 1e-12);
    EXPECT_NEAR(p.data()[1], 0.5, 1e-12);
}

TEST(Softmax, ShiftInvariance) {
    Rng rng(31);
    Tensor x = random_tensor({3, 7}, rng, -3.0, 3.0, false);
    Tensor shifted = op::add_scalar(x, 17.5);
    Tensor p0 = op::softmax(x, 1);
    Tensor p1 = op::softmax(shifted, 1);
    for (std::size_t i = 0; i < p0.data().size(); ++i) EXPECT_NEAR(p0.data()[i], p1.data()[i], 1e-9);
}

TEST(Softmax, MatchesExpNormalizeOracle) {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor p = op::softmax(x, 0);
    const auto ref = oracle::softmax_row({1.0, 2.0, 3.0});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.data()[i], ref[i], 1e-15);
}

TEST(Softmax, RowsSumToOneAndStayPositive) {
    Rng rng(32);
    Tensor x = random_tensor({4, 9}, rng, -700.0, 700.0, false);  // extreme logits
    Tensor p = op::softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 9; ++c) {
            const double v = p.data()[static_cast<std::size_t>(r * 9 + c)];
            EXPECT_GT(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

// ---------------------------------------------------------------- batch_norm

namespace {
struct BnBuffers {
    Tensor scale, shift, rm, rv;
    explicit BnBuffers(std::int64_t c, bool requires_grad = false)
        : scale(Tensor::full({c}, 1.0, requires_grad)),
          shift(Tensor::zeros({c}, requires_grad)),
          rm(Tensor::zeros({c})),
          rv(Tensor::full({c}, 1.0)) {}
};
}  // namespace

TEST(BatchNorm, TrainModeNormalizesPerChannel) {
    Rng rng(41);
    Tensor x = random_tensor({4, 3, 5, 5}, rng, -4.0, 4.0, false);
    BnBuffers bn(3);
    Tensor y = op::batch_norm(x, bn.scale, bn.shift, bn.rm, bn.rv, 0.1, 1e-5, Mode::Train);
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (int b = 0; b < 4; ++b)
            for (int s = 0; s < 25; ++s) mean += y.data()[static_cast<std::size_t>((b * 3 + c) * 25 + s)];
        mean /= 100.0;
        for (int b = 0; b < 4; ++b)
            for (int s = 0; s < 25; ++s) {
                const double d = y.data()[static_cast<std::size_t>((b * 3 + c) * 25 + s)] - mean;
                var += d * d;
            }
        var /= 100.0;
        EXPECT_LE(std::abs(mean), 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(BatchNorm, ConstantChannelCollapsesToShift) {
    Tensor x = Tensor::full({2, 2, 3, 3}, 7.25);
    BnBuffers bn(2);
    bn.shift.data() = {0.5, -1.5};
    Tensor y = op::batch_norm(x, bn.scale, bn.shift, bn.rm, bn.rv, 0.1, 1e-5, Mode::Train);
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 2; ++c)
            for (int s = 0; s < 9; ++s) {
                EXPECT_NEAR(y.data()[static_cast<std::size_t>((b * 2 + c) * 9 + s)],
                            bn.shift.data()[static_cast<std::size_t>(c)], 1e-9);
            }
}

TEST(BatchNorm, MatchesTwoPassOracle) {
    Rng rng(42);
    Tensor x = random_tensor({4, 3, 5, 5}, rng, -2.0, 2.0, false);
    BnBuffers bn(3);
    bn.scale.data() = {1.5, 0.5, 2.0};
    bn.shift.data() = {0.1, -0.2, 0.3};
    Tensor y = op::batch_norm(x, bn.scale, bn.shift, bn.rm, bn.rv, 0.1, 1e-5, Mode::Train);
    const auto ref = oracle::batch_norm(x.data(), 4, 3, 25, bn.scale.data(), bn.shift.data(), 1e-5);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-6);
}

TEST(BatchNorm, RunningStatsOnlyMoveInTrainMode) {
    Rng rng(43);
    Tensor x = random_tensor({2, 2, 4, 4}, rng, -1.0, 5.0, false);
    BnBuffers bn(2);
    op::batch_norm(x, bn.scale, bn.shift, bn.rm, bn.rv, 0.5, 1e-5, Mode::Eval);
    EXPECT_DOUBLE_EQ(bn.rm.data()[0], 0.0);
    EXPECT_DOUBLE_EQ(bn.rv.data()[0], 1.0);
    op::batch_norm(x, bn.scale, bn.shift, bn.rm, bn.rv, 0.5, 1e-5, Mode::Train);
    EXPECT_NE(bn.rm.data()[0], 0.0);
    EXPECT_NE(bn.rv.data()[0], 1.0);
}

// ---------------------------------------------------------------- pointwise & layout

TEST(Gelu, ZeroMapsToZero) {
    Tensor y = op::gelu(Tensor::zeros({1}));
    EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
}

TEST(Gelu, MatchesTanhFormulaOracle) {
    const double x = 3.0;
    Tensor y = op::gelu(Tensor::full({1}, x));
    const double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
    const double expected = 0.5 * x * (1.0 + std::tanh(u));
    EXPECT_NEAR(y.data()[0], expected, 1e-6);
}

TEST(Layout, FlattenUnflattenAreBitwiseInverse) {
    Rng rng(51);
    Tensor x = random_tensor({2, 5, 4, 3}, rng, -9.0, 9.0, false);
    Tensor tokens = op::flatten_tokens(x);
    ASSERT_EQ(tokens.shape(), (Shape{2, 12, 5}));
    Tensor back = op::unflatten_tokens(tokens, 4, 3);
    ASSERT_EQ(back.shape(), x.shape());
    EXPECT_EQ(back.data(), x.data());  // bitwise
}

TEST(Layout, UnflattenRejectsBadTokenCount) {
    Tensor t = ones({1, 12, 5});
    EXPECT_THROW(op::unflatten_tokens(t, 5, 3), ConfigError);
}

TEST(Layout, ConcatSplitAreBitwiseInverse) {
    Rng rng(52);
    Tensor a = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0, false);
    Tensor b = random_tensor({2, 5, 4, 4}, rng, -1.0, 1.0, false);
    Tensor c = op::concat_channels({a, b});
    ASSERT_EQ(c.shape(), (Shape{2, 8, 4, 4}));
    auto parts = op::split_channels(c, {3, 5});
    EXPECT_EQ(parts[0].data(), a.data());
    EXPECT_EQ(parts[1].data(), b.data());
}

TEST(Layout, UpsampleNearestRepeatsPixels) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor y = op::upsample_nearest(x, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
    EXPECT_DOUBLE_EQ(y.data()[0], 1.0);
    EXPECT_DOUBLE_EQ(y.data()[3], 2.0);
    EXPECT_DOUBLE_EQ(y.data()[5], 1.0);
    EXPECT_DOUBLE_EQ(y.data()[15], 4.0);
}

TEST(Ops, FiniteOnLargeMagnitudeInputs) {
    Rng rng(53);
    Tensor x = random_tensor({2, 4, 6, 6}, rng, -1e3, 1e3, false);
    op::gelu(x).check_finite("gelu");
    op::sigmoid(x).check_finite("sigmoid");
    op::softmax(x, 1).check_finite("softmax");
    BnBuffers bn(4);
    op::batch_norm(x, bn.scale, bn.shift, bn.rm, bn.rv, 0.1, 1e-5, Mode::Train).check_finite("batch_norm");
    Tensor k = random_tensor({4, 4, 3, 3}, rng, -1e3, 1e3, false);
    op::conv2d(x, k, Tensor(), 1, 1).check_finite("conv2d");
}

// ---------------------------------------------------------------- gradient checks

TEST(GradCheck, ElementwiseAndReductions) {
    Rng rng(61);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng, 0.5, 2.0);  // away from zero for div
    const auto w = make_weights(12, rng);

    auto combos = std::vector<std::pair<const char*, std::function<Tensor()>>>{
        {"add", [&] { return weighted_sum(op::add(a, b), w); }},
        {"sub", [&] { return weighted_sum(op::sub(a, b), w); }},
        {"mul", [&] { return weighted_sum(op::mul(a, b), w); }},
        {"div", [&] { return weighted_sum(op::div(a, b), w); }},
        {"add_scalar", [&] { return weighted_sum(op::add_scalar(a, 1.7), w); }},
        {"mul_scalar", [&] { return weighted_sum(op::mul_scalar(a, -2.3), w); }},
        {"exp", [&] { return weighted_sum(op::exp(a), w); }},
        {"sigmoid", [&] { return weighted_sum(op::sigmoid(a), w); }},
        {"gelu", [&] { return weighted_sum(op::gelu(a), w); }},
        {"log_b", [&] { return weighted_sum(op::log(b), w); }},
        {"sum_all", [&] { return op::sum_all(op::mul(a, b)); }},
        {"mean_all", [&] { return op::mean_all(op::mul(a, b)); }},
    };
    for (auto& [name, fn] : combos) {
        auto res = check_gradients(fn, {a, b});
        EXPECT_LE(res.max_rel_error, 1e-4) << name << ": " << res.worst_location;
    }
}

TEST(GradCheck, MatmulFamily) {
    Rng rng(62);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    const auto w = make_weights(15, rng);
    auto res = check_gradients([&] { return weighted_sum(op::matmul(a, b), w); }, {a, b});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor ba = random_tensor({2, 3, 4}, rng);
    Tensor bb = random_tensor({2, 4, 5}, rng);
    const auto w2 = make_weights(30, rng);
    res = check_gradients([&] { return weighted_sum(op::bmm(ba, bb), w2); }, {ba, bb});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    const auto wt24 = make_weights(24, rng);
    res = check_gradients([&] { return weighted_sum(op::transpose_last2(ba), wt24); }, {ba});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor wt = random_tensor({4, 6}, rng);
    Tensor bias = random_tensor({6}, rng);
    const auto w3 = make_weights(36, rng);
    res = check_gradients([&] { return weighted_sum(op::linear(x, wt, bias), w3); }, {x, wt, bias});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;
}

TEST(GradCheck, Conv2dAllParameterizations) {
    Rng rng(63);
    struct Case {
        std::int64_t cin, cout, stride, pad, groups;
    };
    for (const Case cs : {Case{3, 4, 1, 1, 1}, Case{4, 8, 2, 1, 2}, Case{4, 4, 1, 1, 4}}) {
        Tensor in = random_tensor({2, cs.cin, 6, 6}, rng);
        Tensor ker = random_tensor({cs.cout, cs.cin / cs.groups, 3, 3}, rng);
        Tensor bias = random_tensor({cs.cout}, rng);
        Tensor probe = op::conv2d(in, ker, bias, cs.stride, cs.pad, cs.groups);
        const auto w = make_weights(probe.numel(), rng);
        auto res = check_gradients(
            [&] { return weighted_sum(op::conv2d(in, ker, bias, cs.stride, cs.pad, cs.groups), w); },
            {in, ker, bias});
        EXPECT_LE(res.max_rel_error, 1e-4)
            << "groups=" << cs.groups << " stride=" << cs.stride << ": " << res.worst_location;
    }
}

TEST(GradCheck, SoftmaxAndBatchNorm) {
    Rng rng(64);
    Tensor x = random_tensor({2, 5}, rng);
    const auto w = make_weights(10, rng);
    auto res = check_gradients([&] { return weighted_sum(op::softmax(x, 1), w); }, {x});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor xb = random_tensor({3, 2, 4, 4}, rng);
    BnBuffers bn(2, true);
    const auto wb = make_weights(96, rng);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
        // fresh running stats per call so eval stays fixed
        Tensor rm = random_tensor({2}, rng, -0.2, 0.2, false);
        Tensor rv = random_tensor({2}, rng, 0.5, 1.5, false);
        auto res2 = check_gradients(
            [&] { return weighted_sum(op::batch_norm(xb, bn.scale, bn.shift, rm, rv, 0.0, 1e-5, mode), wb); },
            {xb, bn.scale, bn.shift});
        EXPECT_LE(res2.max_rel_error, 1e-4)
            << (mode == Mode::Train ? "train" : "eval") << ": " << res2.worst_location;
    }
}

TEST(GradCheck, LayoutOps) {
    Rng rng(65);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    const auto w48 = make_weights(96, rng);
    auto res = check_gradients([&] { return weighted_sum(op::flatten_tokens(x), w48); }, {x});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor tokens = random_tensor({2, 16, 3}, rng);
    res = check_gradients([&] { return weighted_sum(op::unflatten_tokens(tokens, 4, 4), w48); }, {tokens});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    res = check_gradients([&] { return weighted_sum(op::reshape(x, {6, 16}), w48); }, {x});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor small = random_tensor({1, 2, 3, 3}, rng);
    const auto w72 = make_weights(72, rng);
    res = check_gradients([&] { return weighted_sum(op::upsample_nearest(small, 2), w72); }, {small});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor a = random_tensor({2, 2, 3, 3}, rng);
    Tensor b = random_tensor({2, 3, 3, 3}, rng);
    const auto w90 = make_weights(90, rng);
    res = check_gradients([&] { return weighted_sum(op::concat_channels({a, b}), w90); }, {a, b});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor big = random_tensor({2, 5, 3, 3}, rng);
    const auto wpart = make_weights(27 * 2, rng);
    res = check_gradients(
        [&] {
            auto parts = op::split_channels(big, {2, 3});
            return op::add(weighted_sum(parts[0], std::vector<double>(wpart.begin(), wpart.begin() + 36)),
                           weighted_sum(parts[1], std::vector<double>(wpart.begin(), wpart.begin() + 54)));
        },
        {big});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor xb = random_tensor({3, 4, 2}, rng);
    Tensor p = random_tensor({4, 2}, rng);
    const auto w24 = make_weights(24, rng);
    res = check_gradients([&] { return weighted_sum(op::add_broadcast0(xb, p), w24); }, {xb, p});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;

    Tensor ch = random_tensor({2, 3, 4}, rng);
    const auto w3 = make_weights(3, rng);
    res = check_gradients([&] { return weighted_sum(op::channel_sums(ch), w3); }, {ch});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;
}

TEST(GradCheck, BceWithLogits) {
    Rng rng(66);
    Tensor logits = random_tensor({2, 3, 2, 2}, rng, -3.0, 3.0);
    Tensor targets = random_tensor({2, 3, 2, 2}, rng, 0.0, 1.0, false);
    auto res = check_gradients([&] { return op::bce_with_logits(logits, targets); }, {logits});
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_location;
}

#include <gtest/gtest.h>

#include <cmath>

#include "retloc/gradcheck.hpp"
#include "retloc/params.hpp"
#include "retloc/random.hpp"
#include "retloc/tensor.hpp"

using namespace retloc;

namespace {

Tensor random_param(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(detail::shape_numel(shape));
    for (double& e : v) e = rng.uniform(lo, hi);
    return Tensor::param(std::move(shape), std::move(v));
}

}  // namespace

TEST(Tensor, MatmulIdentity) {
    Tensor a = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
    Tensor c = matmul(a, b);
    EXPECT_EQ(c.data(), (std::vector<double>{3, 4, 5, 6}));
}

TEST(Tensor, MatmulHandArithmetic) {
    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    Tensor c = matmul(a, b);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_DOUBLE_EQ(c.at(0), 11.0);
}

TEST(Tensor, MatmulShapeMismatchNamesBothShapes) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Tensor, MatmulGradMatchesFiniteDifferences) {
    Rng rng(42);
    Tensor a = random_param(rng, {3, 4});
    Tensor b = random_param(rng, {4, 2});
    auto loss = [&] { return sum_all(relu(matmul(a, b))); };
    auto res = grad_check(loss, {{"a", a}, {"b", b}});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst_param << "[" << res.worst_index
                                     << "] analytic=" << res.analytic
                                     << " numeric=" << res.numeric;
}

TEST(Tensor, SoftmaxUniformRow) {
    Tensor x = Tensor::from({1, 3}, {0, 0, 0});
    Tensor y = softmax_rows(x);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y.at(0, j), 1.0 / 3.0, 1e-15);
}

TEST(Tensor, SoftmaxStableUnderLargeInputs) {
    Tensor x = Tensor::from({1, 2}, {1000, 0});
    Tensor y = softmax_rows(x);
    EXPECT_NEAR(y.at(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(y.at(0, 1), 0.0, 1e-12);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_param(rng, {5, 9}, -10.0, 10.0);
        Tensor y = softmax_rows(x);
        for (std::size_t i = 0; i < 5; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                sum += y.at(i, j);
                EXPECT_GE(y.at(i, j), 0.0);
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Tensor, SoftmaxEmptyTensorThrows) {
    EXPECT_THROW(softmax_rows(Tensor::zeros({0, 3})), DimensionError);
}

TEST(Tensor, SoftmaxGradcheck) {
    Rng rng(3);
    Tensor x = random_param(rng, {4, 6});
    Tensor w = random_param(rng, {4, 6});
    auto loss = [&] { return sum_all(hadamard(softmax_rows(x), w)); };
    auto res = grad_check(loss, {{"x", x}});
    EXPECT_LT(res.max_rel_err, 1e-6);
}

TEST(Tensor, LayerNormDefinition) {
    Tensor x = Tensor::from({1, 3}, {1, 2, 3});
    Tensor gamma = Tensor::from({3}, {1, 1, 1});
    Tensor beta = Tensor::from({3}, {0, 0, 0});
    Tensor y = layer_norm(x, gamma, beta, 1e-8);
    double mean = (y.at(0, 0) + y.at(0, 1) + y.at(0, 2)) / 3.0;
    double var = 0.0;
    for (std::size_t j = 0; j < 3; ++j) var += (y.at(0, j) - mean) * (y.at(0, j) - mean);
    var /= 3.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(Tensor, LayerNormConstantRowIsZeros) {
    Tensor x = Tensor::from({1, 4}, {5, 5, 5, 5});
    Tensor y = layer_norm(x, Tensor::from({4}, {1, 1, 1, 1}),
                          Tensor::zeros({4}), 1e-5);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(0, j), 0.0, 1e-12);
}

TEST(Tensor, LayerNormZeroDimThrows) {
    EXPECT_THROW(layer_norm(Tensor::zeros({2, 0}), Tensor::zeros({0}),
                            Tensor::zeros({0})),
                 DimensionError);
}

TEST(Tensor, LayerNormGradcheck) {
    Rng rng(11);
    Tensor x = random_param(rng, {3, 5});
    Tensor gamma = random_param(rng, {5}, 0.5, 1.5);
    Tensor beta = random_param(rng, {5});
    Tensor w = random_param(rng, {3, 5});
    auto loss = [&] { return sum_all(hadamard(layer_norm(x, gamma, beta), w)); };
    auto res = grad_check(loss, {{"x", x}, {"gamma", gamma}, {"beta", beta}});
    EXPECT_LT(res.max_rel_err, 1e-5)
        << res.worst_param << " analytic=" << res.analytic
        << " numeric=" << res.numeric;
}

TEST(Tensor, InnerProductHandArithmetic) {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {3, 4});
    EXPECT_DOUBLE_EQ(dot(a, b).value(), 11.0);
}

TEST(Tensor, MeanPoolAxis0) {
    Tensor x = Tensor::from({2, 2}, {2, 4, 6, 8});
    Tensor y = mean_axis(x, 0);
    EXPECT_DOUBLE_EQ(y.at(0), 4.0);
    EXPECT_DOUBLE_EQ(y.at(1), 6.0);
}

TEST(Tensor, ReluSubgradientAtZeroIsZero) {
    Tensor x = Tensor::param({3}, {-1.0, 0.0, 2.0});
    Tape tape;
    Tensor y = sum_all(relu(x));
    tape.backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);  // documented convention
    EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
}

TEST(Tensor, MaxPoolTiesRouteToLowestIndex) {
    Tensor x = Tensor::param({4}, {3.0, 7.0, 7.0, 1.0});
    Tape tape;
    Tensor y = sum_all(max_axis(x, 0));
    tape.backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(Tensor, BackwardAnalyticQuadratic) {
    Tensor w = Tensor::param({2}, {1, 2});
    Tape tape;
    Tensor loss = dot(w, w);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(w.grad()[1], 4.0);
}

TEST(Tensor, UnusedParameterHasZeroGrad) {
    Tensor w = Tensor::param({2}, {1, 2});
    Tensor unused = Tensor::param({3}, {1, 1, 1});
    Tape tape;
    Tensor loss = dot(w, w);
    tape.backward(loss);
    for (double g : unused.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(Tensor, GradAccumulatesAcrossFanOut) {
    Tensor w = Tensor::param({1}, {3.0});
    Tape tape;
    Tensor y = add(hadamard(w, w), hadamard(w, w));  // 2w² → dy/dw = 4w = 12
    tape.backward(sum_all(y));
    EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);
}

TEST(Tensor, NonScalarLossThrows) {
    Tensor w = Tensor::param({2}, {1, 2});
    Tape tape;
    Tensor y = relu(w);
    EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Tensor, BackwardReuseWithoutResetThrows) {
    Tensor w = Tensor::param({1}, {2.0});
    Tape tape;
    Tensor loss = dot(w, w);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), UsageError);
    tape.reset();  // after reset a fresh computation works
    Tensor loss2 = dot(w, w);
    tape.backward(loss2);
}

TEST(Tensor, NestedTapeThrows) {
    Tape tape;
    EXPECT_THROW(Tape inner, UsageError);
}

TEST(Tensor, TapeReplayIsBitIdentical) {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor a = random_param(rng, {4, 4});
        Tensor b = random_param(rng, {4, 4});
        Tape tape;
        Tensor loss = mean_all(relu(matmul(a, b)));
        tape.backward(loss);
        std::vector<double> out = {loss.value()};
        out.insert(out.end(), a.grad().begin(), a.grad().end());
        return out;
    };
    EXPECT_EQ(run(99), run(99));
}

TEST(Tensor, ConcatAndSliceRoundTrip) {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 3}, {5, 6, 7, 8, 9, 10});
    Tensor c = concat({a, b}, 1);
    ASSERT_EQ(c.shape(), (Shape{2, 5}));
    Tensor back = slice_last(c, 2, 5);
    EXPECT_EQ(back.data(), b.data());
}

TEST(Tensor, ConcatGradcheck) {
    Rng rng(5);
    Tensor a = random_param(rng, {2, 3});
    Tensor b = random_param(rng, {2, 2});
    Tensor w = random_param(rng, {2, 5});
    auto loss = [&] { return sum_all(hadamard(concat({a, b}, 1), w)); };
    auto res = grad_check(loss, {{"a", a}, {"b", b}});
    EXPECT_LT(res.max_rel_err, 1e-8);
}

TEST(Tensor, GatherRowsScatterAddsOnRepeats) {
    Tensor x = Tensor::param({3, 2}, {1, 2, 3, 4, 5, 6});
    Tape tape;
    Tensor g = gather_rows(x, {1, 1, 0});
    tape.backward(sum_all(g));
    EXPECT_DOUBLE_EQ(x.grad()[0 * 2 + 0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[1 * 2 + 0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[2 * 2 + 0], 0.0);
}

TEST(Tensor, LogSumExpMatchesDirectEvaluation) {
    Tensor x = Tensor::from({2, 3}, {0, 1, 2, -1, -2, -3});
    Tensor y = logsumexp_axis(x, 1);
    for (std::size_t i = 0; i < 2; ++i) {
        double direct = 0.0;
        for (std::size_t j = 0; j < 3; ++j) direct += std::exp(x.at(i, j));
        EXPECT_NEAR(y.at(i), std::log(direct), 1e-12);
    }
}

TEST(Tensor, LogSumExpGradcheck) {
    Rng rng(13);
    Tensor x = random_param(rng, {3, 4});
    Tensor w0 = random_param(rng, {3});
    Tensor w1 = random_param(rng, {4});
    auto loss = [&] {
        return add(dot(logsumexp_axis(x, 1), w0), dot(logsumexp_axis(x, 0), w1));
    };
    auto res = grad_check(loss, {{"x", x}});
    EXPECT_LT(res.max_rel_err, 1e-6);
}

TEST(Tensor, MixedOpsGradcheck) {
    Rng rng(17);
    Tensor a = random_param(rng, {3, 4});
    Tensor b = random_param(rng, {4});
    Tensor z = random_param(rng, {1});
    auto loss = [&] {
        Tensor x = add_rowvec(a, b);
        Tensor y = add_colvec(x, mean_axis(x, 1));
        Tensor bz = broadcast_scalar(z, {3, 4});
        Tensor m = max_axis(hadamard(y, bz), 0);
        return mean_all(exp(scale(m, 0.3)));
    };
    auto res = grad_check(loss, {{"a", a}, {"b", b}, {"z", z}});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst_param;
}

TEST(Tensor, ClampMinLogGradcheck) {
    Rng rng(19);
    Tensor x = random_param(rng, {6}, 0.1, 2.0);
    auto loss = [&] { return sum_all(log(clamp_min(x, 1e-12))); };
    auto res = grad_check(loss, {{"x", x}});
    EXPECT_LT(res.max_rel_err, 1e-6);
}

// -- grad_check self-tests ---------------------------------------------------

TEST(GradCheck, QuadraticIsExact) {
    Tensor w = Tensor::param({1}, {3.0});
    auto loss = [&] { return hadamard(w, w); };
    auto res = grad_check(loss, {{"w", w}}, 1e-5);
    EXPECT_LT(res.max_rel_err, 1e-8);
}

TEST(GradCheck, SoftmaxCrossEntropyToy) {
    Rng rng(23);
    Tensor logits = random_param(rng, {4, 5});
    std::vector<std::size_t> targets = {1, 4, 0, 2};
    auto loss = [&] {
        Tensor p = softmax_rows(logits);
        std::vector<std::size_t> flat;
        for (std::size_t i = 0; i < targets.size(); ++i)
            flat.push_back(i * 5 + targets[i]);
        return scale(mean_all(log(clamp_min(gather_elems(p, flat), 1e-12))), -1.0);
    };
    auto res = grad_check(loss, {{"logits", logits}});
    EXPECT_LT(res.max_rel_err, 1e-5);
}

TEST(GradCheck, DetectsCorruptedBackwardRule) {
    // A deliberately wrong gradient: f = 2·Σw² reported through a path that
    // only backpropagates one of the two terms.
    Tensor w = Tensor::param({3}, {0.7, -0.4, 1.1});
    auto loss = [&] {
        Tensor tracked = hadamard(w, w);
        // Detached copy: same value, invisible to the tape.
        Tensor detached = Tensor::from({3}, tracked.data());
        return add(sum_all(tracked), sum_all(detached));
    };
    auto res = grad_check(loss, {{"w", w}});
    EXPECT_GT(res.max_rel_err, 1e-2);
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    return RUN_ALL_TESTS();
}

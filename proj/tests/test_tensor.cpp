#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "contnet/rng.hpp"
#include "contnet/tensor.hpp"

using contnet::backward;
using contnet::GradTape;
using contnet::Shape;
using contnet::Tensor;

namespace {

Tensor<double> random_tensor(Shape shape, contnet::Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(contnet::numel_of(shape)));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor<double>::from_values(std::move(shape), std::move(v));
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    auto eye = Tensor<double>::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto b = Tensor<double>::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
    auto c = contnet::matmul(eye, b);
    EXPECT_EQ(c.shape(), (Shape{3, 2}));
    for (std::size_t i = 0; i < b.values().size(); ++i) EXPECT_DOUBLE_EQ(c.values()[i], b.values()[i]);
}

TEST(Matmul, HandInnerProduct) {
    auto a = Tensor<double>::from_values({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from_values({2, 1}, {1, 1});
    auto c = contnet::matmul(a, b);
    EXPECT_DOUBLE_EQ(c.values()[0], 3.0);
    EXPECT_DOUBLE_EQ(c.values()[1], 7.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    try {
        contnet::matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const contnet::ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x2]"), std::string::npos);
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    contnet::Rng rng(1);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    const double err = contnet::grad_check([&] { return contnet::sum(contnet::matmul(a, b)); }, a);
    EXPECT_LT(err, 1e-6);
    const double errb = contnet::grad_check([&] { return contnet::sum(contnet::matmul(a, b)); }, b);
    EXPECT_LT(errb, 1e-6);
}

TEST(Matmul, BatchedMatchesPerSlice) {
    contnet::Rng rng(2);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 4, 5}, rng);
    auto c = contnet::matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 3, 5}));
    for (int s = 0; s < 2; ++s) {
        auto as = Tensor<double>::from_values(
            {3, 4}, std::vector<double>(a.values().begin() + s * 12, a.values().begin() + (s + 1) * 12));
        auto bs = Tensor<double>::from_values(
            {4, 5}, std::vector<double>(b.values().begin() + s * 20, b.values().begin() + (s + 1) * 20));
        auto cs = contnet::matmul(as, bs);
        for (int i = 0; i < 15; ++i) EXPECT_DOUBLE_EQ(c.values()[static_cast<std::size_t>(s * 15 + i)], cs.values()[static_cast<std::size_t>(i)]);
    }
    const double err = contnet::grad_check([&] { return contnet::sum(contnet::matmul(a, b)); }, b);
    EXPECT_LT(err, 1e-6);
}

TEST(Softmax, ConstantSliceIsUniform) {
    auto x = Tensor<double>::filled({5}, 3.25);
    auto y = contnet::softmax(x, 0);
    for (double v : y.values()) EXPECT_NEAR(v, 0.2, 1e-12);
    auto two = Tensor<double>::from_values({2}, {0, 0});
    auto y2 = contnet::softmax(two, 0);
    EXPECT_DOUBLE_EQ(y2.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(y2.values()[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    auto x = Tensor<double>::from_values({2}, {1000.0, 0.0});
    auto y = contnet::softmax(x, 0);
    // oracle: shift by the max before exponentiating
    const double e0 = std::exp(0.0), e1 = std::exp(-1000.0);
    EXPECT_NEAR(y.values()[0], e0 / (e0 + e1), 1e-15);
    EXPECT_NEAR(y.values()[1], e1 / (e0 + e1), 1e-15);
    EXPECT_TRUE(std::isfinite(y.values()[0]));
}

TEST(Softmax, RowsSumToOneAcrossAxes) {
    contnet::Rng rng(3);
    auto x = random_tensor({2, 3, 4}, rng, 5.0);
    for (std::int64_t axis = 0; axis < 3; ++axis) {
        auto y = contnet::softmax(x, axis);
        const auto it = contnet::detail::axis_iter(x.shape(), axis);
        for (std::int64_t o = 0; o < it.outer; ++o) {
            for (std::int64_t in = 0; in < it.inner; ++in) {
                double s = 0;
                for (std::int64_t e = 0; e < it.extent; ++e)
                    s += y.values()[static_cast<std::size_t>(o * it.extent * it.inner + e * it.inner + in)];
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
        }
    }
}

TEST(LayerNorm, ConstantInputGivesZeros) {
    auto x = Tensor<double>::filled({2, 4}, 7.0);
    auto gain = Tensor<double>::filled({4}, 1.0);
    auto bias = Tensor<double>::zeros({4});
    auto y = contnet::layer_norm(x, gain, bias);
    for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNorm, TwoPointClosedForm) {
    // mean 2, var 1 => normalized [-1, 1] as eps -> 0
    auto x = Tensor<double>::from_values({1, 2}, {1.0, 3.0});
    auto gain = Tensor<double>::filled({2}, 1.0);
    auto bias = Tensor<double>::zeros({2});
    auto y = contnet::layer_norm(x, gain, bias, 1e-12);
    EXPECT_NEAR(y.values()[0], -1.0, 1e-9);
    EXPECT_NEAR(y.values()[1], 1.0, 1e-9);
}

TEST(LayerNorm, NormalizesEachPosition) {
    contnet::Rng rng(4);
    auto x = random_tensor({3, 8}, rng, 2.0);
    auto gain = Tensor<double>::filled({8}, 1.0);
    auto bias = Tensor<double>::zeros({8});
    auto y = contnet::layer_norm(x, gain, bias);
    for (int r = 0; r < 3; ++r) {
        double mu = 0, var = 0;
        for (int j = 0; j < 8; ++j) mu += y.values()[static_cast<std::size_t>(r * 8 + j)];
        mu /= 8;
        for (int j = 0; j < 8; ++j) {
            const double d = y.values()[static_cast<std::size_t>(r * 8 + j)] - mu;
            var += d * d;
        }
        var /= 8;
        EXPECT_NEAR(mu, 0.0, 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(Backward, SumGivesOnes) {
    auto theta = Tensor<double>::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(contnet::sum(theta));
    for (double g : theta.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoTheta) {
    auto theta = Tensor<double>::from_values({3}, {1.5, -2.0, 0.5}, true);
    backward(contnet::sum(contnet::mul(theta, theta)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(theta.grad()[i], 2.0 * theta.values()[i], 1e-12);
}

TEST(Backward, ReuseAccumulatesAdditively) {
    auto theta = Tensor<double>::from_values({2}, {1.0, 2.0}, true);
    backward(contnet::sum(contnet::add(theta, theta)));
    for (double g : theta.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, NonScalarLossIsContractError) {
    auto theta = Tensor<double>::from_values({2}, {1.0, 2.0}, true);
    auto y = contnet::add(theta, theta);
    EXPECT_THROW(backward(y), contnet::ContractError);
}

TEST(Backward, NoGradWithoutRequiresGrad) {
    auto x = Tensor<double>::from_values({2}, {1.0, 2.0}, false);
    backward(contnet::sum(contnet::mul(x, x)));
    EXPECT_FALSE(x.has_grad());
}

TEST(GradTape, ReplayAfterZeroReproducesGradients) {
    contnet::Rng rng(5);
    auto theta = random_tensor({4, 4}, rng);
    theta.set_requires_grad(true);
    auto w = random_tensor({4, 2}, rng);
    auto loss = contnet::sum(contnet::softmax(contnet::matmul(theta, w), 1));
    auto tape = GradTape<double>::build(loss);
    tape.backward();
    std::vector<double> first = theta.grad();
    tape.zero_grad();
    tape.backward();
    ASSERT_EQ(theta.grad().size(), first.size());
    for (std::size_t i = 0; i < first.size(); ++i) EXPECT_DOUBLE_EQ(theta.grad()[i], first[i]);
}

TEST(GradCheck, SumOfSquares) {
    contnet::Rng rng(6);
    auto x = random_tensor({3, 3}, rng);
    const double err = contnet::grad_check([&] { return contnet::sum(contnet::mul(x, x)); }, x);
    EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
    contnet::Rng rng(7);
    auto logits = random_tensor({4, 5}, rng, 2.0);
    auto target = Tensor<double>::zeros({4, 5});
    for (int r = 0; r < 4; ++r) target.values()[static_cast<std::size_t>(r * 5 + (r % 5))] = 1.0;
    auto f = [&] {
        auto lsm = contnet::log_softmax(logits, 1);
        return contnet::scale(contnet::sum(contnet::mul(lsm, target)), -0.25);
    };
    const double err = contnet::grad_check(f, logits);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, PrimitiveOpsOnRandomInputs) {
    contnet::Rng rng(8);
    // add with trailing-suffix broadcast
    {
        auto x = random_tensor({2, 3, 4}, rng);
        auto b = random_tensor({4}, rng);
        EXPECT_LT(contnet::grad_check([&] { return contnet::sum(contnet::add(x, b)); }, x), 1e-6);
        EXPECT_LT(contnet::grad_check([&] { return contnet::sum(contnet::add(x, b)); }, b), 1e-6);
    }
    // mul broadcast
    {
        auto x = random_tensor({2, 3, 4}, rng);
        auto b = random_tensor({3, 4}, rng);
        EXPECT_LT(contnet::grad_check([&] { return contnet::sum(contnet::mul(x, b)); }, b), 1e-6);
    }
    // relu away from the kink
    {
        auto x = random_tensor({3, 5}, rng);
        for (auto& v : x.values()) v += (v >= 0 ? 0.2 : -0.2);
        EXPECT_LT(contnet::grad_check(
                      [&] { return contnet::sum(contnet::mul(contnet::relu(x), x)); }, x),
                  1e-4);
    }
    // softmax / log_softmax along middle axis
    {
        auto x = random_tensor({2, 3, 2}, rng, 2.0);
        auto w = random_tensor({2, 3, 2}, rng);
        EXPECT_LT(contnet::grad_check(
                      [&] { return contnet::sum(contnet::mul(contnet::softmax(x, 1), w)); }, x),
                  1e-4);
        EXPECT_LT(contnet::grad_check(
                      [&] { return contnet::sum(contnet::mul(contnet::log_softmax(x, 1), w)); }, x),
                  1e-4);
    }
    // layer_norm over all three inputs
    {
        auto x = random_tensor({4, 6}, rng);
        auto g = random_tensor({6}, rng);
        auto b = random_tensor({6}, rng);
        auto w = random_tensor({4, 6}, rng);
        auto f = [&] { return contnet::sum(contnet::mul(contnet::layer_norm(x, g, b), w)); };
        EXPECT_LT(contnet::grad_check(f, x), 1e-4);
        EXPECT_LT(contnet::grad_check(f, g), 1e-4);
        EXPECT_LT(contnet::grad_check(f, b), 1e-4);
    }
    // reshape / slice / concat / transpose
    {
        auto x = random_tensor({2, 6}, rng);
        auto w = random_tensor({3, 4}, rng);
        auto f = [&] { return contnet::sum(contnet::mul(contnet::reshape(x, {3, 4}), w)); };
        EXPECT_LT(contnet::grad_check(f, x), 1e-6);
    }
    {
        auto x = random_tensor({3, 8}, rng);
        auto f = [&] {
            auto a = contnet::slice_last(x, 0, 3);
            auto b = contnet::slice_last(x, 3, 5);
            auto joined = contnet::concat_last<double>({b, a});
            return contnet::sum(contnet::mul(joined, joined));
        };
        EXPECT_LT(contnet::grad_check(f, x), 1e-6);
    }
    {
        auto x = random_tensor({2, 3, 4}, rng);
        auto w = random_tensor({2, 4, 3}, rng);
        auto f = [&] { return contnet::sum(contnet::mul(contnet::transpose_last2(x), w)); };
        EXPECT_LT(contnet::grad_check(f, x), 1e-6);
    }
}

TEST(Broadcast, RejectsNonSuffixShapes) {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({2});
    EXPECT_THROW(contnet::add(a, b), contnet::ShapeError);  // {2} is not a suffix of {2,3}
    auto c = Tensor<double>::zeros({3});
    EXPECT_NO_THROW(contnet::add(a, c));
    auto s = Tensor<double>::scalar(1.0);
    EXPECT_NO_THROW(contnet::add(a, s));
}

TEST(Determinism, ForwardIsBitIdentical) {
    contnet::Rng rng(9);
    auto x = random_tensor({4, 4}, rng, 3.0);
    auto w = random_tensor({4, 4}, rng);
    auto run = [&] {
        return contnet::layer_norm(contnet::matmul(contnet::softmax(x, 1), w),
                                   Tensor<double>::filled({4}, 1.0), Tensor<double>::zeros({4}));
    };
    auto y1 = run();
    auto y2 = run();
    for (std::size_t i = 0; i < y1.values().size(); ++i) EXPECT_EQ(y1.values()[i], y2.values()[i]);
}

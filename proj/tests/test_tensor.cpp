#include <gtest/gtest.h>

#include "p2s/optim.hpp"
#include "support/gradcheck.hpp"

using namespace p2s;
using namespace p2s::testing;

TEST(Tensor, AddIsElementwise) {
    Tensor<float> a({2}, std::vector<float>{1, 2}), b({2}, std::vector<float>{3, 4});
    auto c = add(a, b);
    EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{4, 6}));
}

TEST(Tensor, MulByOnesIsIdentity) {
    std::mt19937_64 rng(3);
    auto x = random_tensor({3, 4}, rng);
    auto y = mul(x, ones_like(x));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Tensor, SigmoidOfZeroIsHalf) { EXPECT_EQ(sigmoid(Tensor<float>::scalar(0)).item(), 0.5f); }

TEST(Tensor, SigmoidStaysInsideOpenInterval) {
    Tensor<float> x({4}, std::vector<float>{-200, -50, 50, 200});
    auto y = sigmoid(x);
    for (float v : y.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(Tensor, ShapeMismatchNamesOperatorAndShapes) {
    Tensor<float> a({2, 3}), b({3, 2});
    try {
        add(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
    }
}

TEST(Tensor, DataLengthMustMatchShape) { EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError); }

TEST(Backward, SumOfSquares) {
    Tensor<double> x({3}, std::vector<double>{1, 2, 3}, true);
    sum(mul(x, x)).backward();
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, SigmoidSlopeAtZero) {
    auto w = Tensor<double>::scalar(0, true);
    sigmoid(mul(w, Tensor<double>::scalar(1))).backward();
    EXPECT_DOUBLE_EQ(w.grad()[0], 0.25);
}

TEST(Backward, RejectsNonScalarLoss) {
    Tensor<float> x({2}, 1.0f, true);
    EXPECT_THROW(mul(x, x).backward(), GraphError);
}

TEST(Backward, RejectsConsumedGraph) {
    Tensor<float> x({2}, 1.0f, true);
    auto loss = sum(mul(x, x));
    loss.backward();
    EXPECT_THROW(loss.backward(), GraphError);
}

TEST(Backward, RejectsUnrecordedLoss) {
    Tensor<float> x({1}, 1.0f, false);
    EXPECT_THROW(sum(x).backward(), GraphError);
}

TEST(Backward, NoGradGuardSuppressesRecording) {
    Tensor<float> x({2}, 1.0f, true);
    NoGradGuard guard;
    auto y = sum(mul(x, x));
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(y.backward(), GraphError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
    // y = x*x + x*x, dy/dx = 4x
    Tensor<double> x({2}, std::vector<double>{1.5, -2}, true);
    auto sq = mul(x, x);
    sum(add(sq, sq)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
}

TEST(Backward, DeepChainDoesNotOverflowStack) {
    Tensor<float> x({1}, 1.0f, true);
    Tensor<float> y = x;
    for (int i = 0; i < 100000; ++i) y = add_scalar(y, 0.0f);
    sum(y).backward();
    EXPECT_EQ(x.grad()[0], 1.0f);
}

TEST(GradCheck, ElementwisePrimitives) {
    const std::vector<std::pair<const char*, std::function<TensorD(const TensorD&, const TensorD&)>>> ops = {
        {"add", [](const TensorD& a, const TensorD& b) { return add(a, b); }},
        {"sub", [](const TensorD& a, const TensorD& b) { return sub(a, b); }},
        {"mul", [](const TensorD& a, const TensorD& b) { return mul(a, b); }},
        {"div", [](const TensorD& a, const TensorD& b) { return div(a, add_scalar(mul(b, b), 0.5)); }},
        {"relu", [](const TensorD& a, const TensorD&) { return relu(a); }},
        {"sigmoid", [](const TensorD& a, const TensorD&) { return sigmoid(mul_scalar(a, 3.0)); }},
    };
    for (const auto& [name, op] : ops) {
        auto run = gradcheck_cases(
            [&](std::mt19937_64& rng) {
                std::vector<TensorD> leaves{random_tensor({4, 4, 4, 2}, rng), random_tensor({4, 4, 4, 2}, rng)};
                auto seed = rng();
                return std::make_pair(
                    std::function<TensorD(const std::vector<TensorD>&)>(
                        [&op, seed](const std::vector<TensorD>& l) { return weighted_sum(op(l[0], l[1]), seed); }),
                    leaves);
            },
            5, 11);
        ASSERT_EQ(run.checks.size(), 5u) << name;
        EXPECT_LT(run.worst_rel(), 1e-4) << name;
        EXPECT_LT(run.worst_abs(), 1e-4) << name;
    }
}

TEST(Optimizer, SgdStepAndZeroing) {
    Tensor<float> w({2}, std::vector<float>{1, 2}, true);
    Optimizer<float> opt({w}, OptimizerKind::sgd);
    sum(mul(w, w)).backward();
    opt.step(0.1);
    EXPECT_FLOAT_EQ(w.data()[0], 0.8f);
    EXPECT_FLOAT_EQ(w.data()[1], 1.6f);
    for (float g : w.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
    // With bias correction the first Adam step is lr * g / (|g| + eps') ~ lr * sign(g).
    Tensor<double> w({2}, std::vector<double>{1, -3}, true);
    Optimizer<double> opt({w}, OptimizerKind::adam);
    sum(mul(w, w)).backward();
    opt.step(0.01);
    EXPECT_NEAR(w.data()[0], 0.99, 1e-7);
    EXPECT_NEAR(w.data()[1], -2.99, 1e-7);
}

TEST(Optimizer, MissingGradientIsAnError) {
    Tensor<float> a({1}, 1.0f, true), b({1}, 1.0f, true);
    Optimizer<float> opt({a, b}, OptimizerKind::adam);
    sum(mul(a, a)).backward();
    EXPECT_THROW(opt.step(0.1), std::logic_error);
}

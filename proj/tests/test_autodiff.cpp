#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <optional>

#include "regda/autodiff.hpp"
#include "test_util.hpp"

using namespace regda;
using namespace regda::ad;
using regda::testing::randn;
using regda::testing::conv_oracle;
using regda::testing::conv_transpose_oracle;
using regda::testing::tensor;

namespace {

// Scalar probe: sum(op(x) * R) for a fixed random R, so vector-valued ops can be grad-checked.
double check_op(const std::function<Var<double>(Graph<double>&, Var<double>)>& op, const Shape& in_shape, Rng& rng,
                double input_scale = 1.0, double offset = 0.0) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        auto point = randn(in_shape, rng, input_scale);
        for (auto& v : point.vec()) v += offset;
        std::optional<Tensor<double>> probe;
        worst = std::max(worst, grad_check(
                                    [&](Graph<double>& g, Var<double> x) {
                                        auto y = op(g, x);
                                        if (!probe) probe = randn(y.shape(), rng);
                                        return sum(mul(y, g.constant(*probe)));
                                    },
                                    point, 1e-6));
    }
    return worst;
}

}  // namespace

TEST(Evaluate, AddIsElementwise) {
    Graph<double> g;
    auto a = g.input("a", {2});
    auto b = g.input("b", {2});
    auto c = add(a, b);
    g.evaluate({{"a", tensor({2}, {1, 2})}, {"b", tensor({2}, {3, 4})}});
    EXPECT_EQ(c.value().vec(), (regda::AlignedVector<double>{4, 6}));
}

TEST(Evaluate, SumOfExpOfZerosIsFour) {
    Graph<double> g;
    auto x = g.input("x", {4});
    auto y = sum(ad::exp(x));
    g.evaluate({{"x", Tensor<double>({4})}});
    EXPECT_EQ(y.value()[0], 4.0);
}

TEST(Evaluate, OnesKernelOverOnesImageGivesNine) {
    Graph<double> g;
    auto x = g.constant(Tensor<double>({1, 1, 5, 5}, 1.0));
    auto w = g.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
    auto y = conv2d(x, w);
    g.evaluate();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (auto v : y.value().vec()) EXPECT_EQ(v, 9.0);
}

TEST(Evaluate, ShapeMismatchNamesOpAndShapes) {
    Graph<double> g;
    auto a = g.input("a", {2, 3});
    auto b = g.input("b", {3, 2});
    try {
        add(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    }
}

TEST(Evaluate, RejectsInputOfWrongShape) {
    Graph<double> g;
    g.input("x", {2});
    EXPECT_THROW(g.set_input("x", Tensor<double>({3})), ShapeError);
}

TEST(Evaluate, RepeatedEvaluationIsBitIdentical) {
    Rng rng(3);
    Graph<double> g;
    auto x = g.input("x", {2, 3, 6, 6});
    auto w = g.constant(randn({4, 3, 3, 3}, rng));
    auto y = spatial_softmax(relu(conv2d(x, w, {1, 1})));
    const auto in = randn({2, 3, 6, 6}, rng);
    g.evaluate({{"x", in}});
    const auto first = y.value();
    g.evaluate({{"x", randn({2, 3, 6, 6}, rng)}});
    g.evaluate({{"x", in}});
    EXPECT_EQ(first, y.value());
}

TEST(Backward, SquareSumGradient) {
    Graph<double> g;
    auto x = g.input("x", {3}, true);
    auto y = sum(mul(x, x));
    g.evaluate({{"x", tensor({3}, {1, 2, 3})}});
    g.backward(y);
    EXPECT_EQ(g.grad(x).vec(), (regda::AlignedVector<double>{2, 4, 6}));
}

TEST(Backward, KlGradientIsSoftmaxMinusTarget) {
    Rng rng(11);
    Graph<double> g;
    auto z = g.input("z", {1, 1, 4, 4}, true);
    auto qv = randn({1, 1, 4, 4}, rng);
    double s = 0;
    for (auto& v : qv.vec()) s += (v = std::abs(v));
    for (auto& v : qv.vec()) v /= s;
    auto q = g.constant(qv);
    auto p = spatial_softmax(z);
    auto kl = sum(sub(mul(q, ad::log(q)), mul(q, ad::log(p))));
    g.evaluate({{"z", randn({1, 1, 4, 4}, rng)}});
    g.backward(kl);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(g.grad(z)[i], p.value()[i] - qv[i], 1e-12);
}

TEST(Backward, FanOutAccumulates) {
    Graph<double> g;
    auto x = g.input("x", {1}, true);
    auto y = sum(add(x, add(x, x)));
    g.evaluate({{"x", tensor({1}, {5})}});
    g.backward(y);
    EXPECT_EQ(g.grad(x)[0], 3.0);
}

TEST(Backward, BeforeForwardThrows) {
    Graph<double> g;
    auto x = g.input("x", {1}, true);
    auto y = sum(x);
    EXPECT_THROW(g.backward(y), std::logic_error);
}

TEST(Backward, NonScalarSeedNeedsCotangent) {
    Graph<double> g;
    auto x = g.input("x", {2}, true);
    auto y = mul(x, x);
    g.evaluate({{"x", tensor({2}, {1, 2})}});
    EXPECT_THROW(g.backward(y), std::exception);
    g.backward(y, tensor({2}, {1, 1}));
    EXPECT_EQ(g.grad(x).vec(), (regda::AlignedVector<double>{2, 4}));
}

TEST(Backward, IsLinearInTheCotangent) {
    Rng rng(5);
    Graph<double> g;
    auto x = g.input("x", {3, 4}, true);
    auto w = g.constant(randn({4, 2}, rng));
    auto y = ad::exp(matmul(x, w));
    g.evaluate({{"x", randn({3, 4}, rng, 0.3)}});
    const auto c = randn({3, 2}, rng);
    g.backward(y, c);
    const auto base = g.grad(x);
    auto c3 = c;
    for (auto& v : c3.vec()) v *= 3.0;
    g.backward(y, c3);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(g.grad(x)[i], 3.0 * base[i], 1e-12);
}

TEST(Detach, BlocksOneFactorOfAProduct) {
    Graph<double> g;
    auto x = g.input("x", {1}, true);
    auto y = sum(mul(detach(x), x));
    g.evaluate({{"x", tensor({1}, {2})}});
    g.backward(y);
    EXPECT_EQ(g.grad(x)[0], 2.0);
}

TEST(Detach, IsForwardIdentity) {
    Rng rng(2);
    Graph<double> g;
    auto x = g.input("x", {5});
    auto d = detach(x);
    auto r = reverse_grad(x, 0.7);
    g.evaluate({{"x", randn({5}, rng)}});
    EXPECT_EQ(d.value(), x.value());
    EXPECT_EQ(r.value(), x.value());
}

TEST(Detach, DetachedLossGivesZeroGradients) {
    Graph<double> g;
    auto x = g.input("x", {3}, true);
    auto y = sum(ad::exp(detach(x)));
    g.evaluate({{"x", tensor({3}, {1, 2, 3})}});
    g.backward(y);
    EXPECT_EQ(g.grad(x).vec(), (regda::AlignedVector<double>{0, 0, 0}));
}

TEST(ReverseGrad, FlipsAndScales) {
    for (auto [scale, expected] : {std::pair{1.0, -6.0}, {0.0, 0.0}, {2.0, -12.0}}) {
        Graph<double> g;
        auto x = g.input("x", {1}, true);
        auto r = reverse_grad(x, scale);
        auto y = sum(mul(r, r));
        g.evaluate({{"x", tensor({1}, {3})}});
        g.backward(y);
        EXPECT_EQ(g.grad(x)[0], expected) << "scale " << scale;
    }
}

TEST(GradCheck, SquareSum) {
    Rng rng(17);
    const double err = grad_check([](Graph<double>&, Var<double> x) { return sum(mul(x, x)); }, randn({6}, rng), 1e-5);
    EXPECT_LE(err, 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
    const double err = grad_check(
        [](Graph<double>& g, Var<double> x) { return add(sum(scale(x, 0.0)), g.constant(Tensor<double>::scalar(3.0))); },
        Tensor<double>({4}, 1.0), 1e-5);
    EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, RejectsStepOutsideRange) {
    auto fn = [](Graph<double>&, Var<double> x) { return sum(x); };
    EXPECT_THROW(grad_check(fn, Tensor<double>({2}), 0.0), std::invalid_argument);
    EXPECT_THROW(grad_check(fn, Tensor<double>({2}), 0.02), std::invalid_argument);
}

TEST(GradCheck, NonFiniteValueThrows) {
    auto fn = [](Graph<double>&, Var<double> x) { return sum(ad::log(x, 0.0)); };
    EXPECT_THROW(grad_check(fn, Tensor<double>({2}), 1e-5), std::domain_error);
}

TEST(Primitives, PassGradCheck) {
    Rng rng(29);
    const double tol = 1e-4;
    EXPECT_LE(check_op([&](Graph<double>& g, Var<double> x) { return add(x, g.constant(randn({3, 4}, rng))); }, {3, 4}, rng), tol);
    EXPECT_LE(check_op([&](Graph<double>& g, Var<double> x) { return sub(g.constant(randn({3, 4}, rng)), x); }, {3, 4}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return mul(x, x); }, {3, 4}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return scale(x, -2.5); }, {3, 4}, rng), tol);
    EXPECT_LE(check_op([&](Graph<double>& g, Var<double> x) { return matmul(x, g.constant(randn({4, 5}, rng))); }, {3, 4}, rng),
              tol);
    EXPECT_LE(check_op([&](Graph<double>& g, Var<double> x) { return matmul(g.constant(randn({2, 3}, rng)), x); }, {3, 4}, rng),
              tol);
    EXPECT_LE(check_op(
                  [&](Graph<double>& g, Var<double> x) {
                      return conv2d(x, g.constant(randn({3, 2, 3, 3}, rng)), g.constant(randn({3}, rng)), {2, 1});
                  },
                  {2, 2, 5, 5}, rng),
              tol);
    EXPECT_LE(check_op(
                  [&](Graph<double>& g, Var<double> w) {
                      return conv2d(g.constant(randn({2, 2, 5, 5}, rng)), w, {1, 1});
                  },
                  {3, 2, 3, 3}, rng),
              tol);
    EXPECT_LE(check_op(
                  [&](Graph<double>& g, Var<double> x) {
                      return conv_transpose2d(x, g.constant(randn({2, 3, 4, 4}, rng)), g.constant(randn({3}, rng)),
                                              {2, 1});
                  },
                  {2, 2, 3, 3}, rng),
              tol);
    EXPECT_LE(check_op(
                  [&](Graph<double>& g, Var<double> w) {
                      return conv_transpose2d(g.constant(randn({2, 2, 3, 3}, rng)), w, g.constant(randn({3}, rng)),
                                              {2, 1});
                  },
                  {2, 3, 4, 4}, rng),
              tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return relu(x); }, {4, 5}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return ad::exp(x); }, {4, 5}, rng, 0.5), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return ad::log(x); }, {4, 5}, rng, 0.1, 2.0), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return sum(x, {1, 3}); }, {2, 3, 4, 5}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return mean(x, {0, 2}); }, {2, 3, 4, 5}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return mean(x); }, {2, 3}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return reshape(x, {6, 4}); }, {2, 3, 4}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return slice(x, 1, 1, 3); }, {2, 4, 3}, rng), tol);
    EXPECT_LE(check_op([](Graph<double>&, Var<double> x) { return spatial_softmax(x); }, {2, 3, 4, 4}, rng, 2.0), tol);
    EXPECT_LE(check_op([&](Graph<double>& g, Var<double> x) { return concat(std::vector{x, g.constant(randn({1, 3}, rng)), x}); },
                       {2, 3}, rng),
              tol);
}

TEST(Conv, MatchesDirectConvolution) {
    Rng rng(41);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
        const auto xv = randn({2, 3, 7, 7}, rng), wv = randn({4, 3, 3, 3}, rng), bv = randn({4}, rng);
        Graph<double> g;
        auto y = conv2d(g.constant(xv), g.constant(wv), g.constant(bv), {stride, pad});
        g.evaluate();
        regda::testing::expect_near(y.value(), conv_oracle(xv, wv, bv, stride, pad), 1e-12);
    }
}

TEST(Conv, TransposedMatchesScatterOracle) {
    Rng rng(43);
    const auto xv = randn({2, 3, 4, 4}, rng), wv = randn({3, 2, 4, 4}, rng), bv = randn({2}, rng);
    Graph<double> g;
    auto y = conv_transpose2d(g.constant(xv), g.constant(wv), g.constant(bv), {2, 1});
    g.evaluate();
    ASSERT_EQ(y.shape(), (Shape{2, 2, 8, 8}));
    regda::testing::expect_near(y.value(), conv_transpose_oracle(xv, wv, bv, 2, 1), 1e-12);
}

TEST(Softmax, ClosedFormOnTwoCells) {
    Graph<double> g;
    auto z = g.input("z", {1, 1, 1, 2});
    auto p = spatial_softmax(z);
    g.evaluate({{"z", tensor({1, 1, 1, 2}, {0.0, std::log(3.0)})}});
    EXPECT_NEAR(p.value()[0], 0.25, 1e-15);
    EXPECT_NEAR(p.value()[1], 0.75, 1e-15);
}

TEST(Softmax, NonFiniteInputThrows) {
    Graph<double> g;
    auto z = g.input("z", {1, 1, 2, 2});
    spatial_softmax(z);
    EXPECT_THROW(g.evaluate({{"z", tensor({1, 1, 2, 2}, {0, NAN, 1, 2})}}), std::domain_error);
}

TEST(Argmax, FirstMaximumInRowMajorOrder) {
    Graph<double> g;
    auto z = g.input("z", {1, 3, 3});
    auto a = spatial_argmax(z);
    auto m = spatial_max(z);
    g.evaluate({{"z", tensor({1, 3, 3}, {0, 5, 0, 0, 0, 0, 5, 0, 0})}});
    EXPECT_EQ(a.value().vec(), (regda::AlignedVector<double>{0, 1}));
    EXPECT_EQ(m.value()[0], 5.0);
}

TEST(FiniteCheck, NamesTheLabelledNode) {
    Graph<double> g;
    g.set_finite_check(true);
    auto x = g.input("x", {2});
    auto y = ad::log(x, 0.0);
    g.set_label(y, "stage3.log");
    try {
        g.evaluate({{"x", tensor({2}, {1, 0})}});
        FAIL() << "expected an error";
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("stage3.log"), std::string::npos) << e.what();
    }
}

TEST(Parameters, ReadExternalStorage) {
    Tensor<double> w({2}, 1.0);
    Graph<double> g;
    auto p = g.parameter("w", w);
    auto y = sum(mul(p, p));
    g.evaluate();
    EXPECT_EQ(y.value()[0], 2.0);
    w[0] = 3.0;
    g.evaluate();
    EXPECT_EQ(y.value()[0], 10.0);
    g.backward(y);
    EXPECT_EQ(g.grad(p).vec(), (regda::AlignedVector<double>{6, 2}));
}

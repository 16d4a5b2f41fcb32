#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "regda/losses.hpp"
#include "regda/model.hpp"
#include "test_util.hpp"

using namespace regda;
using regda::testing::randn;

namespace {

GeneratorConfig tiny_generator() {
    GeneratorConfig c;
    c.in_channels = 2;
    c.image_size = 8;
    c.channels = {3, 4};
    c.strides = {2, 1};
    return c;
}

ModelConfig tiny_model() {
    ModelConfig m;
    m.generator = tiny_generator();
    m.head_width = 5;
    m.keypoints = 2;
    m.grid = 8;  // one upsampling stage from the 4x4 features
    return m;
}

void relu_inplace(Tensor<double>& t) {
    for (auto& v : t.vec()) v = std::max(v, 0.0);
}

// Layer-by-layer reference built from the direct convolution loops.
Tensor<double> forward_oracle(const GeneratorParams<double>& gen, const RegressorParams<double>& reg,
                              const Tensor<double>& images) {
    using regda::testing::conv_oracle;
    using regda::testing::conv_transpose_oracle;
    Tensor<double> x = images;
    for (std::size_t i = 0; i < gen.config.channels.size(); ++i) {
        x = conv_oracle(x, gen.params[2 * i].value, gen.params[2 * i + 1].value, gen.config.strides[i],
                        gen.config.kernel / 2);
        relu_inplace(x);
    }
    std::size_t i = 0;
    for (std::size_t u = 0; u < reg.config.upsample_stages(); ++u, i += 2) {
        x = conv_transpose_oracle(x, reg.params[i].value, reg.params[i + 1].value, 2, 1);
        relu_inplace(x);
    }
    for (std::size_t c = 0; c < 2; ++c, i += 2) {
        x = conv_oracle(x, reg.params[i].value, reg.params[i + 1].value, 1, 1);
        relu_inplace(x);
    }
    return conv_oracle(x, reg.params[i].value, reg.params[i + 1].value, 1, 0);
}

Tensor<double> run_forward(const GeneratorParams<double>& gen, const RegressorParams<double>& reg,
                           const Tensor<double>& images) {
    ad::Graph<double> g;
    auto y = forward(gen, reg, g.constant(images));
    g.evaluate();
    return y.value();
}

}  // namespace

TEST(Generator, DefaultShapes) {
    const GeneratorConfig c;
    EXPECT_EQ(c.output_size(), 16u);
    EXPECT_EQ(c.out_channels(), 32u);
    const auto gen = build_generator<double>(c, 1);
    ad::Graph<double> g;
    auto x = g.constant(Tensor<double>({1, 3, 64, 64}, 0.5));
    auto f = apply_generator(c, regda::bind(g, gen.params), x);
    EXPECT_EQ(f.shape(), (Shape{1, 32, 16, 16}));
}

TEST(Generator, SeedDeterminism) {
    const auto a = build_generator<float>(GeneratorConfig{}, 7);
    const auto b = build_generator<float>(GeneratorConfig{}, 7);
    const auto c = build_generator<float>(GeneratorConfig{}, 8);
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(a.params, c.params);
    EXPECT_GT(parameter_count(a.params), 0u);
}

TEST(Generator, RejectsDegenerateConfigs) {
    auto c = tiny_generator();
    c.strides = {8, 2};
    EXPECT_THROW(build_generator<double>(c, 1), ConfigError);
    c = tiny_generator();
    c.channels = {3};
    EXPECT_THROW(build_generator<double>(c, 1), ConfigError);
    c = tiny_generator();
    c.kernel = 2;
    EXPECT_THROW(build_generator<double>(c, 1), ConfigError);
}

TEST(Regressor, OutputShapeAndIndependentSeeds) {
    ModelConfig m;
    m.keypoints = 4;
    const auto rc = m.regressor();
    const auto f = build_regressor<double>(rc, 11, "f");
    const auto f2 = build_regressor<double>(rc, 12, "f_adv");
    const auto again = build_regressor<double>(rc, 11, "f");
    EXPECT_EQ(f.params, again.params);
    ASSERT_EQ(f.params.size(), f2.params.size());
    for (std::size_t i = 0; i < f.params.size(); i += 2) EXPECT_NE(f.params[i].value, f2.params[i].value);
    const auto gen = build_generator<double>(m.generator, 1);
    ad::Graph<double> g;
    auto y = forward(gen, f, g.constant(Tensor<double>({2, 3, 64, 64}, 0.1)));
    EXPECT_EQ(y.shape(), (Shape{2, 4, 16, 16}));
}

TEST(Regressor, RejectsGridThatIsNotAPowerOfTwoMultiple) {
    RegressorConfig r{8, 4, 5, 1, 12};
    EXPECT_THROW(r.validate(), ConfigError);
    EXPECT_EQ((RegressorConfig{8, 4, 5, 1, 16}.upsample_stages()), 2u);
}

TEST(Forward, ZeroWeightsGiveTheFinalBias) {
    const auto m = tiny_model();
    auto gen = build_generator<double>(m.generator, 1);
    auto reg = build_regressor<double>(m.regressor(), 2, "f");
    for (auto& p : reg.params) p.value.fill(0.0);
    reg.params.back().value[0] = 0.25;
    reg.params.back().value[1] = -3.0;
    Rng rng(3);
    const auto y = run_forward(gen, reg, randn({2, 2, 8, 8}, rng));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 64; ++i) {
            EXPECT_EQ(y[b * 128 + i], 0.25);
            EXPECT_EQ(y[b * 128 + 64 + i], -3.0);
        }
}

TEST(Forward, BatchIndependence) {
    const auto m = tiny_model();
    const auto gen = build_generator<double>(m.generator, 4);
    const auto reg = build_regressor<double>(m.regressor(), 5, "f");
    Rng rng(6);
    const auto a = randn({1, 2, 8, 8}, rng), b = randn({1, 2, 8, 8}, rng);
    Tensor<double> both({2, 2, 8, 8});
    std::copy(a.vec().begin(), a.vec().end(), both.data());
    std::copy(b.vec().begin(), b.vec().end(), both.data() + a.size());
    const auto ya = run_forward(gen, reg, a), yb = run_forward(gen, reg, b), yboth = run_forward(gen, reg, both);
    for (std::size_t i = 0; i < ya.size(); ++i) {
        EXPECT_NEAR(yboth[i], ya[i], 1e-12);
        EXPECT_NEAR(yboth[ya.size() + i], yb[i], 1e-12);
    }
}

TEST(Forward, MatchesLayerOracle) {
    const auto m = tiny_model();
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        auto gen = build_generator<double>(m.generator, rng.next());
        auto reg = build_regressor<double>(m.regressor(), rng.next(), "f");
        for (auto* list : {&gen.params, &reg.params})
            for (auto& p : *list)
                if (p.name.ends_with(".bias")) p.value = randn(p.value.shape(), rng, 0.1);
        const auto images = randn({2, 2, 8, 8}, rng);
        regda::testing::expect_near(run_forward(gen, reg, images), forward_oracle(gen, reg, images), 1e-6);
    }
}

TEST(Forward, IsAPureFunction) {
    const auto m = tiny_model();
    const auto gen = build_generator<float>(m.generator, 1);
    const auto reg = build_regressor<float>(m.regressor(), 2, "f");
    Tensor<float> images({3, 2, 8, 8}, 0.3f);
    auto run = [&] {
        ad::Graph<float> g;
        auto y = forward(gen, reg, g.constant(images));
        g.evaluate();
        return y.value();
    };
    EXPECT_EQ(run(), run());
}

TEST(Forward, RejectsWrongImageSize) {
    const auto m = tiny_model();
    const auto gen = build_generator<double>(m.generator, 1);
    const auto reg = build_regressor<double>(m.regressor(), 2, "f");
    ad::Graph<double> g;
    EXPECT_THROW(forward(gen, reg, g.constant(Tensor<double>({1, 2, 9, 9}))), ShapeError);
    EXPECT_THROW(forward(gen, reg, g.constant(Tensor<double>({1, 3, 8, 8}))), ShapeError);
}

TEST(Forward, NonFiniteActivationNamesTheLayer) {
    const auto m = tiny_model();
    auto gen = build_generator<double>(m.generator, 1);
    const auto reg = build_regressor<double>(m.regressor(), 2, "f");
    gen.params[0].value[0] = INFINITY;
    ad::Graph<double> g;
    g.set_finite_check(true);
    forward(gen, reg, g.constant(Tensor<double>({1, 2, 8, 8}, 1.0)));
    try {
        g.evaluate();
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("generator.conv0"), std::string::npos) << e.what();
    }
}

TEST(Forward, EndToEndGradCheck) {
    const auto m = tiny_model();
    Rng rng(21);
    const auto gen = build_generator<double>(m.generator, 1);
    const auto reg = build_regressor<double>(m.regressor(), 2, "f");
    const auto images = randn({2, 2, 8, 8}, rng);
    std::vector<KeypointSet> kp(2);
    for (auto& s : kp)
        for (int k = 0; k < 2; ++k) s.points.push_back({rng.uniform(0, 7.9), rng.uniform(0, 7.9), true});
    const auto q = truth_targets<double>(kp, {8, 8}, 0.5);
    // Check against the first weight of each module in turn.
    for (std::size_t which : {0u, 1u}) {
        const auto& point = which == 0 ? gen.params[0].value : reg.params[0].value;
        const double err = ad::grad_check(
            [&](ad::Graph<double>& g, Var<double> w) {
                auto gp = regda::bind(g, gen.params);
                auto rp = regda::bind(g, reg.params);
                (which == 0 ? gp : rp).vars[0] = w;
                auto z = apply_regressor(reg.config, rp, apply_generator(gen.config, gp, g.constant(images)));
                return loss_true(spatial_softmax(z), g.constant(q)).value;
            },
            point, 1e-6);
        EXPECT_LE(err, 1e-3);
    }
}

TEST(Forward, FrozenParamsBlockGradient) {
    const auto m = tiny_model();
    const auto gen = build_generator<double>(m.generator, 1);
    const auto reg = build_regressor<double>(m.regressor(), 2, "f");
    ad::Graph<double> g;
    auto gp = regda::bind(g, gen.params);
    auto rp = regda::bind(g, reg.params);
    auto y = apply_regressor(reg.config, rp.frozen(), apply_generator(gen.config, gp, g.constant(Tensor<double>({1, 2, 8, 8}, 1.0))));
    auto l = ad::sum(ad::mul(y, y));
    g.evaluate();
    g.backward(l);
    for (const auto& v : rp.vars)
        for (auto x : g.grad(v).vec()) EXPECT_EQ(x, 0.0);
    double norm = 0.0;
    for (const auto& v : gp.vars)
        for (auto x : g.grad(v).vec()) norm += std::abs(x);
    EXPECT_GT(norm, 0.0);
}

TEST(Checkpoint, RoundTripsBitExactly) {
    const auto dir = std::filesystem::temp_directory_path() / "regda_test_model";
    std::filesystem::create_directories(dir);
    const auto m = tiny_model();
    const auto gen = build_generator<float>(m.generator, 3);
    Checkpoint<float> ck;
    ck.meta = {{"model", m}};
    ck.arrays = gen.params;
    save_checkpoint(dir / "a.bin", ck);
    const auto back = load_checkpoint<float>(dir / "a.bin");
    EXPECT_EQ(back.arrays, gen.params);
    EXPECT_EQ(back.meta, ck.meta);
    EXPECT_EQ(back.meta["model"].get<ModelConfig>(), m);

    auto other = build_generator<float>(m.generator, 4);
    restore_params(other.params, back);
    EXPECT_EQ(other.params, gen.params);

    const auto wide = load_checkpoint<double>(dir / "a.bin");
    for (std::size_t i = 0; i < wide.arrays.size(); ++i)
        for (std::size_t j = 0; j < wide.arrays[i].value.size(); ++j)
            EXPECT_EQ(wide.arrays[i].value[j], static_cast<double>(gen.params[i].value[j]));
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptFiles) {
    const auto dir = std::filesystem::temp_directory_path() / "regda_test_model_bad";
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "magic.bin", std::ios::binary);
        os << "NOTACKPT";
    }
    EXPECT_THROW(load_checkpoint<float>(dir / "magic.bin"), std::runtime_error);
    EXPECT_THROW(load_checkpoint<float>(dir / "missing.bin"), std::runtime_error);

    Checkpoint<float> ck;
    ck.meta = json::object();
    ck.arrays = build_generator<float>(tiny_generator(), 1).params;
    save_checkpoint(dir / "good.bin", ck);
    const auto size = std::filesystem::file_size(dir / "good.bin");
    std::filesystem::resize_file(dir / "good.bin", size - 7);
    EXPECT_THROW(load_checkpoint<float>(dir / "good.bin"), std::runtime_error);

    auto wrong = build_generator<float>(GeneratorConfig{}, 1);
    EXPECT_THROW(restore_params(wrong.params, ck), std::exception);
    std::filesystem::remove_all(dir);
}

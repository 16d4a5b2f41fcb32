#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regda/eval.hpp"
#include "regda/random.hpp"

using namespace regda;

namespace {

KeypointSet one(double h, double w) {
    KeypointSet s;
    s.points.push_back({h, w, true});
    return s;
}

std::vector<KeypointSet> random_batch(std::size_t n, std::size_t k, Rng& rng, double extent = 16.0) {
    std::vector<KeypointSet> out(n);
    for (auto& s : out)
        for (std::size_t i = 0; i < k; ++i) s.points.push_back({rng.uniform(0, extent), rng.uniform(0, extent), true});
    return out;
}

}  // namespace

TEST(Mae, Basics) {
    const std::vector<KeypointSet> gt{one(3, 4), one(7, 7)};
    EXPECT_EQ(mae(gt, gt, 16), 0.0);
    const std::vector<KeypointSet> p{one(4, 7)}, g{one(3, 4)};
    EXPECT_DOUBLE_EQ(mae(p, g, 16), 0.125);
    EXPECT_THROW(mae(p, gt, 16), std::invalid_argument);
    EXPECT_THROW(mae(p, g, 0), std::invalid_argument);
}

TEST(Mae, PermutationInvariantAndMatchesOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        auto p = random_batch(10, 3, rng), g = random_batch(10, 3, rng);
        double oracle = 0.0;
        for (std::size_t i = 0; i < 10; ++i)
            for (std::size_t k = 0; k < 3; ++k)
                oracle += (std::abs(p[i][k].h - g[i][k].h) + std::abs(p[i][k].w - g[i][k].w)) / 2.0 / 16.0;
        oracle /= 30.0;
        const double value = mae(p, g, 16);
        EXPECT_NEAR(value, oracle, 1e-14);
        std::vector<std::size_t> perm(10);
        std::iota(perm.begin(), perm.end(), 0);
        std::swap(perm[0], perm[7]);
        std::swap(perm[3], perm[9]);
        std::vector<KeypointSet> pp, gg;
        for (auto i : perm) pp.push_back(p[i]), gg.push_back(g[i]);
        EXPECT_NEAR(mae(pp, gg, 16), value, 1e-14);
    }
}

TEST(Pck, ExactAndBoundary) {
    // alpha 0.125 on a 64-pixel image with a 16 grid: threshold exactly 2 cells.
    const std::vector<KeypointSet> gt{one(5, 5), one(2, 9)};
    EXPECT_EQ(pck(gt, gt, 0.125, 64, 16).pck, 1.0);
    const std::vector<KeypointSet> at_edge{one(7, 5), one(2, 7)};
    EXPECT_EQ(pck(at_edge, gt, 0.125, 64, 16).pck, 0.0);
    const std::vector<KeypointSet> inside{one(6.99, 5), one(2, 7.01)};
    EXPECT_EQ(pck(inside, gt, 0.125, 64, 16).pck, 1.0);
    EXPECT_THROW(pck(gt, gt, 0.0, 64, 16), std::invalid_argument);
    EXPECT_THROW(pck(gt, std::vector<KeypointSet>{one(1, 1)}, 0.05, 64, 16), std::invalid_argument);
}

TEST(Pck, ThreeOfFour) {
    const std::vector<KeypointSet> gt{one(0, 0), one(4, 4), one(8, 8), one(12, 12)};
    const std::vector<KeypointSet> p{one(0, 0.5), one(4.3, 4.3), one(8, 9), one(12, 12)};
    const auto r = pck(p, gt, 0.05, 64, 16);
    EXPECT_DOUBLE_EQ(r.pck, 0.75);
    EXPECT_EQ(r.samples, 4u);
    EXPECT_EQ(r.alpha, 0.05);
}

TEST(Pck, ExhaustiveCountingOracleOnTenSamples) {
    // Every prediction sits on one of a few fixed distances; sweep all
    // combinations of near/far per sample for 10 samples of 2 keypoints.
    const double threshold = 0.05 * 32;  // image 32, grid 32
    const double offsets[] = {0.0, threshold - 1e-9, threshold, threshold + 0.5};
    Rng rng(7);
    for (int pattern = 0; pattern < 1 << 10; ++pattern) {
        std::vector<KeypointSet> g, p;
        std::size_t hits[2] = {0, 0};
        for (int i = 0; i < 10; ++i) {
            KeypointSet gs, ps;
            for (int k = 0; k < 2; ++k) {
                const double h = 8 + i, w = 10 + k;
                const int which = k == 0 ? ((pattern >> i) & 1) * 2 : static_cast<int>(rng.below(4));
                const double angle = rng.uniform(0, 2 * M_PI);
                gs.points.push_back({h, w, true});
                ps.points.push_back({h + offsets[which] * std::cos(angle), w + offsets[which] * std::sin(angle), true});
                if (std::hypot(ps.points.back().h - h, ps.points.back().w - w) < threshold) ++hits[k];
            }
            g.push_back(gs);
            p.push_back(ps);
        }
        const auto r = pck(p, g, 0.05, 32, 32);
        ASSERT_EQ(r.pck_per_keypoint.size(), 2u);
        EXPECT_DOUBLE_EQ(r.pck_per_keypoint[0], hits[0] / 10.0);
        EXPECT_DOUBLE_EQ(r.pck_per_keypoint[1], hits[1] / 10.0);
        EXPECT_DOUBLE_EQ(r.pck, (hits[0] + hits[1]) / 20.0);
    }
}

TEST(Pck, TranslationAndPermutationInvariant) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto p = random_batch(10, 2, rng), g = p;
        for (auto& s : g)
            for (auto& q : s.points) q.h += rng.uniform(-1, 1), q.w += rng.uniform(-1, 1);
        const double base = pck(p, g, 0.05, 64, 16).pck;
        const double dh = rng.uniform(-5, 5), dw = rng.uniform(-5, 5);
        auto p2 = p, g2 = g;
        for (auto* b : {&p2, &g2})
            for (auto& s : *b)
                for (auto& q : s.points) q.h += dh, q.w += dw;
        EXPECT_DOUBLE_EQ(pck(p2, g2, 0.05, 64, 16).pck, base);
        std::reverse(p.begin(), p.end());
        std::reverse(g.begin(), g.end());
        EXPECT_DOUBLE_EQ(pck(p, g, 0.05, 64, 16).pck, base);
    }
}

TEST(Diagnostics, IdenticalAndConstantOffset) {
    const std::vector<KeypointSet> gt{one(5, 5), one(9, 2), one(1, 1)};
    const std::vector<KeypointSet> f{one(5, 5), one(9, 3), one(4, 1)};
    auto d = diagnostics(f, f, gt, 0.05, 64, 16);
    EXPECT_EQ(d.accuracy_difference, 0.0);
    EXPECT_EQ(d.prediction_difference, 0.0);
    EXPECT_DOUBLE_EQ(d.accuracy_f, 1.0 / 3.0);
    std::vector<KeypointSet> shifted = f;
    for (auto& s : shifted) s.points[0].w += 2;
    d = diagnostics(f, shifted, gt, 0.05, 64, 16);
    EXPECT_DOUBLE_EQ(d.prediction_difference, 2.0);
}

TEST(Diagnostics, MatchesDirectComputation) {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const auto gt = random_batch(10, 2, rng), f = random_batch(10, 2, rng), fa = random_batch(10, 2, rng);
        const auto d = diagnostics(f, fa, gt, 0.2, 64, 16);
        double dist = 0.0;
        std::size_t hit_f = 0, hit_a = 0;
        for (std::size_t i = 0; i < 10; ++i)
            for (std::size_t k = 0; k < 2; ++k) {
                dist += std::hypot(f[i][k].h - fa[i][k].h, f[i][k].w - fa[i][k].w);
                hit_f += std::hypot(f[i][k].h - gt[i][k].h, f[i][k].w - gt[i][k].w) < 3.2;
                hit_a += std::hypot(fa[i][k].h - gt[i][k].h, fa[i][k].w - gt[i][k].w) < 3.2;
            }
        EXPECT_NEAR(d.prediction_difference, dist / 20.0, 1e-14);
        EXPECT_DOUBLE_EQ(d.accuracy_f, hit_f / 20.0);
        EXPECT_DOUBLE_EQ(d.accuracy_f_adv, hit_a / 20.0);
        EXPECT_DOUBLE_EQ(d.accuracy_difference, d.accuracy_f - d.accuracy_f_adv);
        EXPECT_THROW(diagnostics(f, std::vector<KeypointSet>(fa.begin(), fa.end() - 1), gt, 0.05, 64, 16),
                     std::invalid_argument);
    }
}

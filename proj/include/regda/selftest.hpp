#pragma once

// Quick built-in checks: gradient checks per loss and through a tiny model,
// distribution invariants, and KL against an explicit double loop.

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "regda/losses.hpp"
#include "regda/model.hpp"
#include "regda/random.hpp"

namespace regda {

struct CheckResult {
    std::string name;
    bool passed = false;
    double value = 0.0;  // worst error observed
    double limit = 0.0;
};

struct SelftestSummary {
    std::vector<CheckResult> checks;
    bool passed() const {
        for (const auto& c : checks)
            if (!c.passed) return false;
        return !checks.empty();
    }
};

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(shape);
    for (auto& v : t.vec()) v = scale * rng.normal();
    return t;
}

inline KeypointSet random_points(std::size_t k, const Grid& grid, Rng& rng) {
    KeypointSet s;
    for (std::size_t i = 0; i < k; ++i)
        s.points.push_back({static_cast<double>(rng.below(grid.height)), static_cast<double>(rng.below(grid.width)), true});
    return s;
}

// sum_i q_i ln(q_i / max(p_i, 1e-12)) over entries with q_i > 0, averaged over slices.
inline double kl_oracle(const Tensor<double>& q, const Tensor<double>& p, std::size_t slices) {
    const std::size_t area = q.size() / slices;
    double total = 0.0;
    for (std::size_t s = 0; s < slices; ++s) {
        double kl = 0.0;
        for (std::size_t i = 0; i < area; ++i) {
            const double qi = q[s * area + i];
            if (qi > 0.0) kl += qi * std::log(qi / std::max(p[s * area + i], 1e-12));
        }
        total += kl;
    }
    return total / static_cast<double>(slices);
}

inline Tensor<double> softmax_oracle(const Tensor<double>& logits, std::size_t slices) {
    const std::size_t area = logits.size() / slices;
    Tensor<double> out(logits.shape());
    for (std::size_t s = 0; s < slices; ++s) {
        double mx = -kInf, sum = 0.0;
        for (std::size_t i = 0; i < area; ++i) mx = std::max(mx, logits[s * area + i]);
        for (std::size_t i = 0; i < area; ++i) sum += out[s * area + i] = std::exp(logits[s * area + i] - mx);
        for (std::size_t i = 0; i < area; ++i) out[s * area + i] /= sum;
    }
    return out;
}

}  // namespace detail

inline SelftestSummary run_selftest(double log_epsilon, std::uint64_t seed, std::ostream& log) {
    using detail::kInf;
    SelftestSummary summary;
    Rng rng(seed);
    auto record = [&](std::string name, double value, double limit) {
        const bool ok = std::isfinite(value) && value <= limit;
        summary.checks.push_back({name, ok, value, limit});
        log << (ok ? "PASS " : "FAIL ") << std::left << std::setw(34) << name << " max error " << std::scientific
            << std::setprecision(3) << value << " (limit " << limit << ")\n"
            << std::defaultfloat;
    };
    auto guarded = [&](const std::string& name, double limit, auto&& body) {
        try {
            record(name, body(), limit);
        } catch (const std::exception& e) {
            summary.checks.push_back({name, false, kInf, limit});
            log << "FAIL " << name << ": " << e.what() << "\n";
        }
    };

    const Grid grid{6, 6};
    const double sigma = 1.0;
    const std::size_t points = 5;

    guarded("grad_check L2", 1e-4, [&] {
        double worst = 0.0;
        for (std::size_t i = 0; i < points; ++i) {
            const auto target = detail::random_tensor({2, 2, 6, 6}, rng);
            worst = std::max(worst, ad::grad_check(
                                        [&](ad::Graph<double>& g, Var<double> x) {
                                            return loss_mse(x, g.constant(target)).value;
                                        },
                                        detail::random_tensor({2, 2, 6, 6}, rng), 1e-6));
        }
        return worst;
    });
    guarded("grad_check L_T", 1e-4, [&] {
        double worst = 0.0;
        for (std::size_t i = 0; i < points; ++i) {
            std::vector<KeypointSet> kp{detail::random_points(2, grid, rng), detail::random_points(2, grid, rng)};
            const auto q = truth_targets<double>(kp, grid, sigma);
            worst = std::max(worst, ad::grad_check(
                                        [&](ad::Graph<double>& g, Var<double> x) {
                                            return loss_true(spatial_softmax(x), g.constant(q), log_epsilon).value;
                                        },
                                        detail::random_tensor({2, 2, 6, 6}, rng), 1e-6));
        }
        return worst;
    });
    guarded("grad_check L_F", 1e-4, [&] {
        double worst = 0.0;
        const TargetSpec spec{grid, sigma, std::nullopt};
        for (std::size_t i = 0; i < points; ++i) {
            const auto ref = detail::random_tensor({2, 2, 6, 6}, rng, 3.0);
            worst = std::max(worst, ad::grad_check(
                                        [&](ad::Graph<double>& g, Var<double> x) {
                                            return loss_false(spatial_softmax(x), g.constant(ref), spec, log_epsilon).value;
                                        },
                                        detail::random_tensor({2, 2, 6, 6}, rng), 1e-6));
        }
        return worst;
    });
    guarded("grad_check end-to-end (tiny model)", 1e-3, [&] {
        GeneratorConfig gc;
        gc.in_channels = 1;
        gc.image_size = 8;
        gc.channels = {3, 3};
        gc.strides = {2, 1};
        ModelConfig mc{gc, 3, 1, 4};
        const auto gen = build_generator<double>(gc, rng.next());
        const auto reg = build_regressor<double>(mc.regressor(), rng.next(), "f");
        double worst = 0.0;
        for (std::size_t i = 0; i < 2; ++i) {
            std::vector<KeypointSet> kp{detail::random_points(1, {4, 4}, rng), detail::random_points(1, {4, 4}, rng)};
            const auto q = truth_targets<double>(kp, {4, 4}, 0.5);
            const auto images = detail::random_tensor({2, 1, 8, 8}, rng);
            // Differentiate with respect to the first generator weight.
            worst = std::max(worst, ad::grad_check(
                                        [&](ad::Graph<double>& g, Var<double> w) {
                                            auto gp = regda::bind(g, gen.params);
                                            gp.vars[0] = w;
                                            auto x = g.constant(images);
                                            auto z = apply_regressor(reg.config, regda::bind(g, reg.params),
                                                                     apply_generator(gc, gp, x));
                                            return loss_true(spatial_softmax(z), g.constant(q), log_epsilon).value;
                                        },
                                        gen.params[0].value, 1e-6));
        }
        return worst;
    });
    guarded("softmax sums to one", 1e-9, [&] {
        double worst = 0.0;
        for (std::size_t i = 0; i < 100; ++i) {
            ad::Graph<double> g;
            auto x = g.input("x", {1, 2, 8, 8});
            auto p = spatial_softmax(x);
            g.set_input("x", detail::random_tensor({1, 2, 8, 8}, rng, 10.0));
            g.evaluate();
            for (std::size_t s = 0; s < 2; ++s) {
                double sum = 0.0;
                for (std::size_t j = 0; j < 64; ++j) {
                    const double v = p.value()[s * 64 + j];
                    if (v < 0.0) return kInf;
                    sum += v;
                }
                worst = std::max(worst, std::abs(sum - 1.0));
            }
        }
        return worst;
    });
    guarded("KL oracle (L_T, L_F)", 1e-10, [&] {
        double worst = 0.0;
        const Grid g8{8, 8};
        const TargetSpec spec{g8, sigma, std::nullopt};
        for (std::size_t i = 0; i < 20; ++i) {
            auto logits = detail::random_tensor({1, 2, 8, 8}, rng, 2.0);
            if (i % 4 == 0) logits[static_cast<std::size_t>(rng.below(128))] = 800.0;  // saturated slice
            const auto p = detail::softmax_oracle(logits, 2);
            std::vector<KeypointSet> kp{detail::random_points(2, g8, rng)};
            const auto q = truth_targets<double>(kp, g8, sigma);
            const auto ref = detail::random_tensor({1, 2, 8, 8}, rng);
            const auto pf = ground_false(decode_batch(ref).front(), g8, sigma).maps;

            ad::Graph<double> g;
            auto x = g.input("x", {1, 2, 8, 8});
            auto px = spatial_softmax(x);
            auto lt = loss_true(px, g.constant(q), log_epsilon).value;
            auto lf = loss_false(px, g.constant(ref), spec, log_epsilon).value;
            g.set_input("x", logits);
            g.evaluate();
            worst = std::max(worst, std::abs(lt.value()[0] - detail::kl_oracle(q, p, 2)));
            worst = std::max(worst, std::abs(lf.value()[0] - detail::kl_oracle(pf.reshaped({1, 2, 8, 8}), p, 2)));
            if (!std::isfinite(worst)) return kInf;
        }
        return worst;
    });
    log << (summary.passed() ? "selftest passed" : "selftest FAILED") << "\n";
    return summary;
}

}  // namespace regda

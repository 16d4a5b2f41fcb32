#pragma once

// Keypoint metrics. Distances are in heatmap-grid units; MAE is normalized
// by the grid size.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "regda/heatmap.hpp"

namespace regda {

// Default PCK threshold: a fraction 0.05 of the image size.
inline constexpr double kDefaultPckAlpha = 0.05;

// Unit label printed next to every reported MAE.
inline constexpr const char* kMaeUnit = "grid-normalized";

struct MetricReport {
    double mae = 0.0;
    std::vector<double> pck_per_keypoint;
    double pck = 0.0;
    std::size_t samples = 0;
    double alpha = kDefaultPckAlpha;
};

namespace detail {

inline void check_matched(std::span<const KeypointSet> a, std::span<const KeypointSet> b, const char* who) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(who) + ": " + std::to_string(a.size()) + " predictions vs " +
                                    std::to_string(b.size()) + " ground truths");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].size() != b[i].size())
            throw std::invalid_argument(std::string(who) + ": keypoint count mismatch at sample " + std::to_string(i));
}

inline double distance(const Keypoint& a, const Keypoint& b) { return std::hypot(a.h - b.h, a.w - b.w); }

}  // namespace detail

// Mean over samples and keypoints of mean(|dh|, |dw|) / norm.
inline double mae(std::span<const KeypointSet> preds, std::span<const KeypointSet> gts, double norm) {
    detail::check_matched(preds, gts, "mae");
    if (!(norm > 0)) throw std::invalid_argument("mae: norm must be positive");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t k = 0; k < preds[i].size(); ++k, ++n)
            total += 0.5 * (std::abs(preds[i][k].h - gts[i][k].h) + std::abs(preds[i][k].w - gts[i][k].w)) / norm;
    return n ? total / static_cast<double>(n) : 0.0;
}

// Fraction of keypoints strictly closer than `threshold` (grid units).
inline MetricReport pck_at(std::span<const KeypointSet> preds, std::span<const KeypointSet> gts, double threshold) {
    detail::check_matched(preds, gts, "pck");
    MetricReport r;
    r.samples = preds.size();
    if (preds.empty()) return r;
    const std::size_t k = preds.front().size();
    std::vector<std::size_t> hits(k, 0);
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t j = 0; j < k; ++j)
            if (detail::distance(preds[i][j], gts[i][j]) < threshold) ++hits[j];
    double sum = 0.0;
    for (auto h : hits) {
        r.pck_per_keypoint.push_back(static_cast<double>(h) / static_cast<double>(preds.size()));
        sum += r.pck_per_keypoint.back();
    }
    r.pck = sum / static_cast<double>(k);
    return r;
}

// PCK@alpha with threshold alpha * max(H, W) of the image, mapped onto the
// heatmap grid through the down-sampling ratio.
inline MetricReport pck(std::span<const KeypointSet> preds, std::span<const KeypointSet> gts, double alpha,
                        std::size_t image_size, std::size_t grid_size) {
    if (!(alpha > 0)) throw std::invalid_argument("pck: alpha must be positive");
    if (image_size == 0 || grid_size == 0) throw std::invalid_argument("pck: zero image or grid size");
    const double ratio = static_cast<double>(image_size) / static_cast<double>(grid_size);
    auto r = pck_at(preds, gts, alpha * static_cast<double>(image_size) / ratio);
    r.alpha = alpha;
    r.mae = mae(preds, gts, static_cast<double>(grid_size));
    return r;
}

struct Diagnostics {
    double accuracy_f = 0.0;
    double accuracy_f_adv = 0.0;
    double accuracy_difference = 0.0;
    double prediction_difference = 0.0;  // mean ||y' - y||, grid units
};

inline Diagnostics diagnostics(std::span<const KeypointSet> f_preds, std::span<const KeypointSet> f_adv_preds,
                               std::span<const KeypointSet> gts, double alpha, std::size_t image_size,
                               std::size_t grid_size) {
    detail::check_matched(f_preds, f_adv_preds, "diagnostics");
    detail::check_matched(f_preds, gts, "diagnostics");
    Diagnostics d;
    d.accuracy_f = pck(f_preds, gts, alpha, image_size, grid_size).pck;
    d.accuracy_f_adv = pck(f_adv_preds, gts, alpha, image_size, grid_size).pck;
    d.accuracy_difference = d.accuracy_f - d.accuracy_f_adv;
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < f_preds.size(); ++i)
        for (std::size_t k = 0; k < f_preds[i].size(); ++k, ++n) total += detail::distance(f_adv_preds[i][k], f_preds[i][k]);
    d.prediction_difference = n ? total / static_cast<double>(n) : 0.0;
    return d;
}

}  // namespace regda

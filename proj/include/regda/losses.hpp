#pragma once

// Loss family on B x K x H x W maps: L2 heatmap regression, KL against the
// ground-truth spatial distribution (L_T), KL against the ground-false
// distribution (L_F), plus disparity and disparity discrepancy.
//
// KL is always taken as KL(target || predicted) with log(max(p, 1e-12)).

#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "regda/autodiff.hpp"
#include "regda/heatmap.hpp"

namespace regda {

using ad::Var;

template <typename T>
struct LossValue {
    Var<T> value;         // scalar, mean of per_keypoint
    Var<T> per_keypoint;  // [K], batch mean per keypoint
};

enum class Reduction {
    mean,         // mean over every B*K*H*W entry
    spatial_sum,  // squared L2 distance per map, averaged over B and K
};

enum class DisparityKind { kl, l2 };

// Everything needed to build spatial targets on a grid.
struct TargetSpec {
    Grid grid;
    double sigma = 0.5;
    std::optional<AreaMask> area;  // restricted area for the single-keypoint ground-false map
};

namespace detail {

template <typename T>
void require_maps(const Var<T>& v, const char* op) {
    if (v.shape().size() != 4) throw ShapeError(std::string(op) + ": expected BxKxHxW, got " + to_string(v.shape()));
}

template <typename T>
LossValue<T> reduce_rows(const Var<T>& rows) {
    auto per_k = ad::mean(rows, {0});
    return {ad::mean(per_k), per_k};
}

}  // namespace detail

template <typename T>
Tensor<T> heatmap_targets(std::span<const KeypointSet> batch, const Grid& grid, double sigma) {
    if (batch.empty()) throw std::invalid_argument("heatmap_targets: empty batch");
    const std::size_t k = batch.front().size(), area = grid.area();
    Tensor<T> out({batch.size(), k, grid.height, grid.width});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b].size() != k) throw ShapeError("heatmap_targets: inconsistent keypoint counts");
        const auto h = gaussian_heatmap(batch[b], grid, sigma);
        std::copy(h.maps.vec().begin(), h.maps.vec().end(), out.data() + b * k * area);
    }
    return out;
}

template <typename T>
Tensor<T> truth_targets(std::span<const KeypointSet> batch, const Grid& grid, double sigma) {
    if (batch.empty()) throw std::invalid_argument("truth_targets: empty batch");
    const std::size_t k = batch.front().size(), area = grid.area();
    Tensor<T> out({batch.size(), k, grid.height, grid.width});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b].size() != k) throw ShapeError("truth_targets: inconsistent keypoint counts");
        const auto d = normalize_spatial(gaussian_heatmap(batch[b], grid, sigma));
        std::copy(d.maps.vec().begin(), d.maps.vec().end(), out.data() + b * k * area);
    }
    return out;
}

using ad::spatial_softmax;

// KL(q || p) per (b, k) slice, shape [B, K]. q must not require gradients.
template <typename T>
Var<T> kl_divergence(const Var<T>& q, const Var<T>& p, double eps = ad::kLogEpsilon) {
    detail::require_maps(p, "kl_divergence");
    const auto entropy = ad::sum(ad::mul(q, ad::log(q, eps)), {2, 3});
    const auto cross = ad::sum(ad::mul(q, ad::log(p, eps)), {2, 3});
    return ad::sub(entropy, cross);
}

template <typename T>
LossValue<T> loss_mse(const Var<T>& predicted, const Var<T>& target, Reduction reduction = Reduction::mean) {
    detail::require_maps(predicted, "loss_mse");
    const auto diff = ad::sub(predicted, target);
    auto sq = ad::mul(diff, diff);
    auto rows = reduction == Reduction::mean ? ad::mean(sq, {2, 3}) : ad::sum(sq, {2, 3});
    return detail::reduce_rows(rows);
}

// predicted: spatial distributions; target: P_T maps of the same shape.
template <typename T>
LossValue<T> loss_true(const Var<T>& predicted, const Var<T>& target, double eps = ad::kLogEpsilon) {
    return detail::reduce_rows(kl_divergence(target, predicted, eps));
}

template <typename T>
LossValue<T> loss_true(const Var<T>& predicted, std::span<const KeypointSet> targets, double sigma) {
    detail::require_maps(predicted, "loss_true");
    const Grid grid{predicted.shape()[2], predicted.shape()[3]};
    if (targets.size() != predicted.shape()[0] || targets.front().size() != predicted.shape()[1])
        throw ShapeError("loss_true: " + std::to_string(targets.size()) + " keypoint sets for " +
                         to_string(predicted.shape()));
    auto q = predicted.graph().constant(truth_targets<T>(targets, grid, sigma), "P_T");
    return loss_true(predicted, q);
}

// P_T built at the decoded argmax of `reference` (forward only).
template <typename T>
Var<T> truth_from_prediction(const Var<T>& reference, double sigma) {
    detail::require_maps(reference, "truth_from_prediction");
    const auto ri = reference.id();
    const Grid grid{reference.shape()[2], reference.shape()[3]};
    return reference.graph().add_op("truth_from_prediction", reference.shape(), {ri},
                                    [ri, grid, sigma](ad::Graph<T>& g, ad::Node<T>& n) {
                                        const auto points = decode_batch(g.value(ri));
                                        n.value = truth_targets<T>(points, grid, sigma);
                                    });
}

// P_F built at the decoded argmax of `reference` (forward only).
// K >= 2 uses the other keypoints; K == 1 requires spec.area.
template <typename T>
Var<T> false_from_prediction(const Var<T>& reference, const TargetSpec& spec) {
    detail::require_maps(reference, "false_from_prediction");
    const auto& s = reference.shape();
    const Grid grid{s[2], s[3]};
    if (!(grid == spec.grid)) throw ShapeError("false_from_prediction: map grid differs from target grid");
    std::shared_ptr<const MaskedGroundFalse> masked;
    if (s[1] == 1) {
        if (!spec.area) throw std::invalid_argument("false_from_prediction: single keypoint needs a restricted area");
        masked = std::make_shared<MaskedGroundFalse>(*spec.area, grid, spec.sigma);
    }
    const auto ri = reference.id();
    const double sigma = spec.sigma;
    return reference.graph().add_op(
        "false_from_prediction", s, {ri}, [ri, grid, sigma, masked](ad::Graph<T>& g, ad::Node<T>& n) {
            const auto points = decode_batch(g.value(ri));
            n.value.reset(n.shape);
            const std::size_t area = grid.area();
            std::vector<double> buf(area);
            for (std::size_t b = 0; b < points.size(); ++b) {
                T* dst = n.value.data() + b * points[b].size() * area;
                if (masked) {
                    masked->fill(static_cast<std::size_t>(points[b][0].h), static_cast<std::size_t>(points[b][0].w),
                                 buf.data());
                    std::copy(buf.begin(), buf.end(), dst);
                } else {
                    const auto pf = ground_false(points[b], grid, sigma);
                    std::copy(pf.maps.vec().begin(), pf.maps.vec().end(), dst);
                }
            }
        });
}

// KL(P_F(J(reference)) || predicted); reference is detached.
template <typename T>
LossValue<T> loss_false(const Var<T>& predicted, const Var<T>& reference, const TargetSpec& spec,
                        double eps = ad::kLogEpsilon) {
    detail::require_maps(predicted, "loss_false");
    if (predicted.shape() != reference.shape())
        throw ShapeError("loss_false: " + to_string(predicted.shape()) + " vs reference " + to_string(reference.shape()));
    return detail::reduce_rows(kl_divergence(false_from_prediction(ad::detach(reference), spec), predicted, eps));
}

// Batch-mean loss between two hypotheses' outputs (logit maps).
// kl: KL(P_T(J(b)) || softmax(a)); l2: mean squared difference.
template <typename T>
LossValue<T> disparity(const Var<T>& preds_a, const Var<T>& preds_b, DisparityKind kind, double sigma) {
    detail::require_maps(preds_a, "disparity");
    if (preds_a.shape() != preds_b.shape())
        throw ShapeError("disparity: shape mismatch " + to_string(preds_a.shape()) + " vs " + to_string(preds_b.shape()));
    if (kind == DisparityKind::l2) return loss_mse(preds_a, preds_b);
    return loss_true(spatial_softmax(preds_a), truth_from_prediction(preds_b, sigma));
}

// disp_target(a, b) - disp_source(a, b) as a scalar node.
template <typename T>
Var<T> disparity_discrepancy(const Var<T>& source_a, const Var<T>& source_b, const Var<T>& target_a,
                             const Var<T>& target_b, DisparityKind kind, double sigma) {
    if (source_a.shape()[0] == 0 || target_a.shape()[0] == 0)
        throw std::invalid_argument("disparity_discrepancy: empty batch");
    const auto src = disparity(source_a, source_b, kind, sigma);
    const auto tgt = disparity(target_a, target_b, kind, sigma);
    return ad::sub(tgt.value, src.value);
}

inline double disparity_discrepancy(double disp_target, double disp_source) { return disp_target - disp_source; }

}  // namespace regda

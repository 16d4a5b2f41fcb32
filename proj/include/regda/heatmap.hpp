#pragma once

// Spatial targets: Gaussian heatmaps, their normalized distributions, the
// ground-false distributions built from the other keypoints (or from a
// restricted area when there is a single keypoint), and the argmax decoder.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "regda/tensor.hpp"

namespace regda {

struct Grid {
    std::size_t height = 16;
    std::size_t width = 16;

    std::size_t area() const { return height * width; }
    bool operator==(const Grid&) const = default;
};

// Conventional heatmap width: 2 px on a 64x64 grid.
inline double default_sigma(const Grid& grid) { return static_cast<double>(grid.height) / 32.0; }

struct Keypoint {
    double h = 0.0;
    double w = 0.0;
    bool visible = true;

    bool operator==(const Keypoint&) const = default;
};

// K points in heatmap-grid units.
struct KeypointSet {
    std::vector<Keypoint> points;

    std::size_t size() const { return points.size(); }
    const Keypoint& operator[](std::size_t k) const { return points[k]; }
    Keypoint& operator[](std::size_t k) { return points[k]; }
    bool operator==(const KeypointSet&) const = default;
};

// K x H x W nonnegative maps.
struct Heatmap {
    Tensor<double> maps;
};

// K x H x W maps, each slice summing to one.
struct SpatialDistribution {
    Tensor<double> maps;
};

class AreaMask {
public:
    AreaMask(Grid grid, std::vector<char> cells) : grid_(grid), cells_(std::move(cells)) {
        if (cells_.size() != grid_.area())
            throw std::invalid_argument("AreaMask: " + std::to_string(cells_.size()) + " cells for a " +
                                        std::to_string(grid_.height) + "x" + std::to_string(grid_.width) + " grid");
    }

    // Inclusive rectangle [row_lo, row_hi] x [col_lo, col_hi].
    static AreaMask rectangle(Grid grid, std::size_t row_lo, std::size_t row_hi, std::size_t col_lo,
                              std::size_t col_hi) {
        if (row_lo > row_hi || col_lo > col_hi || row_hi >= grid.height || col_hi >= grid.width)
            throw std::invalid_argument("AreaMask: rectangle outside grid");
        std::vector<char> cells(grid.area(), 0);
        for (std::size_t h = row_lo; h <= row_hi; ++h)
            for (std::size_t w = col_lo; w <= col_hi; ++w) cells[h * grid.width + w] = 1;
        return AreaMask(grid, std::move(cells));
    }

    // Central half of the grid in each direction (16..47 on a 64 grid).
    static AreaMask central(Grid grid) {
        return rectangle(grid, grid.height / 4, grid.height - grid.height / 4 - 1, grid.width / 4,
                         grid.width - grid.width / 4 - 1);
    }

    const Grid& grid() const { return grid_; }
    bool contains(std::size_t h, std::size_t w) const {
        return h < grid_.height && w < grid_.width && cells_[h * grid_.width + w];
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto c : cells_) n += c != 0;
        return n;
    }
    const std::vector<char>& cells() const { return cells_; }

private:
    Grid grid_;
    std::vector<char> cells_;
};

namespace detail {

inline void check_inside(const Keypoint& p, const Grid& grid, const char* where) {
    if (!(p.h >= 0.0 && p.h < static_cast<double>(grid.height) && p.w >= 0.0 &&
          p.w < static_cast<double>(grid.width)))
        throw std::out_of_range(std::string(where) + ": visible point (" + std::to_string(p.h) + ", " +
                                std::to_string(p.w) + ") outside " + std::to_string(grid.height) + "x" +
                                std::to_string(grid.width) + " grid");
}

// Adds amplitude * exp(-d^2 / (2 sigma^2)) centred at (ch, cw) into one slice.
inline void add_gaussian(double* slice, const Grid& grid, double ch, double cw, double sigma, double amplitude) {
    const double inv = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> col(grid.width);
    for (std::size_t w = 0; w < grid.width; ++w) {
        const double dw = static_cast<double>(w) - cw;
        col[w] = dw * dw;
    }
    for (std::size_t h = 0; h < grid.height; ++h) {
        const double dh = static_cast<double>(h) - ch;
        for (std::size_t w = 0; w < grid.width; ++w)
            slice[h * grid.width + w] += amplitude * std::exp(-(dh * dh + col[w]) * inv);
    }
}

inline void normalize_slice(double* slice, std::size_t area, std::size_t k) {
    double total = 0.0;
    for (std::size_t i = 0; i < area; ++i) total += slice[i];
    if (!(total > 0.0) || !std::isfinite(total))
        throw std::domain_error("normalize_spatial: slice " + std::to_string(k) + " has no positive mass");
    for (std::size_t i = 0; i < area; ++i) slice[i] /= total;
}

inline void check_sigma(double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("sigma must be positive");
}

}  // namespace detail

// Unit-amplitude Gaussian per keypoint, evaluated on every grid cell.
// Invisible points yield a uniform slice.
inline Heatmap gaussian_heatmap(const KeypointSet& points, const Grid& grid, double sigma, double amplitude = 1.0) {
    detail::check_sigma(sigma);
    if (points.size() == 0) throw std::invalid_argument("gaussian_heatmap: empty keypoint set");
    Heatmap out{Tensor<double>({points.size(), grid.height, grid.width})};
    for (std::size_t k = 0; k < points.size(); ++k) {
        double* slice = out.maps.data() + k * grid.area();
        if (!points[k].visible) {
            std::fill(slice, slice + grid.area(), amplitude);
            continue;
        }
        detail::check_inside(points[k], grid, "gaussian_heatmap");
        detail::add_gaussian(slice, grid, points[k].h, points[k].w, sigma, amplitude);
    }
    return out;
}

inline SpatialDistribution normalize_spatial(const Heatmap& h) {
    const auto& s = h.maps.shape();
    if (s.size() != 3) throw ShapeError("normalize_spatial: expected KxHxW, got " + to_string(s));
    SpatialDistribution out{h.maps};
    const std::size_t area = s[1] * s[2];
    for (std::size_t k = 0; k < s[0]; ++k) detail::normalize_slice(out.maps.data() + k * area, area, k);
    return out;
}

// Integer argmax per slice; ties resolve to the smallest row-major index.
inline KeypointSet decode(const Tensor<double>& maps) {
    const auto& s = maps.shape();
    if (s.size() != 3) throw ShapeError("decode: expected KxHxW, got " + to_string(s));
    const std::size_t area = s[1] * s[2];
    KeypointSet out;
    for (std::size_t k = 0; k < s[0]; ++k) {
        const double* z = maps.data() + k * area;
        const auto idx = static_cast<std::size_t>(std::max_element(z, z + area) - z);
        out.points.push_back({static_cast<double>(idx / s[2]), static_cast<double>(idx % s[2]), true});
    }
    return out;
}
inline KeypointSet decode(const Heatmap& h) { return decode(h.maps); }
inline KeypointSet decode(const SpatialDistribution& d) { return decode(d.maps); }

// Decodes a batch of B x K x H x W maps stored contiguously.
template <typename T>
std::vector<KeypointSet> decode_batch(const Tensor<T>& maps) {
    const auto& s = maps.shape();
    if (s.size() != 4) throw ShapeError("decode_batch: expected BxKxHxW, got " + to_string(s));
    const std::size_t area = s[2] * s[3];
    std::vector<KeypointSet> out(s[0]);
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t k = 0; k < s[1]; ++k) {
            const T* z = maps.data() + (b * s[1] + k) * area;
            const auto idx = static_cast<std::size_t>(std::max_element(z, z + area) - z);
            out[b].points.push_back({static_cast<double>(idx / s[3]), static_cast<double>(idx % s[3]), true});
        }
    return out;
}

// Slice k is the normalized sum of the heatmaps of every other keypoint.
inline SpatialDistribution ground_false(const KeypointSet& predictions, const Grid& grid, double sigma) {
    detail::check_sigma(sigma);
    const std::size_t k_count = predictions.size();
    if (k_count < 2)
        throw std::invalid_argument("ground_false: needs at least 2 keypoints; use ground_false_masked for K=1");
    const Heatmap single = gaussian_heatmap(predictions, grid, sigma);
    const std::size_t area = grid.area();
    SpatialDistribution out{Tensor<double>({k_count, grid.height, grid.width})};
    for (std::size_t k = 0; k < k_count; ++k) {
        double* dst = out.maps.data() + k * area;
        for (std::size_t other = 0; other < k_count; ++other) {
            if (other == k) continue;
            const double* src = single.maps.data() + other * area;
            for (std::size_t i = 0; i < area; ++i) dst[i] += src[i];
        }
        detail::normalize_slice(dst, area, k);
    }
    return out;
}

// Single-keypoint variant: sums the heatmaps centred on every cell of the
// area except the predicted one, then normalizes.
inline SpatialDistribution ground_false_masked(const KeypointSet& prediction, const AreaMask& mask, const Grid& grid,
                                               double sigma) {
    detail::check_sigma(sigma);
    if (prediction.size() != 1) throw std::invalid_argument("ground_false_masked: expects exactly one keypoint");
    if (!(mask.grid() == grid)) throw std::invalid_argument("ground_false_masked: mask grid differs from target grid");
    if (mask.count() < 2) throw std::invalid_argument("ground_false_masked: area needs at least 2 cells");
    const auto& p = prediction[0];
    detail::check_inside(p, grid, "ground_false_masked");
    SpatialDistribution out{Tensor<double>({1, grid.height, grid.width})};
    for (std::size_t h = 0; h < grid.height; ++h)
        for (std::size_t w = 0; w < grid.width; ++w) {
            if (!mask.contains(h, w)) continue;
            if (static_cast<double>(h) == p.h && static_cast<double>(w) == p.w) continue;
            detail::add_gaussian(out.maps.data(), grid, static_cast<double>(h), static_cast<double>(w), sigma, 1.0);
        }
    detail::normalize_slice(out.maps.data(), grid.area(), 0);
    return out;
}

// Precomputed form of ground_false_masked: the area-wide sum is built once
// and each query removes the predicted cell's own Gaussian.
class MaskedGroundFalse {
public:
    MaskedGroundFalse(const AreaMask& mask, const Grid& grid, double sigma)
        : mask_(mask), grid_(grid), sigma_(sigma), total_(grid.area(), 0.0) {
        detail::check_sigma(sigma);
        if (!(mask.grid() == grid)) throw std::invalid_argument("MaskedGroundFalse: mask grid differs");
        if (mask.count() < 2) throw std::invalid_argument("MaskedGroundFalse: area needs at least 2 cells");
        for (std::size_t h = 0; h < grid.height; ++h)
            for (std::size_t w = 0; w < grid.width; ++w)
                if (mask.contains(h, w))
                    detail::add_gaussian(total_.data(), grid, static_cast<double>(h), static_cast<double>(w), sigma,
                                         1.0);
    }

    // Writes the normalized distribution for an integer prediction into `out` (H*W values).
    void fill(std::size_t h, std::size_t w, double* out) const {
        std::copy(total_.begin(), total_.end(), out);
        if (mask_.contains(h, w)) {
            std::vector<double> own(grid_.area(), 0.0);
            detail::add_gaussian(own.data(), grid_, static_cast<double>(h), static_cast<double>(w), sigma_, 1.0);
            for (std::size_t i = 0; i < own.size(); ++i) out[i] = std::max(0.0, out[i] - own[i]);
        }
        detail::normalize_slice(out, grid_.area(), 0);
    }

    const Grid& grid() const { return grid_; }

private:
    AreaMask mask_;
    Grid grid_;
    double sigma_;
    std::vector<double> total_;
};

}  // namespace regda

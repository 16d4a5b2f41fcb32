#pragma once

// Procedural two-domain keypoint dataset: a single shape on a styled
// background, keypoints at the shape centre (K=1), triangle vertices (K=3)
// or square corners (K=4). Every sample is a pure function of
// (spec, id) through SplitMix64-derived seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "regda/heatmap.hpp"
#include "regda/image_io.hpp"
#include "regda/json_util.hpp"
#include "regda/random.hpp"

namespace regda {

enum class DomainStyle { solid_color, noise_texture, painting_texture };
enum class ShapeKind { ellipse, square, triangle };

REGDA_JSON_ENUM(DomainStyle, {{DomainStyle::solid_color, "solid-color"},
                                           {DomainStyle::noise_texture, "noise-texture"},
                                           {DomainStyle::painting_texture, "painting-texture"}})
REGDA_JSON_ENUM(ShapeKind,
                             {{ShapeKind::ellipse, "ellipse"}, {ShapeKind::square, "square"}, {ShapeKind::triangle, "triangle"}})

inline std::string domain_tag(DomainStyle s) {
    switch (s) {
        case DomainStyle::solid_color: return "C";
        case DomainStyle::noise_texture: return "N";
        case DomainStyle::painting_texture: return "S";
    }
    return "?";
}

// Inclusive rectangle of allowed keypoint cells on the heatmap grid.
struct PositionRange {
    std::size_t row_lo = 4, row_hi = 11, col_lo = 4, col_hi = 11;
    bool operator==(const PositionRange&) const = default;
};

struct DatasetSpec {
    DomainStyle style = DomainStyle::solid_color;
    ShapeKind shape = ShapeKind::ellipse;
    std::size_t keypoints = 1;
    std::size_t image_size = 32;
    std::size_t grid = 16;
    PositionRange range;
    std::size_t count = 1000;
    std::uint64_t seed = 0;
    double shape_size = 1.5;       // half extent in grid cells
    double noise_amplitude = 1.0;  // noise-texture blend weight

    Grid heatmap_grid() const { return {grid, grid}; }
    AreaMask area() const { return AreaMask::rectangle(heatmap_grid(), range.row_lo, range.row_hi, range.col_lo, range.col_hi); }

    void validate() const {
        if (count == 0) throw ConfigError("dataset.count: must be positive");
        if (grid == 0 || image_size == 0 || image_size % grid != 0)
            throw ConfigError("dataset.image_size: must be a positive multiple of dataset.grid");
        if (range.row_lo > range.row_hi || range.col_lo > range.col_hi || range.row_hi >= grid || range.col_hi >= grid)
            throw ConfigError("dataset.range: empty or outside the grid");
        if (keypoints != 1 && keypoints != 3 && keypoints != 4)
            throw ConfigError("dataset.keypoints: must be 1, 3 or 4");
        if (keypoints == 3 && shape != ShapeKind::triangle) throw ConfigError("dataset.keypoints: 3 requires triangle");
        if (keypoints == 4 && shape != ShapeKind::square) throw ConfigError("dataset.keypoints: 4 requires square");
        if (!(shape_size > 0.0)) throw ConfigError("dataset.shape_size: must be positive");
        if (keypoints > 1 && (shape_size != std::floor(shape_size) ||
                              (keypoints == 3 && static_cast<long>(shape_size) % 2 != 0)))
            throw ConfigError("dataset.shape_size: corner keypoints need an integer (even for triangles) size");
        if (noise_amplitude < 0.0 || noise_amplitude > 1.0) throw ConfigError("dataset.noise_amplitude: must lie in [0, 1]");
        if (valid_centres().empty()) throw ConfigError("dataset.range: no centre keeps every keypoint inside the range");
    }

    // Keypoint offsets from the centre, in grid cells.
    std::vector<std::pair<double, double>> offsets() const {
        const double r = shape_size;
        if (keypoints == 3) return {{-r, 0.0}, {r / 2, -r}, {r / 2, r}};
        if (keypoints == 4) return {{-r, -r}, {-r, r}, {r, -r}, {r, r}};
        return {{0.0, 0.0}};
    }

    std::vector<std::pair<std::size_t, std::size_t>> valid_centres() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        const auto offs = offsets();
        for (std::size_t h = range.row_lo; h <= range.row_hi; ++h)
            for (std::size_t w = range.col_lo; w <= range.col_hi; ++w) {
                bool ok = true;
                for (auto [dh, dw] : offs) {
                    const double kh = static_cast<double>(h) + dh, kw = static_cast<double>(w) + dw;
                    ok = ok && kh >= static_cast<double>(range.row_lo) && kh <= static_cast<double>(range.row_hi) &&
                         kw >= static_cast<double>(range.col_lo) && kw <= static_cast<double>(range.col_hi);
                }
                if (ok) out.emplace_back(h, w);
            }
        return out;
    }

    bool operator==(const DatasetSpec&) const = default;
};

inline void to_json(json& j, const PositionRange& r) {
    j = json{{"row_lo", r.row_lo}, {"row_hi", r.row_hi}, {"col_lo", r.col_lo}, {"col_hi", r.col_hi}};
}
inline void from_json(const json& j, PositionRange& r) {
    StrictReader rd(j, "dataset.range");
    rd.require("row_lo", r.row_lo);
    rd.require("row_hi", r.row_hi);
    rd.require("col_lo", r.col_lo);
    rd.require("col_hi", r.col_hi);
    rd.finish();
}
inline void to_json(json& j, const DatasetSpec& s) {
    j = json{{"style", s.style},     {"shape", s.shape}, {"keypoints", s.keypoints},   {"image_size", s.image_size},
             {"grid", s.grid},       {"range", s.range}, {"count", s.count},           {"seed", s.seed},
             {"shape_size", s.shape_size}, {"noise_amplitude", s.noise_amplitude}};
}
inline void from_json(const json& j, DatasetSpec& s) {
    StrictReader r(j, "dataset");
    r.read("style", s.style);
    r.read("shape", s.shape);
    r.read("keypoints", s.keypoints);
    r.read("image_size", s.image_size);
    r.read("grid", s.grid);
    r.read("range", s.range);
    r.read("count", s.count);
    r.read("seed", s.seed);
    r.read("shape_size", s.shape_size);
    r.read("noise_amplitude", s.noise_amplitude);
    r.finish();
}

struct Sample {
    Tensor<float> image;  // [3, H, W], values k/255
    KeypointSet keypoints;
    std::string domain;
    std::size_t id = 0;
    std::uint64_t seed = 0;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<Sample> samples;
    std::vector<std::string> warnings;

    std::size_t size() const { return samples.size(); }
};

namespace detail {

inline float quantize(double v) {
    const double c = std::min(1.0, std::max(0.0, v));
    return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

struct Rgb {
    double r, g, b;
};

inline Rgb random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

inline bool inside_shape(ShapeKind kind, double dy, double dx, double r) {
    switch (kind) {
        case ShapeKind::ellipse: return dy * dy + dx * dx <= r * r;
        case ShapeKind::square: return std::abs(dy) <= r && std::abs(dx) <= r;
        case ShapeKind::triangle: {
            // Vertices (-r, 0), (r/2, -r), (r/2, r); centroid at the origin.
            if (dy > r / 2 || dy < -r) return false;
            const double half_width = (dy + r) * (2.0 / 3.0);
            return std::abs(dx) <= half_width;
        }
    }
    return false;
}

}  // namespace detail

// Renders one sample with the shape centred on grid cell (h, w).
inline Sample render_sample(const DatasetSpec& spec, std::size_t h, std::size_t w, std::uint64_t seed, std::size_t id = 0) {
    const auto centres = spec.valid_centres();
    if (std::find(centres.begin(), centres.end(), std::make_pair(h, w)) == centres.end())
        throw std::out_of_range("render_sample: centre (" + std::to_string(h) + ", " + std::to_string(w) +
                                ") outside the position range");
    const std::size_t n = spec.image_size;
    const double scale = static_cast<double>(n) / static_cast<double>(spec.grid);
    const double cy = (static_cast<double>(h) + 0.5) * scale - 0.5;
    const double cx = (static_cast<double>(w) + 0.5) * scale - 0.5;
    const double radius = spec.shape_size * scale;

    Rng colors(derive_seed(seed, 1));
    const auto bg = detail::random_color(colors);
    auto fg = detail::random_color(colors);
    while (std::abs(fg.r - bg.r) + std::abs(fg.g - bg.g) + std::abs(fg.b - bg.b) < 0.75) fg = detail::random_color(colors);

    std::vector<double> canvas(3 * n * n);
    auto px = [&](std::size_t c, std::size_t y, std::size_t x) -> double& { return canvas[(c * n + y) * n + x]; };
    switch (spec.style) {
        case DomainStyle::solid_color:
        case DomainStyle::noise_texture: {
            Rng noise(derive_seed(seed, 2));
            const double a = spec.style == DomainStyle::noise_texture ? spec.noise_amplitude : 0.0;
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double base[3] = {bg.r, bg.g, bg.b};
                    for (std::size_t c = 0; c < 3; ++c) {
                        const double u = spec.style == DomainStyle::noise_texture ? noise.uniform() : 0.0;
                        px(c, y, x) = (1.0 - a) * base[c] + a * u;
                    }
                }
            break;
        }
        case DomainStyle::painting_texture: {
            // Bilinear value noise over a 5x5 lattice of random colours.
            Rng lattice_rng(derive_seed(seed, 3));
            constexpr std::size_t L = 5;
            std::vector<detail::Rgb> lattice(L * L);
            for (auto& c : lattice) c = detail::random_color(lattice_rng);
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double fy = static_cast<double>(y) / static_cast<double>(n - 1) * (L - 1);
                    const double fx = static_cast<double>(x) / static_cast<double>(n - 1) * (L - 1);
                    const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(fy), L - 2);
                    const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(fx), L - 2);
                    const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
                    auto lerp = [&](auto pick) {
                        const double a = pick(lattice[y0 * L + x0]) * (1 - tx) + pick(lattice[y0 * L + x0 + 1]) * tx;
                        const double b = pick(lattice[(y0 + 1) * L + x0]) * (1 - tx) + pick(lattice[(y0 + 1) * L + x0 + 1]) * tx;
                        return a * (1 - ty) + b * ty;
                    };
                    px(0, y, x) = lerp([](const detail::Rgb& c) { return c.r; });
                    px(1, y, x) = lerp([](const detail::Rgb& c) { return c.g; });
                    px(2, y, x) = lerp([](const detail::Rgb& c) { return c.b; });
                }
            break;
        }
    }
    const double fgc[3] = {fg.r, fg.g, fg.b};
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            if (detail::inside_shape(spec.shape, static_cast<double>(y) - cy, static_cast<double>(x) - cx, radius))
                for (std::size_t c = 0; c < 3; ++c) px(c, y, x) = fgc[c];

    Sample s;
    s.image = Tensor<float>({3, n, n});
    for (std::size_t i = 0; i < canvas.size(); ++i) s.image[i] = detail::quantize(canvas[i]);
    for (auto [dh, dw] : spec.offsets())
        s.keypoints.points.push_back({static_cast<double>(h) + dh, static_cast<double>(w) + dw, true});
    s.domain = domain_tag(spec.style);
    s.id = id;
    s.seed = seed;
    return s;
}

// Positions drawn uniformly over the valid centres with per-sample seeds.
// Samples are independent, so `threads` workers give the same result as one.
inline Dataset make_dataset(const DatasetSpec& spec, std::size_t threads = 1) {
    spec.validate();
    const auto centres = spec.valid_centres();
    Dataset ds{spec, std::vector<Sample>(spec.count), {}};
    auto render_range = [&](std::size_t begin, std::size_t step) {
        for (std::size_t id = begin; id < spec.count; id += step) {
            const std::uint64_t seed = derive_seed(spec.seed, id);
            Rng pos(derive_seed(seed, 0));
            const auto [h, w] = centres[pos.below(centres.size())];
            ds.samples[id] = render_sample(spec, h, w, seed, id);
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, spec.count));
    if (threads == 1) {
        render_range(0, 1);
        return ds;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(render_range, t, threads);
    for (auto& t : pool) t.join();
    return ds;
}

inline std::string sample_file_name(std::size_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu.png", id);
    return buf;
}

// Writes images/<id>.png, annotations.csv and spec.json.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    const std::size_t k = ds.spec.keypoints;
    std::ofstream csv(dir / "annotations.csv");
    if (!csv) throw std::runtime_error("cannot write " + (dir / "annotations.csv").string());
    csv << "# grid=" << ds.spec.grid << "x" << ds.spec.grid << " keypoints=" << k << "\n";
    csv << "id";
    for (std::size_t i = 0; i < k; ++i) csv << ",k" << i << "_h,k" << i << "_w";
    csv << "\n";
    for (const auto& s : ds.samples) {
        const std::size_t n = s.image.dim(1);
        RgbImage img{static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(n), std::vector<std::uint8_t>(3 * n * n)};
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    img.pixels[(y * n + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(s.image.at(c, y, x) * 255.0f));
        write_png(dir / "images" / sample_file_name(s.id), img);
        csv << s.id;
        for (const auto& p : s.keypoints.points) csv << ',' << p.h << ',' << p.w;
        csv << "\n";
    }
    std::ofstream(dir / "spec.json") << json(ds.spec).dump(2) << "\n";
}

// Loads a directory written by save_dataset (or any directory following the
// same layout). Row errors name the line number.
inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    Dataset ds;
    if (fs::exists(dir / "spec.json")) {
        std::ifstream is(dir / "spec.json");
        ds.spec = json::parse(is).get<DatasetSpec>();
    }
    std::ifstream csv(dir / "annotations.csv");
    if (!csv) throw std::runtime_error("missing annotation index " + (dir / "annotations.csv").string());
    std::string line;
    std::size_t line_no = 0, grid = ds.spec.grid, k = ds.spec.keypoints;
    bool header_seen = false;
    while (std::getline(csv, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::size_t gh = 0, gw = 0, kk = 0;
            if (std::sscanf(line.c_str(), "# grid=%zux%zu keypoints=%zu", &gh, &gw, &kk) == 3) {
                grid = gh;
                k = kk;
            }
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            const auto commas = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
            if (line.rfind("id", 0) != 0 || commas % 2 != 0 || commas == 0)
                throw std::runtime_error("annotations.csv line " + std::to_string(line_no) + ": malformed header");
            k = commas / 2;
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 1 + 2 * k)
            throw std::runtime_error("annotations.csv line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(1 + 2 * k) + " columns, got " + std::to_string(cells.size()));
        Sample s;
        try {
            s.id = std::stoul(cells[0]);
            for (std::size_t i = 0; i < k; ++i)
                s.keypoints.points.push_back({std::stod(cells[1 + 2 * i]), std::stod(cells[2 + 2 * i]), true});
        } catch (const std::exception&) {
            throw std::runtime_error("annotations.csv line " + std::to_string(line_no) + ": malformed value");
        }
        for (const auto& p : s.keypoints.points)
            if (!(p.h >= 0 && p.w >= 0 && p.h < static_cast<double>(grid) && p.w < static_cast<double>(grid)))
                throw std::runtime_error("annotations.csv line " + std::to_string(line_no) + ": keypoint (" +
                                         std::to_string(p.h) + ", " + std::to_string(p.w) + ") out of bounds");
        const auto path = dir / "images" / sample_file_name(s.id);
        if (!fs::exists(path))
            throw std::runtime_error("annotations.csv line " + std::to_string(line_no) + ": missing image " + path.string());
        const auto img = read_png(path);
        if (img.width != img.height) throw std::runtime_error("non-square image " + path.string());
        const std::size_t n = img.width;
        s.image = Tensor<float>({3, n, n});
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    s.image.at(c, y, x) = static_cast<float>(img.pixels[(y * n + x) * 3 + c]) / 255.0f;
        s.domain = domain_tag(ds.spec.style);
        s.seed = derive_seed(ds.spec.seed, s.id);
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) ds.warnings.push_back("empty annotation index in " + dir.string());
    ds.spec.grid = grid;
    ds.spec.keypoints = k;
    if (!ds.samples.empty()) ds.spec.image_size = ds.samples.front().image.dim(1);
    ds.spec.count = ds.samples.size();
    return ds;
}

class LabelAccessError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct LabeledBatch {
    Tensor<float> images;  // [B, 3, H, W]
    std::vector<KeypointSet> keypoints;
    std::vector<std::size_t> ids;
};

// Target-domain batch: labels are withheld from the training path.
class UnlabeledBatch {
public:
    UnlabeledBatch() = default;
    UnlabeledBatch(Tensor<float> images, std::vector<std::size_t> ids) : images_(std::move(images)), ids_(std::move(ids)) {}

    const Tensor<float>& images() const { return images_; }
    const std::vector<std::size_t>& ids() const { return ids_; }
    [[noreturn]] const std::vector<KeypointSet>& keypoints() const {
        throw LabelAccessError("target-domain batches are unlabeled; labels are not available during training");
    }

private:
    Tensor<float> images_;
    std::vector<std::size_t> ids_;
};

// Stacks samples[indices] into one batch.
inline LabeledBatch gather(const Dataset& ds, std::span<const std::size_t> indices) {
    if (indices.empty() || ds.samples.empty()) throw std::invalid_argument("gather: empty selection");
    const auto& first = ds.samples[indices[0]].image;
    const std::size_t per = first.size();
    LabeledBatch b;
    b.images = Tensor<float>({indices.size(), first.dim(0), first.dim(1), first.dim(2)});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& s = ds.samples.at(indices[i]);
        std::copy(s.image.vec().begin(), s.image.vec().end(), b.images.data() + i * per);
        b.keypoints.push_back(s.keypoints);
        b.ids.push_back(s.id);
    }
    return b;
}

// Endless epoch-wise shuffled iteration; the trailing partial batch of each
// epoch is dropped.
class BatchIterator {
public:
    BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed)
        : ds_(&ds), batch_(batch_size), seed_(seed) {
        if (batch_size == 0) throw std::invalid_argument("batch_iter: batch size must be >= 1");
        if (ds.size() < batch_size) throw std::invalid_argument("batch_iter: dataset smaller than one batch");
        shuffle();
    }

    std::size_t batches_per_epoch() const { return ds_->size() / batch_; }
    std::size_t epoch() const { return epoch_; }

    LabeledBatch next() {
        if (cursor_ + batch_ > batches_per_epoch() * batch_) {
            ++epoch_;
            shuffle();
        }
        std::span<const std::size_t> idx(order_.data() + cursor_, batch_);
        cursor_ += batch_;
        return gather(*ds_, idx);
    }

    UnlabeledBatch next_unlabeled() {
        auto b = next();
        return UnlabeledBatch(std::move(b.images), std::move(b.ids));
    }

    // Returns to the start of the given epoch.
    void seek(std::size_t epoch, std::size_t batch_index) {
        epoch_ = epoch;
        shuffle();
        cursor_ = batch_index * batch_;
    }
    std::size_t position() const { return cursor_ / batch_; }

private:
    void shuffle() {
        order_.resize(ds_->size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        Rng rng(derive_seed(seed_, epoch_));
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
        cursor_ = 0;
    }

    const Dataset* ds_;
    std::size_t batch_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

}  // namespace regda

#pragma once

// Feature generator (small strided conv encoder) and regressor heads that
// turn features into K logit maps on the heatmap grid, plus the checkpoint
// file format.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "regda/autodiff.hpp"
#include "regda/json_util.hpp"
#include "regda/random.hpp"

namespace regda {

using ad::Var;

struct GeneratorConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 64;
    std::size_t kernel = 3;
    std::vector<std::size_t> channels{16, 32, 32, 32};
    std::vector<std::size_t> strides{2, 2, 1, 1};

    void validate() const {
        if (in_channels == 0 || image_size == 0) throw ConfigError("generator: zero input size");
        if (kernel == 0 || kernel % 2 == 0) throw ConfigError("generator: kernel must be odd");
        if (channels.empty() || channels.size() != strides.size())
            throw ConfigError("generator: channels and strides must be nonempty and of equal length");
        std::size_t product = 1;
        for (std::size_t i = 0; i < strides.size(); ++i) {
            if (strides[i] == 0 || channels[i] == 0) throw ConfigError("generator: zero stride or channel count");
            product *= strides[i];
        }
        if (product > image_size)
            throw ConfigError("generator: stride product " + std::to_string(product) + " exceeds input size " +
                              std::to_string(image_size));
    }

    // Same-padded convolutions: out = floor((in - 1) / stride) + 1.
    std::size_t output_size() const {
        std::size_t s = image_size;
        for (auto st : strides) s = (s - 1) / st + 1;
        return s;
    }
    std::size_t out_channels() const { return channels.back(); }
    bool operator==(const GeneratorConfig&) const = default;
};

struct RegressorConfig {
    std::size_t in_channels = 32;
    std::size_t feature_size = 16;
    std::size_t width = 64;
    std::size_t keypoints = 1;
    std::size_t grid = 16;

    // Number of x2 transposed-conv stages needed to reach the grid.
    std::size_t upsample_stages() const {
        std::size_t n = 0, s = feature_size;
        while (s < grid) {
            s *= 2;
            ++n;
        }
        return n;
    }

    void validate() const {
        if (in_channels == 0 || width == 0 || keypoints == 0 || grid == 0 || feature_size == 0)
            throw ConfigError("regressor: zero dimension");
        if ((feature_size << upsample_stages()) != grid)
            throw ConfigError("regressor: grid " + std::to_string(grid) + " is not feature size " +
                              std::to_string(feature_size) + " times a power of two");
    }
    bool operator==(const RegressorConfig&) const = default;
};

struct ModelConfig {
    GeneratorConfig generator;
    std::size_t head_width = 64;
    std::size_t keypoints = 1;
    std::size_t grid = 16;

    RegressorConfig regressor() const {
        return {generator.out_channels(), generator.output_size(), head_width, keypoints, grid};
    }
    void validate() const {
        generator.validate();
        regressor().validate();
    }
    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(json& j, const GeneratorConfig& c) {
    j = json{{"in_channels", c.in_channels}, {"image_size", c.image_size}, {"kernel", c.kernel},
             {"channels", c.channels},       {"strides", c.strides}};
}
inline void from_json(const json& j, GeneratorConfig& c) {
    StrictReader r(j, "generator");
    r.read("in_channels", c.in_channels);
    r.read("image_size", c.image_size);
    r.read("kernel", c.kernel);
    r.read("channels", c.channels);
    r.read("strides", c.strides);
    r.finish();
}
inline void to_json(json& j, const RegressorConfig& c) {
    j = json{{"in_channels", c.in_channels}, {"feature_size", c.feature_size}, {"width", c.width},
             {"keypoints", c.keypoints},     {"grid", c.grid}};
}
inline void from_json(const json& j, RegressorConfig& c) {
    StrictReader r(j, "regressor");
    r.read("in_channels", c.in_channels);
    r.read("feature_size", c.feature_size);
    r.read("width", c.width);
    r.read("keypoints", c.keypoints);
    r.read("grid", c.grid);
    r.finish();
}
inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"generator", c.generator}, {"head_width", c.head_width}, {"keypoints", c.keypoints}, {"grid", c.grid}};
}
inline void from_json(const json& j, ModelConfig& c) {
    StrictReader r(j, "model");
    r.read("generator", c.generator);
    r.read("head_width", c.head_width);
    r.read("keypoints", c.keypoints);
    r.read("grid", c.grid);
    r.finish();
}

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> value;
    bool operator==(const NamedTensor&) const = default;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

template <typename T>
struct GeneratorParams {
    GeneratorConfig config;
    ParamList<T> params;
};

template <typename T>
struct RegressorParams {
    RegressorConfig config;
    ParamList<T> params;
};

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
}

namespace detail {

// He (fan-in) normal initialization.
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.vec()) v = static_cast<T>(std_dev * rng.normal());
    return t;
}

}  // namespace detail

template <typename T>
GeneratorParams<T> build_generator(const GeneratorConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    GeneratorParams<T> g{config, {}};
    std::size_t in = config.in_channels;
    const std::size_t k = config.kernel;
    for (std::size_t i = 0; i < config.channels.size(); ++i) {
        const std::size_t out = config.channels[i];
        const auto stem = "generator.conv" + std::to_string(i);
        g.params.push_back({stem + ".weight", detail::he_normal<T>({out, in, k, k}, in * k * k, rng)});
        g.params.push_back({stem + ".bias", Tensor<T>({out})});
        in = out;
    }
    return g;
}

template <typename T>
RegressorParams<T> build_regressor(const RegressorConfig& config, std::uint64_t seed, const std::string& name = "head") {
    config.validate();
    Rng rng(seed);
    RegressorParams<T> r{config, {}};
    std::size_t in = config.in_channels;
    const std::size_t w = config.width;
    for (std::size_t i = 0; i < config.upsample_stages(); ++i) {
        const auto stem = name + ".up" + std::to_string(i);
        r.params.push_back({stem + ".weight", detail::he_normal<T>({in, w, 4, 4}, in * 4, rng)});
        r.params.push_back({stem + ".bias", Tensor<T>({w})});
        in = w;
    }
    for (std::size_t i = 0; i < 2; ++i) {
        const auto stem = name + ".conv" + std::to_string(i);
        r.params.push_back({stem + ".weight", detail::he_normal<T>({w, in, 3, 3}, in * 9, rng)});
        r.params.push_back({stem + ".bias", Tensor<T>({w})});
        in = w;
    }
    r.params.push_back({name + ".project.weight", detail::he_normal<T>({config.keypoints, w, 1, 1}, w, rng)});
    r.params.push_back({name + ".project.bias", Tensor<T>({config.keypoints})});
    return r;
}

// Parameter leaves of one module inside a graph.
template <typename T>
struct BoundParams {
    std::vector<Var<T>> vars;

    // Detached views: forward values identical, no gradient reaches the parameters.
    BoundParams frozen() const {
        BoundParams out;
        for (const auto& v : vars) out.vars.push_back(ad::detach(v));
        return out;
    }
};

template <typename T>
BoundParams<T> bind(ad::Graph<T>& g, const ParamList<T>& params) {
    BoundParams<T> out;
    for (const auto& p : params) out.vars.push_back(g.parameter(p.name, p.value));
    return out;
}

template <typename T>
Var<T> apply_generator(const GeneratorConfig& config, const BoundParams<T>& p, Var<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != config.in_channels || s[2] != config.image_size || s[3] != config.image_size)
        throw ShapeError("generator: expected [B," + std::to_string(config.in_channels) + "," +
                         std::to_string(config.image_size) + "," + std::to_string(config.image_size) + "], got " +
                         to_string(s));
    if (p.vars.size() != 2 * config.channels.size()) throw std::invalid_argument("generator: parameter count mismatch");
    for (std::size_t i = 0; i < config.channels.size(); ++i) {
        x = ad::conv2d(x, p.vars[2 * i], p.vars[2 * i + 1], {config.strides[i], config.kernel / 2});
        x.graph().set_label(x, "generator.conv" + std::to_string(i));
        x = ad::relu(x);
    }
    return x;
}

template <typename T>
Var<T> apply_regressor(const RegressorConfig& config, const BoundParams<T>& p, Var<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != config.in_channels || s[2] != config.feature_size || s[3] != config.feature_size)
        throw ShapeError("regressor: unexpected feature shape " + to_string(s));
    const std::size_t ups = config.upsample_stages();
    if (p.vars.size() != 2 * (ups + 3)) throw std::invalid_argument("regressor: parameter count mismatch");
    std::size_t i = 0;
    for (std::size_t u = 0; u < ups; ++u, i += 2) {
        x = ad::relu(ad::conv_transpose2d(x, p.vars[i], p.vars[i + 1], {2, 1}));
        x.graph().set_label(x, "regressor.up" + std::to_string(u));
    }
    for (std::size_t c = 0; c < 2; ++c, i += 2) {
        x = ad::conv2d(x, p.vars[i], p.vars[i + 1], {1, 1});
        x.graph().set_label(x, "regressor.conv" + std::to_string(c));
        x = ad::relu(x);
    }
    x = ad::conv2d(x, p.vars[i], p.vars[i + 1], {1, 0});
    x.graph().set_label(x, "regressor.project");
    return x;
}

// Logits [B, K, grid, grid] of (f o psi)(images).
template <typename T>
Var<T> forward(const GeneratorParams<T>& gen, const RegressorParams<T>& reg, Var<T> images) {
    auto& g = images.graph();
    return apply_regressor(reg.config, regda::bind(g, reg.params), apply_generator(gen.config, regda::bind(g, gen.params), images));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian):
//   "REGDACKP" | u32 version | u32 scalar bytes | u64 n | n bytes of JSON metadata
//   | u64 array count | per array: u32 name length, name, u32 rank, u64 dims, raw values
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
    json meta;
    std::vector<NamedTensor<T>> arrays;

    const Tensor<T>& array(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return a.value;
        throw std::out_of_range("checkpoint: no array named '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return true;
        return false;
    }
};

namespace detail {

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V take(std::istream& is, const std::string& path) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw std::runtime_error("checkpoint: truncated file " + path);
    return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
    static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
    os.write("REGDACKP", 8);
    detail::put<std::uint32_t>(os, kCheckpointVersion);
    detail::put<std::uint32_t>(os, sizeof(T));
    const std::string meta = ckpt.meta.dump();
    detail::put<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::put<std::uint64_t>(os, ckpt.arrays.size());
    for (const auto& a : ckpt.arrays) {
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.value.rank()));
        for (auto d : a.value.shape()) detail::put<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(a.value.data()), static_cast<std::streamsize>(a.value.size() * sizeof(T)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    const auto p = path.string();
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, "REGDACKP", 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + p);
    const auto version = detail::take<std::uint32_t>(is, p);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) + " in " + p);
    const auto scalar = detail::take<std::uint32_t>(is, p);
    if (scalar != 4 && scalar != 8) throw std::runtime_error("checkpoint: bad scalar width in " + p);
    Checkpoint<T> ckpt;
    const auto meta_len = detail::take<std::uint64_t>(is, p);
    if (meta_len > (std::uint64_t{1} << 26)) throw std::runtime_error("checkpoint: corrupt metadata length in " + p);
    std::string meta(meta_len, '\0');
    if (!is.read(meta.data(), static_cast<std::streamsize>(meta.size()))) throw std::runtime_error("checkpoint: truncated " + p);
    ckpt.meta = json::parse(meta);
    const auto count = detail::take<std::uint64_t>(is, p);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::take<std::uint32_t>(is, p);
        if (name_len > 4096) throw std::runtime_error("checkpoint: corrupt array name in " + p);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name.size()));
        const auto rank = detail::take<std::uint32_t>(is, p);
        if (rank > 8) throw std::runtime_error("checkpoint: corrupt rank for '" + name + "' in " + p);
        Shape shape(rank);
        std::uint64_t elements = 1;
        for (auto& d : shape) {
            d = detail::take<std::uint64_t>(is, p);
            if (d > (std::uint64_t{1} << 32) || (elements *= std::max<std::uint64_t>(d, 1)) > (std::uint64_t{1} << 32))
                throw std::runtime_error("checkpoint: corrupt shape for '" + name + "' in " + p);
        }
        Tensor<T> value(shape);
        if (scalar == sizeof(T)) {
            is.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(T)));
        } else if (scalar == 4) {
            std::vector<float> raw(value.size());
            is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
            std::copy(raw.begin(), raw.end(), value.data());
        } else {
            std::vector<double> raw(value.size());
            is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 8));
            std::transform(raw.begin(), raw.end(), value.data(), [](double v) { return static_cast<T>(v); });
        }
        if (!is) throw std::runtime_error("checkpoint: truncated array '" + name + "' in " + p);
        ckpt.arrays.push_back({std::move(name), std::move(value)});
    }
    return ckpt;
}

// Copies arrays named like the module's parameters back into it.
template <typename T>
void restore_params(ParamList<T>& params, const Checkpoint<T>& ckpt) {
    for (auto& p : params) {
        const auto& src = ckpt.array(p.name);
        if (src.shape() != p.value.shape())
            throw ShapeError("checkpoint: '" + p.name + "' has shape " + to_string(src.shape()) + ", model expects " +
                             to_string(p.value.shape()));
        p.value = src;
    }
}

}  // namespace regda

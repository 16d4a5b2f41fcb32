#pragma once

// Run configuration for the command-line tool: training settings plus the
// three datasets (given either as a directory or as a generator spec).

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "regda/data.hpp"
#include "regda/train.hpp"

namespace regda {

struct DataSource {
    std::optional<std::string> path;
    std::optional<DatasetSpec> spec;

    Dataset load(const std::filesystem::path& base = {}) const {
        if (path) {
            std::filesystem::path p(*path);
            if (p.is_relative() && !base.empty()) p = base / p;
            if (!std::filesystem::is_directory(p)) throw ConfigError("dataset directory not found: " + p.string());
            return load_dataset(p);
        }
        if (spec) return make_dataset(*spec);
        throw ConfigError("dataset needs either \"path\" or \"spec\"");
    }
};

inline void to_json(json& j, const DataSource& d) {
    j = json::object();
    if (d.path) j["path"] = *d.path;
    if (d.spec) j["spec"] = *d.spec;
}
inline void from_json(const json& j, DataSource& d) {
    StrictReader r(j, "");
    d = {};
    if (r.has("path")) {
        std::string p;
        r.read("path", p);
        d.path = p;
    }
    if (r.has("spec")) {
        DatasetSpec s;
        r.read("spec", s);
        d.spec = s;
    }
    r.finish();
    if (d.path.has_value() == d.spec.has_value()) throw ConfigError("exactly one of \"path\" or \"spec\" is required");
}

struct RunConfig {
    TrainConfig train{};
    DataSource source;
    DataSource target;
    DataSource target_eval;
    std::size_t checkpoint_every = 1000;  // steps between resumable checkpoints; 0 disables

    static RunConfig defaults() {
        RunConfig c;
        DatasetSpec s;
        s.style = DomainStyle::solid_color;
        s.image_size = c.train.model.generator.image_size;
        s.grid = c.train.model.grid;
        s.count = 5000;
        s.seed = 1;
        DatasetSpec t = s;
        t.style = DomainStyle::noise_texture;
        t.noise_amplitude = 0.5;
        t.seed = 2;
        DatasetSpec e = t;
        e.count = 500;
        e.seed = 3;
        c.source.spec = s;
        c.target.spec = t;
        c.target_eval.spec = e;
        return c;
    }

    void validate() const {
        train.validate();
        for (const auto* d : {&source, &target, &target_eval}) {
            if (!d->spec) continue;
            d->spec->validate();
            if (d->spec->grid != train.model.grid)
                throw ConfigError("dataset grid " + std::to_string(d->spec->grid) + " differs from model grid " +
                                  std::to_string(train.model.grid));
            if (d->spec->image_size != train.model.generator.image_size)
                throw ConfigError("dataset image size " + std::to_string(d->spec->image_size) +
                                  " differs from model input " + std::to_string(train.model.generator.image_size));
            if (d->spec->keypoints != train.model.keypoints)
                throw ConfigError("dataset keypoints " + std::to_string(d->spec->keypoints) + " differ from model keypoints " +
                                  std::to_string(train.model.keypoints));
        }
    }
};

inline void to_json(json& j, const RunConfig& c) {
    j = json{{"train", c.train},
             {"source", c.source},
             {"target", c.target},
             {"target_eval", c.target_eval},
             {"checkpoint_every", c.checkpoint_every}};
}
inline void from_json(const json& j, RunConfig& c) {
    c = RunConfig::defaults();
    StrictReader r(j, "");
    r.read("train", c.train);
    r.read("source", c.source);
    r.read("target", c.target);
    r.read("target_eval", c.target_eval);
    r.read("checkpoint_every", c.checkpoint_every);
    r.finish();
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    auto c = read_json_file(path).get<RunConfig>();
    c.validate();
    return c;
}

}  // namespace regda

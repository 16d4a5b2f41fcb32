#pragma once

// Strict reading of JSON objects: every key must be consumed, unknown keys
// are rejected with their full dotted path.

#include <json.hpp>

#include <set>
#include <utility>
#include <stdexcept>
#include <string>

namespace regda {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class StrictReader {
public:
    StrictReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    template <typename V>
    void read(const std::string& key, V& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            out = it->template get<V>();
        } catch (const ConfigError& e) {
            throw ConfigError(field(key) + ": " + e.what());
        } catch (const json::exception& e) {
            throw ConfigError(field(key) + ": " + e.what());
        }
    }

    template <typename V>
    void require(const std::string& key, V& out) {
        if (!obj_.contains(key)) throw ConfigError(field(key) + ": missing required field");
        read(key, out);
    }

    bool has(const std::string& key) const { return obj_.contains(key); }

    // Returns the sub-object, marking the key as consumed.
    const json& child(const std::string& key) {
        seen_.insert(key);
        return obj_.at(key);
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
    }

private:
    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

// Like NLOHMANN_JSON_SERIALIZE_ENUM, but unknown strings are an error instead
// of silently mapping to the first enumerator.
#define REGDA_JSON_ENUM(ENUM_TYPE, ...)                                                                   \
    inline void to_json(::regda::json& j, const ENUM_TYPE& e) {                                           \
        static const std::pair<ENUM_TYPE, const char*> m[] = __VA_ARGS__;                                 \
        for (const auto& [v, name] : m)                                                                   \
            if (v == e) {                                                                                 \
                j = name;                                                                                 \
                return;                                                                                   \
            }                                                                                             \
        throw ::regda::ConfigError(#ENUM_TYPE ": value out of range");                                    \
    }                                                                                                     \
    inline void from_json(const ::regda::json& j, ENUM_TYPE& e) {                                         \
        static const std::pair<ENUM_TYPE, const char*> m[] = __VA_ARGS__;                                 \
        std::string valid;                                                                                \
        for (const auto& [v, name] : m) {                                                                 \
            if (j.is_string() && j.get<std::string>() == name) {                                          \
                e = v;                                                                                    \
                return;                                                                                   \
            }                                                                                             \
            valid += valid.empty() ? "" : ", ";                                                           \
            valid += name;                                                                                \
        }                                                                                                 \
        throw ::regda::ConfigError("unknown " #ENUM_TYPE " " + j.dump() + " (expected one of " + valid + ")"); \
    }

}  // namespace regda

#pragma once

// Strict JSON object access: typed getters plus unknown-key rejection, so a
// typo in a config file fails loudly instead of silently using a default.

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "s2i/tensor.hpp"

namespace s2i {

using Json = nlohmann::json;

namespace jsonio {

inline void check_keys(const Json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(detail::str(where, ": expected a JSON object"));
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(detail::str(where, ": unknown key '", it.key(), "'"));
}

template <typename T>
T get(const Json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key)) throw ConfigError(detail::str(where, ": missing key '", key, "'"));
    try {
        return obj.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError(detail::str(where, ": bad value for '", key, "': ", e.what()));
    }
}

template <typename T>
T get_or(const Json& obj, const std::string& key, T fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError(detail::str(where, ": bad value for '", key, "': ", e.what()));
    }
}

inline Json parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(detail::str("cannot open ", path));
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw ConfigError(detail::str(path, ": invalid JSON: ", e.what()));
    }
}

}  // namespace jsonio
}  // namespace s2i

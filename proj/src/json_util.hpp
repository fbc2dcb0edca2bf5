#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mudaf/errors.hpp"

namespace mudaf::detail {

// Rejects keys outside `allowed` so typos in config files surface early.
inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, std::string_view what) {
    require(j.is_object(), ErrorKind::config, std::string(what) + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (auto key : allowed) known = known || it.key() == key;
        require(known, ErrorKind::config, "unknown key '" + it.key() + "' in " + std::string(what));
    }
}

template <typename T>
void read_optional(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::config, std::string("bad value for '") + key + "': " + e.what());
    }
}

inline nlohmann::json parse_json(std::string_view text, std::string_view what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::input, "cannot parse " + std::string(what) + ": " + e.what());
    }
}

}  // namespace mudaf::detail

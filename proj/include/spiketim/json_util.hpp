#pragma once

#include <initializer_list>
#include <string>
#include <type_traits>

#include "json.hpp"

#include "spiketim/errors.hpp"

namespace spiketim::json_util {

// Rejects any key of `object` not in `allowed`.
inline void require_known_keys(const nlohmann::json& object,
                               std::initializer_list<const char*> allowed,
                               const std::string& context) {
  if (!object.is_object()) throw ConfigError(context + " must be a JSON object");
  for (const auto& item : object.items()) {
    bool known = false;
    for (const char* key : allowed) known = known || item.key() == key;
    if (!known) throw ConfigError("unknown config key '" + context + "." + item.key() + "'");
  }
}

// Reads object[key] into `out` when present; type errors become ConfigError.
template <typename T>
void read_optional(const nlohmann::json& object, const char* key, T& out,
                   const std::string& context) {
  auto it = object.find(key);
  if (it == object.end()) return;
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!it->is_number_integer() || it->template get<std::int64_t>() < 0) {
      throw ConfigError("config key '" + context + "." + key + "' must be a non-negative integer");
    }
  }
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + context + "." + key + "' has the wrong type: " + e.what());
  }
}

}  // namespace spiketim::json_util

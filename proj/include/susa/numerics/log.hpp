#pragma once

#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>

namespace susa::log {

using Field = std::pair<std::string_view, std::string>;

enum class Level { debug, info, warn };

/// Emits one line-oriented record: `level:<lvl> event:<name> key:value ...`.
void record(Level level, std::string_view event, std::initializer_list<Field> fields = {});

inline void info(std::string_view event, std::initializer_list<Field> fields = {}) {
  record(Level::info, event, fields);
}
inline void warn(std::string_view event, std::initializer_list<Field> fields = {}) {
  record(Level::warn, event, fields);
}

/// Replaces the output sink (stderr by default). Pass nullptr to restore it.
void set_sink(std::function<void(const std::string&)> sink);
void set_min_level(Level level);

/// Formats a value for a key:value record; strings with spaces are quoted.
std::string value(double v);
std::string value(std::string_view s);

}  // namespace susa::log

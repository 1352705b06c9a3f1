#include "susa/numerics/log.hpp"

#include <fmt/format.h>

#include <iostream>
#include <mutex>

namespace susa::log {

namespace {
std::mutex g_mutex;
std::function<void(const std::string&)> g_sink;
Level g_min_level = Level::info;

std::string_view level_name(Level level) {
  switch (level) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
  }
  return "info";
}
}  // namespace

void record(Level level, std::string_view event, std::initializer_list<Field> fields) {
  std::lock_guard lock(g_mutex);
  if (level < g_min_level) return;
  std::string line = fmt::format("level:{} event:{}", level_name(level), event);
  for (const auto& [key, val] : fields) line += fmt::format(" {}:{}", key, val);
  if (g_sink) {
    g_sink(line);
  } else {
    std::cerr << line << '\n';
  }
}

void set_sink(std::function<void(const std::string&)> sink) {
  std::lock_guard lock(g_mutex);
  g_sink = std::move(sink);
}

void set_min_level(Level level) {
  std::lock_guard lock(g_mutex);
  g_min_level = level;
}

std::string value(double v) { return fmt::format("{}", v); }

std::string value(std::string_view s) {
  if (s.find_first_of(" \t\"") == std::string_view::npos && !s.empty()) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

}  // namespace susa::log

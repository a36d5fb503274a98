#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace protodetect::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

/// Verbosity comes from PROTODETECT_LOG (error|warn|info|debug), default info.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("PROTODETECT_LOG");
    if (env == nullptr) return Level::kInfo;
    const std::string_view v(env);
    if (v == "error") return Level::kError;
    if (v == "warn") return Level::kWarn;
    if (v == "debug") return Level::kDebug;
    return Level::kInfo;
  }();
  return level;
}

inline void write(Level level, std::string_view msg) {
  if (level > threshold()) return;
  static constexpr const char* kTags[] = {"error", "warn", "info", "debug"};
  std::cerr << "[protodetect " << kTags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void error(std::string_view msg) { write(Level::kError, msg); }
inline void warn(std::string_view msg) { write(Level::kWarn, msg); }
inline void info(std::string_view msg) { write(Level::kInfo, msg); }
inline void debug(std::string_view msg) { write(Level::kDebug, msg); }

}  // namespace protodetect::log

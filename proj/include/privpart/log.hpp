#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace privpart {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

// Level comes from PRIVPART_LOG (debug|info|warn|error|off); default warn.
inline LogLevel& log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("PRIVPART_LOG");
    if (!env) return LogLevel::warn;
    if (!std::strcmp(env, "debug")) return LogLevel::debug;
    if (!std::strcmp(env, "info")) return LogLevel::info;
    if (!std::strcmp(env, "warn")) return LogLevel::warn;
    if (!std::strcmp(env, "error")) return LogLevel::error;
    if (!std::strcmp(env, "off")) return LogLevel::off;
    return LogLevel::warn;
  }();
  return level;
}

inline void log_msg(LogLevel lvl, const std::string& msg) {
  static const char* names[] = {"debug", "info", "warn", "error"};
  if (lvl < log_level() || lvl == LogLevel::off) return;
  std::fprintf(stderr, "[privpart %s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
}

inline void log_debug(const std::string& msg) { log_msg(LogLevel::debug, msg); }
inline void log_info(const std::string& msg) { log_msg(LogLevel::info, msg); }
inline void log_warn(const std::string& msg) { log_msg(LogLevel::warn, msg); }
inline void log_error(const std::string& msg) { log_msg(LogLevel::error, msg); }

}  // namespace privpart

#pragma once

#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace lossforge {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value produced by a tape op or an optimizer update.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnknownLeaf : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("LOSSFORGE_LOG");
    if (env == nullptr) return LogLevel::kError;
    std::string s(env);
    if (s == "debug") return LogLevel::kDebug;
    if (s == "info") return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

inline void log_msg(LogLevel level, const std::string& msg, const char* tag = nullptr) {
  if (level > log_level()) return;
  if (tag == nullptr)
    tag = level == LogLevel::kError ? "error" : level == LogLevel::kInfo ? "info" : "debug";
  std::fprintf(stderr, "[lossforge:%s] %s\n", tag, msg.c_str());
}

inline void log_warn(const std::string& msg) { log_msg(LogLevel::kError, msg, "warn"); }
inline void log_info(const std::string& msg) { log_msg(LogLevel::kInfo, msg); }
inline void log_debug(const std::string& msg) { log_msg(LogLevel::kDebug, msg); }

}  // namespace lossforge

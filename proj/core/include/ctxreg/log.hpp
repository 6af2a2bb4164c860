#pragma once

#include <functional>
#include <string_view>

namespace ctxreg {

enum class LogLevel { kInfo, kWarning };

using LogSink = std::function<void(LogLevel, std::string_view)>;

/// Replaces the process-wide sink (stderr by default). Returns the old one.
LogSink set_log_sink(LogSink sink);
void log_message(LogLevel level, std::string_view message);
inline void log_warning(std::string_view message) { log_message(LogLevel::kWarning, message); }
inline void log_info(std::string_view message) { log_message(LogLevel::kInfo, message); }

}  // namespace ctxreg

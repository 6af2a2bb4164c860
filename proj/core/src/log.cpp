#include "ctxreg/log.hpp"

#include <iostream>
#include <mutex>

namespace ctxreg {
namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

LogSink& sink() {
  static LogSink s = [](LogLevel level, std::string_view msg) {
    std::cerr << (level == LogLevel::kWarning ? "warning: " : "") << msg << '\n';
  };
  return s;
}

}  // namespace

LogSink set_log_sink(LogSink next) {
  std::lock_guard lock(sink_mutex());
  LogSink old = std::move(sink());
  sink() = std::move(next);
  return old;
}

void log_message(LogLevel level, std::string_view message) {
  std::lock_guard lock(sink_mutex());
  if (sink()) sink()(level, message);
}

}  // namespace ctxreg

#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace ctxreg {

/// Invalid or incomplete configuration (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `key = value` lines; `#` starts a comment. Every expected key must be read
/// exactly through the typed getters, and finish() rejects leftovers.
class KeyValueReader {
 public:
  explicit KeyValueReader(std::istream& in, std::string source_name = "<config>");

  std::string get_string(const std::string& key);
  double get_double(const std::string& key);
  std::uint64_t get_uint(const std::string& key);
  bool get_bool(const std::string& key);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  /// Throws ConfigError naming the first key that was never consumed.
  void finish() const;

 private:
  const std::string& raw(const std::string& key);

  std::string source_;
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

/// Formats a double so that reading it back yields the same value.
std::string format_exact(double value);

}  // namespace ctxreg

#include "ctxreg/keyvalue.hpp"

#include <charconv>
#include <cstdio>
#include <string_view>

namespace ctxreg {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace

KeyValueReader::KeyValueReader(std::istream& in, std::string source_name) : source_(std::move(source_name)) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source_ + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError(source_ + ":" + std::to_string(line_no) + ": empty key");
    if (!values_.emplace(key, value).second) {
      throw ConfigError(source_ + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }
}

const std::string& KeyValueReader::raw(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(source_ + ": missing key '" + key + "'");
  consumed_.insert(key);
  return it->second;
}

std::string KeyValueReader::get_string(const std::string& key) { return raw(key); }

double KeyValueReader::get_double(const std::string& key) {
  const std::string& v = raw(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(source_ + ": key '" + key + "' expects a number, got '" + v + "'");
  }
}

std::uint64_t KeyValueReader::get_uint(const std::string& key) {
  const std::string& v = raw(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(source_ + ": key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool KeyValueReader::get_bool(const std::string& key) {
  const std::string& v = raw(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(source_ + ": key '" + key + "' expects true/false, got '" + v + "'");
}

void KeyValueReader::finish() const {
  for (const auto& [key, value] : values_) {
    if (!consumed_.count(key)) throw ConfigError(source_ + ": unknown key '" + key + "'");
  }
}

std::string format_exact(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

}  // namespace ctxreg

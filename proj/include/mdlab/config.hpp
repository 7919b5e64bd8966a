#pragma once

#include <map>
#include <optional>
#include <string>

namespace mdlab {

// Flat `key = value` configuration with `[section]` headers. Lookups use
// "section.key". Precedence is defaults < config file < flag overrides;
// overrides are applied by calling set() after parsing.
class Config {
 public:
  static Config parse_text(const std::string& text, const std::string& origin = "<config>");
  static Config parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace mdlab

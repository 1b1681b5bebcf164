#pragma once

// Flat `key=value` text configuration, one entry per line, `#` comments.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace sond {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& is);
  static KeyValueConfig parse_string(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  /// Sorted `key=value` lines.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace sond

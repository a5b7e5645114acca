#pragma once

#include <map>
#include <string>
#include <vector>

#include "cvrnet/errors.hpp"

namespace cvrnet {

/// Flat key=value configuration text: one pair per line, '#' comments,
/// blank lines ignored. Keys mirror the CLI flag names.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// Deterministic (sorted keys) serialization.
  std::string str() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace cvrnet

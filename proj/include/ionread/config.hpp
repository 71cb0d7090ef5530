#pragma once
#include <map>
#include <string>

namespace ionread::harness {

/// Flat key-value configuration with [section] headers; keys are addressed
/// as "section.key". Physical quantities carry their unit in the key name
/// (exposure_us, lifetime_ms, spacing_um, ...).
class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int_or(const std::string& key, long long fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_double(const std::string& key, double value);
  void set_int(const std::string& key, long long value);

  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Rendered grouped by section, keys sorted; suitable as a manifest that
  /// can be parsed back with parse_file.
  std::string to_text() const;
  void write(const std::string& path) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace ionread::harness

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bagforge/errors.hpp"

namespace bagforge {

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

/// Fixed-point text with the given number of decimals.
std::string format_fixed(double value, int decimals);

double parse_double(std::string_view text, std::string_view what);
std::int64_t parse_int(std::string_view text, std::string_view what);
bool parse_bool(std::string_view text, std::string_view what);

std::vector<std::string> split(std::string_view text, char sep);
std::string_view trim(std::string_view text);

/// One CSV record with RFC 4180 quoting; `line_no` is used in errors.
std::vector<std::string> parse_csv_row(std::string_view line, std::size_t line_no);
/// Quotes a cell when it contains a comma or quote.
std::string csv_cell(const std::string& value);

/// Ordered `key = value` text document. Lines starting with '#' are comments.
/// Serialization is deterministic: keys are written in insertion order.
class KvDoc {
 public:
  static KvDoc parse(std::string_view text);
  static KvDoc load(const std::filesystem::path& path);

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  /// Replaces an existing key in place or appends a new one.
  void set(std::string key, std::string value);
  void set(std::string key, double value) { set(std::move(key), format_double(value)); }
  void set(std::string key, std::int64_t value) { set(std::move(key), std::to_string(value)); }
  void set(std::string key, int value) { set(std::move(key), std::to_string(value)); }
  void set(std::string key, bool value) { set(std::move(key), std::string(value ? "true" : "false")); }
  void set(std::string key, const char* value) { set(std::move(key), std::string(value)); }

  bool contains(std::string_view key) const;
  std::optional<std::string> find(std::string_view key) const;
  /// Throws ValidationError when the key is absent.
  const std::string& at(std::string_view key) const;

  std::string get_string(std::string_view key, std::string fallback) const;
  double get_double(std::string_view key, double fallback) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace bagforge

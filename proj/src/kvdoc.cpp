#include "bagforge/kvdoc.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bagforge/errors.hpp"

namespace bagforge {

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) throw Error("format_double: conversion failed");
  return std::string(buf, end);
}

std::string format_fixed(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, value);
  return buf;
}

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(text.substr(start));
      break;
    }
    out.emplace_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view text, std::string_view what) {
  text = trim(text);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ValidationError("invalid number for " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

std::int64_t parse_int(std::string_view text, std::string_view what) {
  text = trim(text);
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ValidationError("invalid integer for " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

bool parse_bool(std::string_view text, std::string_view what) {
  text = trim(text);
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ValidationError("invalid boolean for " + std::string(what) + ": '" + std::string(text) + "'");
}

KvDoc KvDoc::parse(std::string_view text) {
  KvDoc doc;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError("line " + std::to_string(line_no) + ": empty key");
    doc.set(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return doc;
}

KvDoc KvDoc::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KvDoc::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

void KvDoc::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << serialize();
  if (!out) throw IoError("write failed: " + path.string());
}

void KvDoc::set(std::string key, std::string value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(std::move(key), std::move(value));
}

bool KvDoc::contains(std::string_view key) const { return find(key).has_value(); }

std::optional<std::string> KvDoc::find(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

const std::string& KvDoc::at(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw ValidationError("missing key '" + std::string(key) + "'");
}

std::string KvDoc::get_string(std::string_view key, std::string fallback) const {
  auto v = find(key);
  return v ? *v : std::move(fallback);
}

double KvDoc::get_double(std::string_view key, double fallback) const {
  auto v = find(key);
  return v ? parse_double(*v, key) : fallback;
}

std::int64_t KvDoc::get_int(std::string_view key, std::int64_t fallback) const {
  auto v = find(key);
  return v ? parse_int(*v, key) : fallback;
}

bool KvDoc::get_bool(std::string_view key, bool fallback) const {
  auto v = find(key);
  return v ? parse_bool(*v, key) : fallback;
}

std::vector<std::string> parse_csv_row(std::string_view line, std::size_t line_no) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ValidationError("csv line " + std::to_string(line_no) + ": unterminated quote");
  cells.push_back(std::move(cur));
  return cells;
}

std::string csv_cell(const std::string& v) {
  if (v.find_first_of(",\"") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace bagforge

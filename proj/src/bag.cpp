#include "bagforge/bag.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "bagforge/errors.hpp"
#include "bagforge/kvdoc.hpp"

namespace bagforge {

namespace le {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace le

std::uint32_t crc32_ieee(const void* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const auto* bytes = static_cast<const Bytef*>(data);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, bytes, chunk);
    bytes += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

void check_text_field(const std::string& value, const char* field, bool required) {
  if (required && value.empty()) throw ValidationError(std::string("bag field ") + field + ": must be non-empty");
  if (value.find_first_of("\n\r") != std::string::npos || trim(value) != value) {
    throw ValidationError(std::string("bag field ") + field + ": contains line breaks or surrounding whitespace");
  }
}

}  // namespace

void EmbeddingBag::validate() const {
  check_text_field(slide_id, "slide_id", true);
  check_text_field(patient_id, "patient_id", true);
  check_text_field(encoder.name, "encoder.name", true);
  if (subtype) check_text_field(*subtype, "subtype", false);
  if (k() < 1) throw ValidationError("bag '" + slide_id + "' field features: k must be >= 1");
  if (encoder.dim <= 0) throw ValidationError("bag '" + slide_id + "' field encoder.dim: must be positive");
  if (d() != encoder.dim) {
    throw ValidationError("bag '" + slide_id + "' field features: d=" + std::to_string(d()) +
                          " != encoder.dim=" + std::to_string(encoder.dim));
  }
  if (!features.allFinite()) throw ValidationError("bag '" + slide_id + "' field features: non-finite value");
  if (label && *label != 0 && *label != 1) throw ValidationError("bag '" + slide_id + "' field label: must be 0 or 1");
  if (pfs_months) {
    if (!std::isfinite(*pfs_months) || *pfs_months < 0) {
      throw ValidationError("bag '" + slide_id + "' field pfs_months: must be finite and >= 0");
    }
    if (!event) throw ValidationError("bag '" + slide_id + "' field censored: required when pfs_months is present");
  }
  if (event && !pfs_months) {
    throw ValidationError("bag '" + slide_id + "' field pfs_months: required when censored is present");
  }
  if (patch_coords && patch_coords->rows() != k()) {
    throw ValidationError("bag '" + slide_id + "' field patch_coords: expected " + std::to_string(k()) + " rows");
  }
}

bool bags_equal(const EmbeddingBag& a, const EmbeddingBag& b) {
  if (a.slide_id != b.slide_id || a.patient_id != b.patient_id || a.label != b.label || a.event != b.event ||
      a.subtype != b.subtype || a.encoder.name != b.encoder.name || a.encoder.dim != b.encoder.dim) {
    return false;
  }
  if (a.pfs_months.has_value() != b.pfs_months.has_value()) return false;
  if (a.pfs_months && std::bit_cast<std::uint64_t>(*a.pfs_months) != std::bit_cast<std::uint64_t>(*b.pfs_months)) {
    return false;
  }
  if (a.features.rows() != b.features.rows() || a.features.cols() != b.features.cols()) return false;
  if (std::memcmp(a.features.data(), b.features.data(), sizeof(float) * static_cast<std::size_t>(a.features.size())) != 0) {
    return false;
  }
  if (a.patch_coords.has_value() != b.patch_coords.has_value()) return false;
  if (a.patch_coords && *a.patch_coords != *b.patch_coords) return false;
  return true;
}

std::vector<std::uint8_t> encode_bag(const EmbeddingBag& bag) {
  bag.validate();
  KvDoc meta;
  meta.set("slide_id", bag.slide_id);
  meta.set("patient_id", bag.patient_id);
  meta.set("label", bag.label ? std::to_string(*bag.label) : std::string());
  meta.set("pfs_months", bag.pfs_months ? format_double(*bag.pfs_months) : std::string());
  meta.set("censored", bag.event ? std::string(*bag.event ? "1" : "0") : std::string());
  meta.set("subtype", bag.subtype.value_or(std::string()));
  meta.set("encoder.name", bag.encoder.name);
  meta.set("encoder.dim", bag.encoder.dim);
  meta.set("k", static_cast<std::int64_t>(bag.k()));
  meta.set("d", static_cast<std::int64_t>(bag.d()));
  if (bag.patch_coords) {
    std::string coords;
    for (Eigen::Index i = 0; i < bag.patch_coords->rows(); ++i) {
      if (i) coords += ';';
      coords += std::to_string((*bag.patch_coords)(i, 0)) + "," + std::to_string((*bag.patch_coords)(i, 1));
    }
    meta.set("coords", coords);
  }
  const std::string text = meta.serialize();

  std::vector<std::uint8_t> out;
  out.reserve(kMilbPreambleBytes + text.size() + 4 * static_cast<std::size_t>(bag.features.size()) + 4);
  out.insert(out.end(), {'M', 'I', 'L', 'B'});
  le::put_u16(out, kMilbVersion);
  le::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = out.size();
  for (Eigen::Index i = 0; i < bag.features.size(); ++i) le::put_f32(out, bag.features.data()[i]);
  const std::uint32_t crc = crc32_ieee(out.data() + payload_start, out.size() - payload_start);
  le::put_u32(out, crc);
  return out;
}

EmbeddingBag decode_bag(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "MILB", 4) != 0) {
    throw FormatError(origin + ": not a bag file");
  }
  if (bytes.size() < kMilbPreambleBytes) throw CorruptionError(origin + ": truncated preamble");
  const auto version = le::get_u16(bytes.data() + 4);
  if (version != kMilbVersion) {
    throw FormatError(origin + ": unsupported bag version " + std::to_string(version));
  }
  const std::size_t header_len = le::get_u32(bytes.data() + 6);
  if (bytes.size() < kMilbPreambleBytes + header_len) throw CorruptionError(origin + ": truncated metadata");
  const std::string text(reinterpret_cast<const char*>(bytes.data() + kMilbPreambleBytes), header_len);
  KvDoc meta;
  try {
    meta = KvDoc::parse(text);
  } catch (const ValidationError& e) {
    throw CorruptionError(origin + ": unreadable metadata: " + e.what());
  }
  const auto k = meta.get_int("k", -1);
  const auto d = meta.get_int("d", -1);
  if (k < 0 || d < 0) throw CorruptionError(origin + ": metadata lacks k/d");
  const std::size_t payload_bytes = 4 * static_cast<std::size_t>(k) * static_cast<std::size_t>(d);
  const std::size_t payload_start = kMilbPreambleBytes + header_len;
  if (bytes.size() != payload_start + payload_bytes + 4) {
    throw CorruptionError(origin + ": file size does not match k*d payload");
  }
  const std::uint32_t stored = le::get_u32(bytes.data() + payload_start + payload_bytes);
  if (crc32_ieee(bytes.data() + payload_start, payload_bytes) != stored) {
    throw CorruptionError(origin + ": payload checksum mismatch (corrupted bag)");
  }

  EmbeddingBag bag;
  bag.slide_id = meta.get_string("slide_id", "");
  bag.patient_id = meta.get_string("patient_id", "");
  if (auto v = meta.get_string("label", ""); !v.empty()) bag.label = static_cast<int>(parse_int(v, "label"));
  if (auto v = meta.get_string("pfs_months", ""); !v.empty()) bag.pfs_months = parse_double(v, "pfs_months");
  if (auto v = meta.get_string("censored", ""); !v.empty()) bag.event = parse_bool(v, "censored");
  if (auto v = meta.get_string("subtype", ""); !v.empty()) bag.subtype = v;
  bag.encoder.name = meta.get_string("encoder.name", "");
  bag.encoder.dim = meta.get_int("encoder.dim", 0);
  bag.features.resize(k, d);
  const std::uint8_t* p = bytes.data() + payload_start;
  for (Eigen::Index i = 0; i < bag.features.size(); ++i) bag.features.data()[i] = le::get_f32(p + 4 * i);
  if (auto coords = meta.find("coords")) {
    CoordMatrix c(k, 2);
    const auto rows = split(*coords, ';');
    if (static_cast<std::int64_t>(rows.size()) != k) throw CorruptionError(origin + ": coords row count != k");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto xy = split(rows[i], ',');
      if (xy.size() != 2) throw CorruptionError(origin + ": malformed coords entry");
      c(static_cast<Eigen::Index>(i), 0) = static_cast<std::int32_t>(parse_int(xy[0], "coords"));
      c(static_cast<Eigen::Index>(i), 1) = static_cast<std::int32_t>(parse_int(xy[1], "coords"));
    }
    bag.patch_coords = std::move(c);
  }
  bag.validate();
  return bag;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_bag(const EmbeddingBag& bag, const std::filesystem::path& path) { write_file_bytes(path, encode_bag(bag)); }

EmbeddingBag read_bag(const std::filesystem::path& path) { return decode_bag(read_file_bytes(path), path.string()); }

}  // namespace bagforge

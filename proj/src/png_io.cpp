#include <png.h>

#include <cstring>

#include "bagforge/bag.hpp"
#include "bagforge/stainnorm.hpp"

namespace bagforge {

RgbPatch::RgbPatch(int w, int h, std::uint8_t fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw ValidationError("patch dimensions must be positive");
  pixels.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill);
}

void RgbPatch::validate() const {
  if (width <= 0 || height <= 0) throw ValidationError("patch dimensions must be positive");
  if (pixels.size() != pixel_count() * 3) throw ValidationError("patch buffer does not hold 3 channels per pixel");
}

RgbPatch read_png(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError("not a readable PNG: " + path.string() + " (" + image.message + ")");
  }
  image.format = PNG_FORMAT_RGB;
  RgbPatch patch(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, patch.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("failed to decode PNG: " + path.string() + " (" + msg + ")");
  }
  return patch;
}

std::vector<std::uint8_t> encode_png(const RgbPatch& patch) {
  patch.validate();
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(patch.width);
  image.height = static_cast<png_uint_32>(patch.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, patch.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encoding failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, patch.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encoding failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

void write_png(const RgbPatch& patch, const std::filesystem::path& path) { write_file_bytes(path, encode_png(patch)); }

}  // namespace bagforge

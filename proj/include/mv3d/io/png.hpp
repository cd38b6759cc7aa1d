#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "mv3d/core/error.hpp"

namespace mv3d {

struct Image8 {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> data;  // row-major, interleaved
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline void write_png_raw(const std::filesystem::path& path, int w, int h, int color_type, int bit_depth,
                          const std::vector<std::vector<std::uint8_t>>& rows) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& r : rows) png_write_row(png, r.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  MV3D_REQUIRE(img.channels == 1 || img.channels == 3, "PNG writer supports gray or RGB");
  MV3D_REQUIRE(img.data.size() == std::size_t(img.width * img.height * img.channels), "image buffer size mismatch");
  std::vector<std::vector<std::uint8_t>> rows(std::size_t(img.height));
  const std::size_t stride = std::size_t(img.width * img.channels);
  for (int y = 0; y < img.height; ++y)
    rows[std::size_t(y)].assign(img.data.begin() + std::ptrdiff_t(y * stride),
                                img.data.begin() + std::ptrdiff_t((y + 1) * stride));
  detail::write_png_raw(path, img.width, img.height, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                        8, rows);
}

/// 1-bit grayscale PNG; nonzero entries become white.
inline void write_mask_png(const std::filesystem::path& path, int w, int h, const std::vector<std::uint8_t>& mask) {
  MV3D_REQUIRE(mask.size() == std::size_t(w * h), "mask size mismatch");
  std::vector<std::vector<std::uint8_t>> rows(std::size_t(h), std::vector<std::uint8_t>(std::size_t((w + 7) / 8), 0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask[std::size_t(y * w + x)]) rows[std::size_t(y)][std::size_t(x / 8)] |= std::uint8_t(0x80 >> (x % 8));
  detail::write_png_raw(path, w, h, PNG_COLOR_TYPE_GRAY, 1, rows);
}

/// Reads any PNG, converted to 8-bit gray (channels = 1) or RGB (channels = 3).
inline Image8 read_png(const std::filesystem::path& path, int channels) {
  MV3D_REQUIRE(channels == 1 || channels == 3, "PNG reader supports gray or RGB");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out;
  out.width = int(image.width);
  out.height = int(image.height);
  out.channels = channels;
  out.data.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return out;
}

}  // namespace mv3d

#pragma once
// Depth frame file I/O.
//
// Two formats:
//  - 16-bit grayscale PNG, pixel value = depth in millimeters, 0 = invalid.
//  - Raw little-endian: magic "TCFD1\n", uint32 width, uint32 height, then
//    width*height float32 depths in meters, row-major from the top-left row.
//    Values <= 0 are invalid.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "tcfusion/camera.hpp"

namespace tcf {

struct DepthIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DepthIoError("cannot open " + path);
  return f;
}

}  // namespace detail

inline constexpr char kRawDepthMagic[6] = {'T', 'C', 'F', 'D', '1', '\n'};

inline void write_depth_raw(const DepthFrame& frame, const std::string& path) {
  detail::FilePtr f = detail::open_file(path, "wb");
  const std::uint32_t w = std::uint32_t(frame.width);
  const std::uint32_t h = std::uint32_t(frame.height);
  if (std::fwrite(kRawDepthMagic, 1, 6, f.get()) != 6 ||
      std::fwrite(&w, 4, 1, f.get()) != 1 || std::fwrite(&h, 4, 1, f.get()) != 1 ||
      std::fwrite(frame.depth.data(), 4, frame.depth.size(), f.get()) !=
          frame.depth.size())
    throw DepthIoError("short write to " + path);
}

inline DepthFrame load_depth_raw(const std::string& path, const Intrinsics& K) {
  detail::FilePtr f = detail::open_file(path, "rb");
  char magic[6];
  if (std::fread(magic, 1, 6, f.get()) != 6 ||
      std::memcmp(magic, kRawDepthMagic, 6) != 0)
    throw DepthIoError("bad raw depth magic in " + path);
  std::uint32_t w = 0, h = 0;
  if (std::fread(&w, 4, 1, f.get()) != 1 || std::fread(&h, 4, 1, f.get()) != 1)
    throw DepthIoError("truncated raw depth header in " + path);
  if (w == 0 || h == 0 || w > 1u << 14 || h > 1u << 14)
    throw DepthIoError("implausible raw depth size in " + path);
  DepthFrame frame(int(w), int(h), K);
  if (std::fread(frame.depth.data(), 4, frame.depth.size(), f.get()) !=
      frame.depth.size())
    throw DepthIoError("truncated raw depth data in " + path);
  return frame;
}

inline void write_depth_png(const DepthFrame& frame, const std::string& path) {
  detail::FilePtr f = detail::open_file(path, "wb");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DepthIoError("libpng init failed");
  }

  // Rows assembled before setjmp so unwinding cannot skip destructors.
  std::vector<std::uint8_t> rows(std::size_t(frame.width) * frame.height * 2);
  std::vector<png_bytep> row_ptrs(frame.height);
  for (int v = 0; v < frame.height; ++v) {
    row_ptrs[v] = rows.data() + std::size_t(v) * frame.width * 2;
    for (int u = 0; u < frame.width; ++u) {
      const double meters = frame.at(u, v);
      long mm = meters > 0 ? std::lround(meters * 1000.0) : 0;
      mm = std::min(mm, 65535L);
      row_ptrs[v][2 * u] = std::uint8_t(mm >> 8);  // network byte order
      row_ptrs[v][2 * u + 1] = std::uint8_t(mm & 0xff);
    }
  }

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DepthIoError("libpng write failed for " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, png_uint_32(frame.width), png_uint_32(frame.height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline DepthFrame load_depth_png(const std::string& path, const Intrinsics& K) {
  detail::FilePtr f = detail::open_file(path, "rb");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DepthIoError("not a PNG file: " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DepthIoError("libpng init failed");
  }

  png_uint_32 w = 0, h = 0;
  int bit_depth = 0, color = 0;
  std::vector<std::uint8_t> rows;
  std::vector<png_bytep> row_ptrs;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DepthIoError("libpng read failed for " + path);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color, nullptr, nullptr, nullptr);
  if (bit_depth != 16 || color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DepthIoError("expected 16-bit grayscale PNG: " + path);
  }
  rows.resize(std::size_t(w) * h * 2);
  row_ptrs.resize(h);
  for (png_uint_32 v = 0; v < h; ++v)
    row_ptrs[v] = rows.data() + std::size_t(v) * w * 2;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  DepthFrame frame(int(w), int(h), K);
  for (png_uint_32 v = 0; v < h; ++v)
    for (png_uint_32 u = 0; u < w; ++u) {
      const int mm = (row_ptrs[v][2 * u] << 8) | row_ptrs[v][2 * u + 1];
      frame.at(int(u), int(v)) = float(mm) / 1000.0f;
    }
  return frame;
}

enum class DepthFormat { kPng, kRaw };

// Sniffs the leading bytes: PNG signature or the raw magic.
inline DepthFormat detect_depth_format(const std::string& path) {
  detail::FilePtr f = detail::open_file(path, "rb");
  std::uint8_t head[8] = {};
  const std::size_t n = std::fread(head, 1, 8, f.get());
  if (n >= 8 && png_sig_cmp(head, 0, 8) == 0) return DepthFormat::kPng;
  if (n >= 6 && std::memcmp(head, kRawDepthMagic, 6) == 0) return DepthFormat::kRaw;
  throw DepthIoError("unrecognized depth format: " + path);
}

inline DepthFrame load_frame(const std::string& path, DepthFormat format,
                             const Intrinsics& K) {
  return format == DepthFormat::kPng ? load_depth_png(path, K)
                                     : load_depth_raw(path, K);
}

inline DepthFrame load_frame(const std::string& path, const Intrinsics& K) {
  return load_frame(path, detect_depth_format(path), K);
}

}  // namespace tcf

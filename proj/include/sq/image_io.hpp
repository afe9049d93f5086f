#pragma once

// 8-bit RGB PNG encoding/decoding via libpng.

#include "sq/core.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace sq {

namespace detail {

struct PngReadBuffer {
  const unsigned char* data;
  size_t size;
  size_t offset;
};

inline void png_read_from_buffer(png_structp png, png_bytep out, png_size_t len) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->offset + len > buf->size) png_error(png, "truncated PNG data");
  std::memcpy(out, buf->data + buf->offset, len);
  buf->offset += len;
}

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

inline void png_flush_noop(png_structp) {}

inline void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace detail

inline std::vector<unsigned char> encode_png(const RasterImage& img) {
  std::vector<unsigned char> out;
  std::vector<png_byte> row(static_cast<size_t>(img.width) * 3);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warning_ignore);
  if (png == nullptr) throw DataError("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  // Objects touched after setjmp all live at function scope above it.
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png: encoding failed");
  }
  {
    png_set_write_fn(png, &out, detail::png_write_to_vector, detail::png_flush_noop);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < 3; ++c)
          row[static_cast<size_t>(x) * 3 + c] =
              static_cast<png_byte>(std::lround(std::clamp(img.at(y, x, c), 0.0f, 1.0f) * 255.0f));
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

inline RasterImage decode_png(const unsigned char* data, size_t size) {
  if (size < 8 || png_sig_cmp(data, 0, 8) != 0) throw DataError("png: not a PNG stream");
  detail::PngReadBuffer buf{data, size, 0};
  RasterImage img;
  std::vector<png_byte> row;
  bool bad_layout = false;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warning_ignore);
  if (png == nullptr) throw DataError("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: malformed or truncated stream");
  }
  {
    png_set_read_fn(png, &buf, detail::png_read_from_buffer);
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    if (png_get_channels(png, info) != 3) {
      bad_layout = true;
    } else {
      img = RasterImage(h, w);
      row.resize(png_get_rowbytes(png, info));
    }
    for (int y = 0; y < h && !bad_layout; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(row[static_cast<size_t>(x) * 3 + c]) / 255.0f;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (bad_layout) throw DataError("png: unsupported channel layout");
  return img;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline RasterImage read_png(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return decode_png(bytes.data(), bytes.size());
}

inline void write_png(const std::string& path, const RasterImage& img) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Rounds pixel intensities onto the 8-bit grid a PNG round trip produces.
inline RasterImage quantize8(RasterImage img) {
  for (auto& v : img.pixels) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  return img;
}

}  // namespace sq

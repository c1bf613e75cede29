#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>

#include "presem/dataio.hpp"

namespace presem {

namespace {

struct PngError {
  char message[256] = {0};
};

void on_error(png_structp png, png_const_charp msg) {
  auto* e = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(e->message, sizeof e->message, "%s", msg);
  png_longjmp(png, 1);
}

void on_warning(png_structp, png_const_charp) {}

// Decodes into `bytes` as 8-bit RGB (depth16 = false) or host-order 16-bit gray. Returns
// an empty string on success, otherwise the reason.
std::string decode_png(std::FILE* fp, bool depth16, int& width, int& height, std::vector<std::uint8_t>& bytes) {
  PngError err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_error, on_warning);
  if (!png) return "out of memory";
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return "out of memory";
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return err.message;
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth16) {
    if (bit_depth != 16 || (color & PNG_COLOR_MASK_COLOR) != 0) {
      png_destroy_read_struct(&png, &info, nullptr);
      return "expected a 16-bit single-channel image";
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_swap(png);  // PNG is big-endian; the buffer is read as host uint16
  } else {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  const std::size_t expect = static_cast<std::size_t>(width) * (depth16 ? 2 : 3);
  if (stride != expect) {
    png_destroy_read_struct(&png, &info, nullptr);
    return "unexpected row layout";
  }
  bytes.resize(stride * static_cast<std::size_t>(height));
  rows.resize(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return {};
}

void read_file(const std::string& path, bool depth16, int& width, int& height, std::vector<std::uint8_t>& bytes) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("cannot open image " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw DataError(path + ": not a PNG file");
  }
  const std::string why = decode_png(fp, depth16, width, height, bytes);
  std::fclose(fp);
  if (!why.empty()) throw DataError(path + ": " + why);
}

std::string encode_png(std::FILE* fp, int width, int height, bool depth16, const std::uint8_t* data) {
  PngError err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_error, on_warning);
  if (!png) return "out of memory";
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return "out of memory";
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return err.message;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth16 ? 16 : 8,
               depth16 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (depth16) png_set_swap(png);
  const std::size_t stride = static_cast<std::size_t>(width) * (depth16 ? 2 : 3);
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(data + stride * static_cast<std::size_t>(y));
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return {};
}

void write_file(const std::string& path, int width, int height, bool depth16, const std::uint8_t* data) {
  if (width <= 0 || height <= 0) throw DataError("write_png: empty image for " + path);
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot write image " + path);
  const std::string why = encode_png(fp, width, height, depth16, data);
  const bool closed = std::fclose(fp) == 0;
  if (!why.empty()) throw DataError(path + ": " + why);
  if (!closed) throw DataError("failed writing " + path);
}

}  // namespace

Image8 read_png8(const std::string& path) {
  Image8 img;
  read_file(path, false, img.width, img.height, img.data);
  img.channels = 3;
  return img;
}

Image16 read_png16(const std::string& path) {
  Image16 img;
  std::vector<std::uint8_t> bytes;
  read_file(path, true, img.width, img.height, bytes);
  img.data.resize(bytes.size() / 2);
  std::memcpy(img.data.data(), bytes.data(), bytes.size());
  return img;
}

void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 3) throw DataError("write_png: only 3-channel 8-bit images are supported");
  if (img.data.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw DataError("write_png: buffer size does not match " + path);
  write_file(path, img.width, img.height, false, img.data.data());
}

void write_png(const std::string& path, const Image16& img) {
  if (img.data.size() != static_cast<std::size_t>(img.width) * img.height)
    throw DataError("write_png: buffer size does not match " + path);
  write_file(path, img.width, img.height, true, reinterpret_cast<const std::uint8_t*>(img.data.data()));
}

}  // namespace presem

#pragma once

#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "dacal/image_ops.hpp"

// 8-bit PNG/JPEG ingestion and export. Values map v/255 on read and
// round(v*255) clamped on write.

namespace dacal {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

inline Tensor rgb8_to_tensor(const std::vector<unsigned char>& px, int64_t h, int64_t w) {
  Tensor img({h, w, 3});
  for (int64_t i = 0; i < h * w * 3; ++i) img[i] = px[i] / 255.0;
  return img;
}

inline std::vector<unsigned char> tensor_to_rgb8(const Tensor& img) {
  std::vector<unsigned char> px(static_cast<size_t>(img.dim(0) * img.dim(1) * 3));
  for (int64_t y = 0; y < img.dim(0); ++y)
    for (int64_t x = 0; x < img.dim(1); ++x)
      for (int64_t c = 0; c < 3; ++c) {
        double v = img.dim(2) == 3 ? img.at3(y, x, c) : img.at3(y, x, 0);
        long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
        px[(y * img.dim(1) + x) * 3 + c] = static_cast<unsigned char>(std::clamp<long>(q, 0, 255));
      }
  return px;
}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(mgr->jump, 1);
}

}  // namespace detail

inline Tensor read_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed to decode PNG " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  int64_t w = png_get_image_width(png, info);
  int64_t h = png_get_image_height(png, info);
  std::vector<unsigned char> px(static_cast<size_t>(h * w * 3));
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[y] = px.data() + y * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return detail::rgb8_to_tensor(px, h, w);
}

inline void write_png(const Tensor& img, const std::string& path) {
  check_image(img, "write_png");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode PNG " + path);
  }
  png_init_io(png, f.get());
  int64_t h = img.dim(0), w = img.dim(1);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> px = detail::tensor_to_rgb8(img);
  for (int64_t y = 0; y < h; ++y) png_write_row(png, px.data() + y * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Tensor read_jpeg(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  jpeg_decompress_struct cinfo;
  detail::JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = detail::jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("failed to decode JPEG " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  int64_t w = cinfo.output_width, h = cinfo.output_height;
  std::vector<unsigned char> px(static_cast<size_t>(h * w * 3));
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = px.data() + static_cast<int64_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return detail::rgb8_to_tensor(px, h, w);
}

inline void write_jpeg(const Tensor& img, const std::string& path, int quality = 95) {
  check_image(img, "write_jpeg");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path);
  jpeg_compress_struct cinfo;
  detail::JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = detail::jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    throw IoError("failed to encode JPEG " + path);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, f.get());
  cinfo.image_width = static_cast<JDIMENSION>(img.dim(1));
  cinfo.image_height = static_cast<JDIMENSION>(img.dim(0));
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  std::vector<unsigned char> px = detail::tensor_to_rgb8(img);
  int64_t w = img.dim(1);
  while (cinfo.next_scanline < cinfo.image_height) {
    unsigned char* row = px.data() + static_cast<int64_t>(cinfo.next_scanline) * w * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

inline bool has_suffix(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

inline Tensor read_image(const std::string& path) {
  if (has_suffix(path, ".png") || has_suffix(path, ".PNG")) return read_png(path);
  if (has_suffix(path, ".jpg") || has_suffix(path, ".jpeg") || has_suffix(path, ".JPG") ||
      has_suffix(path, ".JPEG"))
    return read_jpeg(path);
  throw IoError("unsupported image format: " + path);
}

inline void write_image(const Tensor& img, const std::string& path) {
  if (has_suffix(path, ".png") || has_suffix(path, ".PNG")) return write_png(img, path);
  if (has_suffix(path, ".jpg") || has_suffix(path, ".jpeg")) return write_jpeg(img, path);
  throw IoError("unsupported image format: " + path);
}

}  // namespace dacal

#pragma once

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>

#include <jpeglib.h>
#include <png.h>

#include "tcpl/tensor.hpp"

namespace tcpl {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_fn(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg ? msg : "png error";
  std::longjmp(png_jmpbuf(png), 1);
}
inline void png_warn_fn(png_structp, png_const_charp) {}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jb;
  std::string msg;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  char buf[JMSG_LENGTH_MAX];
  (*cinfo->err->format_message)(cinfo, buf);
  err->msg = buf;
  std::longjmp(err->jb, 1);
}

}  // namespace detail

// Decodes a PNG or JPEG file into an H x W x 3 tensor with values in [0,1].
// Grayscale and alpha inputs are expanded / stripped to plain RGB.
inline Tensor3 read_image(const std::filesystem::path& path) {
  const std::string ext = [&] {
    std::string e = path.extension().string();
    for (auto& ch : e) ch = static_cast<char>(std::tolower(ch));
    return e;
  }();

  detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw io_error("cannot open image file: " + path.string());

  if (ext == ".png") {
    std::string errmsg;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &errmsg,
                                             detail::png_error_fn,
                                             detail::png_warn_fn);
    if (!png) throw io_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
      png_destroy_read_struct(&png, nullptr, nullptr);
      throw io_error("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows;
    std::vector<unsigned char> pixels;
    png_uint_32 width = 0, height = 0;
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_read_struct(&png, &info, nullptr);
      throw io_error("png decode failed (" + errmsg + "): " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
      png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_GRAY ||
        color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    pixels.resize(static_cast<std::size_t>(height) * width * 3);
    rows.resize(height);
    for (png_uint_32 y = 0; y < height; ++y)
      rows[y] = pixels.data() + static_cast<std::size_t>(y) * width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor3 img(static_cast<int>(height), static_cast<int>(width), 3);
    for (std::size_t i = 0; i < pixels.size(); ++i)
      img.v[i] = pixels[i] / 255.0;
    return img;
  }

  if (ext == ".jpg" || ext == ".jpeg") {
    jpeg_decompress_struct cinfo;
    detail::JpegErrorMgr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = detail::jpeg_error_exit;
    if (setjmp(jerr.jb)) {
      jpeg_destroy_decompress(&cinfo);
      throw io_error("jpeg decode failed (" + jerr.msg + "): " +
                     path.string());
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f.get());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int width = static_cast<int>(cinfo.output_width);
    const int height = static_cast<int>(cinfo.output_height);
    Tensor3 img(height, width, 3);
    std::vector<unsigned char> row(static_cast<std::size_t>(width) * 3);
    unsigned char* rowp = row.data();
    while (cinfo.output_scanline < cinfo.output_height) {
      int y = static_cast<int>(cinfo.output_scanline);
      jpeg_read_scanlines(&cinfo, &rowp, 1);
      for (int x = 0; x < width; ++x)
        for (int ch = 0; ch < 3; ++ch)
          img.at(y, x, ch) = row[static_cast<std::size_t>(x) * 3 + ch] / 255.0;
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
  }

  throw io_error("unsupported image extension: " + path.string());
}

// Writes an H x W x 3 tensor (values clamped to [0,1]) as an 8-bit RGB PNG.
inline void write_png(const std::filesystem::path& path, const Tensor3& img) {
  if (img.c != 3 || img.h <= 0 || img.w <= 0)
    throw shape_error("write_png expects a non-empty HxWx3 tensor");
  detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw io_error("cannot open file for writing: " + path.string());

  std::string errmsg;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &errmsg,
                                            detail::png_error_fn,
                                            detail::png_warn_fn);
  if (!png) throw io_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw io_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("png encode failed (" + errmsg + "): " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w),
               static_cast<png_uint_32>(img.h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[static_cast<std::size_t>(x) * 3 + ch] = static_cast<unsigned char>(
            std::lround(clamp01(img.at(y, x, ch)) * 255.0));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace tcpl

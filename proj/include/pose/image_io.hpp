#pragma once

// Lossless 8-bit RGB image files (binary PPM) and an in-memory JPEG round
// trip used by the perturbation suite.

#include <jpeglib.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pose/error.hpp"
#include "pose/tensor.hpp"

namespace pose::io {

inline unsigned char to_byte(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

// Interleaved RGB bytes of sample i of a 3-channel tensor.
template <typename T>
std::vector<unsigned char> to_rgb8(const Tensor<T>& img, int i = 0) {
  if (img.c() != 3) throw InvalidInput("expected a 3-channel image");
  std::vector<unsigned char> out(static_cast<std::size_t>(img.h()) * img.w() * 3);
  for (int y = 0; y < img.h(); ++y)
    for (int x = 0; x < img.w(); ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<std::size_t>(y) * img.w() + x) * 3 + c] = to_byte(static_cast<double>(img.at(i, c, y, x)));
  return out;
}

template <typename T>
Tensor<T> from_rgb8(const unsigned char* rgb, int h, int w) {
  Tensor<T> img(1, 3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(0, c, y, x) = static_cast<T>(rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0);
  return img;
}

// Values are rounded to the nearest of 256 levels, exactly as they are stored.
template <typename T>
Tensor<T> quantize8(const Tensor<T>& img) {
  Tensor<T> out = img;
  for (auto& v : out.vec()) v = static_cast<T>(to_byte(static_cast<double>(v)) / 255.0);
  return out;
}

template <typename T>
void write_ppm(const std::filesystem::path& path, const Tensor<T>& img, int i = 0) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const auto rgb = to_rgb8(img, i);
  os << "P6\n" << img.w() << ' ' << img.h() << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

template <typename T = float>
Tensor<T> read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  is >> magic;
  auto skip_comments = [&] {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
  };
  skip_comments();
  is >> w;
  skip_comments();
  is >> h;
  skip_comments();
  is >> maxv;
  is.get();
  if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255) throw IoError(path.string() + " is not an 8-bit binary PPM");
  std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!is) throw IoError("truncated image " + path.string());
  return from_rgb8<T>(rgb.data(), h, w);
}

namespace detail {
struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}
}  // namespace detail

// Encode sample 0 as baseline JPEG (4:4:4) at the given quality and decode it.
template <typename T>
Tensor<T> jpeg_roundtrip(const Tensor<T>& img, int quality) {
  if (quality < 1 || quality > 100) throw InvalidParameter("jpeg quality must be in [1, 100]");
  const int h = img.h(), w = img.w();
  std::vector<unsigned char> rgb = to_rgb8(img);
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  {
    jpeg_compress_struct cinfo{};
    detail::JpegErrorManager jerr{};
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = detail::jpeg_error_exit;
    if (setjmp(jerr.jump)) {
      jpeg_destroy_compress(&cinfo);
      std::free(buffer);
      throw IoError(std::string("jpeg encode: ") + jerr.message);
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buffer, &size);
    cinfo.image_width = static_cast<JDIMENSION>(w);
    cinfo.image_height = static_cast<JDIMENSION>(h);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    for (int c = 0; c < 3; ++c) {
      cinfo.comp_info[c].h_samp_factor = 1;
      cinfo.comp_info[c].v_samp_factor = 1;
    }
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
      JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * w * 3;
      jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
  }
  std::vector<unsigned char> decoded(static_cast<std::size_t>(w) * h * 3);
  {
    jpeg_decompress_struct dinfo{};
    detail::JpegErrorManager jerr{};
    dinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = detail::jpeg_error_exit;
    if (setjmp(jerr.jump)) {
      jpeg_destroy_decompress(&dinfo);
      std::free(buffer);
      throw IoError(std::string("jpeg decode: ") + jerr.message);
    }
    jpeg_create_decompress(&dinfo);
    jpeg_mem_src(&dinfo, buffer, size);
    jpeg_read_header(&dinfo, TRUE);
    dinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&dinfo);
    while (dinfo.output_scanline < dinfo.output_height) {
      JSAMPROW row = decoded.data() + static_cast<std::size_t>(dinfo.output_scanline) * w * 3;
      jpeg_read_scanlines(&dinfo, &row, 1);
    }
    jpeg_finish_decompress(&dinfo);
    jpeg_destroy_decompress(&dinfo);
  }
  std::free(buffer);
  return from_rgb8<T>(decoded.data(), h, w);
}

}  // namespace pose::io

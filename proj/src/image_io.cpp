#include "cmf/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "cmf/util.hpp"

namespace cmf {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) fail("idx: '", path, "' truncated");
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace

TensorF load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("png: cannot open '", path, "'");
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("png: reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail("png: info allocation failed");
  }
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("png: '", path, "' failed to decode");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const png_uint_32 channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("png: '", path, "' decoded to ", channels, " channels");
  }
  const size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  TensorF out = TensorF::zeros({1, static_cast<int64_t>(h), static_cast<int64_t>(w)});
  for (png_uint_32 y = 0; y < h; ++y) {
    const unsigned char* row = buf.data() + y * stride;
    float* dst = out.data() + static_cast<int64_t>(y) * w;
    if (channels == 1) {
      for (png_uint_32 x = 0; x < w; ++x) dst[x] = static_cast<float>(row[x]) / 255.0f;
    } else {
      for (png_uint_32 x = 0; x < w; ++x) {
        const float r = row[3 * x], g = row[3 * x + 1], b = row[3 * x + 2];
        dst[x] = (0.299f * r + 0.587f * g + 0.114f * b) / 255.0f;
      }
    }
  }
  return out;
}

void save_png(const std::string& path, const TensorF& image) {
  if (image.rank() != 3 || image.dim(0) != 1)
    fail("png: save expects a [1,H,W] tensor, got ", shape_str(image.shape()));
  const int64_t h = image.dim(1), w = image.dim(2);
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("png: cannot open '", path, "' for writing");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("png: writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail("png: info allocation failed");
  }
  std::vector<unsigned char> buf(static_cast<size_t>(h * w));
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail("png: '", path, "' failed to encode");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  for (int64_t j = 0; j < h * w; ++j) {
    float v = image[j];
    v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    buf[static_cast<size_t>(j)] = static_cast<unsigned char>(v * 255.0f + 0.5f);
  }
  for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = buf.data() + y * w;
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
}

TensorF load_idx_images(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("idx: cannot open '", path, "'");
  const uint32_t magic = read_be32(f, path);
  if (magic != 0x00000803u)
    fail("idx: '", path, "' magic ", magic, " is not an u8 rank-3 image file");
  const int64_t n = read_be32(f, path);
  const int64_t h = read_be32(f, path);
  const int64_t w = read_be32(f, path);
  std::vector<unsigned char> buf(static_cast<size_t>(n * h * w));
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) fail("idx: '", path, "' truncated, expected ", n * h * w, " pixels");
  TensorF out = TensorF::zeros({n, 1, h, w});
  for (int64_t j = 0; j < n * h * w; ++j)
    out[j] = static_cast<float>(buf[static_cast<size_t>(j)]) / 255.0f;
  return out;
}

std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("idx: cannot open '", path, "'");
  const uint32_t magic = read_be32(f, path);
  if (magic != 0x00000801u)
    fail("idx: '", path, "' magic ", magic, " is not an u8 rank-1 label file");
  const int64_t n = read_be32(f, path);
  std::vector<unsigned char> buf(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) fail("idx: '", path, "' truncated, expected ", n, " labels");
  std::vector<int> out(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j)] = buf[static_cast<size_t>(j)];
  return out;
}

TensorF resize_bilinear(const TensorF& image, int64_t out_h, int64_t out_w) {
  if (image.rank() != 3)
    fail("resize: expects a [C,H,W] tensor, got ", shape_str(image.shape()));
  if (out_h < 1 || out_w < 1) fail("resize: target ", out_h, "x", out_w);
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image;
  TensorF out = TensorF::zeros({c, out_h, out_w});
  const float sy = out_h > 1 ? static_cast<float>(h - 1) / static_cast<float>(out_h - 1) : 0.0f;
  const float sx = out_w > 1 ? static_cast<float>(w - 1) / static_cast<float>(out_w - 1) : 0.0f;
  for (int64_t ch = 0; ch < c; ++ch) {
    const float* src = image.data() + ch * h * w;
    float* dst = out.data() + ch * out_h * out_w;
    for (int64_t y = 0; y < out_h; ++y) {
      const float fy = static_cast<float>(y) * sy;
      const int64_t y0 = static_cast<int64_t>(fy);
      const int64_t y1 = y0 + 1 < h ? y0 + 1 : y0;
      const float wy = fy - static_cast<float>(y0);
      for (int64_t x = 0; x < out_w; ++x) {
        const float fx = static_cast<float>(x) * sx;
        const int64_t x0 = static_cast<int64_t>(fx);
        const int64_t x1 = x0 + 1 < w ? x0 + 1 : x0;
        const float wx = fx - static_cast<float>(x0);
        const float top = src[y0 * w + x0] * (1.0f - wx) + src[y0 * w + x1] * wx;
        const float bot = src[y1 * w + x0] * (1.0f - wx) + src[y1 * w + x1] * wx;
        dst[y * out_w + x] = top * (1.0f - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace cmf

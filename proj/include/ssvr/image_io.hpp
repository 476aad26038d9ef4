#ifndef SSVR_IMAGE_IO_HPP
#define SSVR_IMAGE_IO_HPP

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ssvr/errors.hpp"
#include "ssvr/tensor.hpp"

namespace ssvr {

// Decoded grayscale raster before normalization. Pixels are row-major,
// one value per pixel regardless of stored bit depth.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> pixels;

  std::uint16_t max_value() const {
    return bit_depth == 8 ? 255 : 65535;
  }
};

// Min-max normalization to [0,1]; a constant image maps to all zeros.
inline Tensor normalize_minmax(const RawImage& img) {
  Tensor t = Tensor::zeros({img.height, img.width});
  std::uint16_t lo = 65535, hi = 0;
  for (std::uint16_t p : img.pixels) {
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  if (hi > lo) {
    const double span = static_cast<double>(hi) - static_cast<double>(lo);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      t.values[i] = (static_cast<double>(img.pixels[i]) - lo) / span;
  }
  return t;
}

namespace detail {

inline std::uint16_t quantize01(double v, std::uint16_t maxval) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return maxval;
  return static_cast<std::uint16_t>(std::lround(v * maxval));
}

inline int pgm_next_token(std::istream& in, std::string& tok) {
  tok.clear();
  int c;
  while ((c = in.get()) != std::char_traits<char>::eof()) {
    if (c == '#') {
      while ((c = in.get()) != std::char_traits<char>::eof() && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return 1;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok.empty() ? 0 : 1;
}

struct FileCloser {
  std::FILE* fp = nullptr;
  ~FileCloser() {
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

// ---- PGM (binary "P5") ------------------------------------------------------

inline RawImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string tok;
  auto need = [&](const char* what) {
    if (!detail::pgm_next_token(in, tok))
      throw DataError(path + ": truncated PGM header (" + what + ")");
  };
  need("magic");
  if (tok != "P5") throw DataError(path + ": not a binary PGM file");
  need("width");
  long w = std::stol(tok);
  need("height");
  long h = std::stol(tok);
  need("maxval");
  long maxval = std::stol(tok);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
    throw DataError(path + ": invalid PGM dimensions");
  // The header's final whitespace byte was already consumed by the tokenizer.
  RawImage img;
  img.width = static_cast<std::size_t>(w);
  img.height = static_cast<std::size_t>(h);
  img.bit_depth = maxval > 255 ? 16 : 8;
  img.pixels.resize(img.width * img.height);
  const std::size_t n = img.pixels.size();
  if (maxval > 255) {
    std::vector<unsigned char> buf(n * 2);
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size())))
      throw DataError(path + ": truncated PGM pixel data");
    for (std::size_t i = 0; i < n; ++i)
      img.pixels[i] = static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
  } else {
    std::vector<unsigned char> buf(n);
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size())))
      throw DataError(path + ": truncated PGM pixel data");
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = buf[i];
  }
  return img;
}

// Writes pixel values in [0,1]; out-of-range values are clamped.
inline void write_pgm(const std::string& path, const Tensor& img,
                      int bit_depth = 16) {
  if (img.shape.size() != 2)
    throw ShapeError("write_pgm: expected [H,W] image, got " +
                     shape_str(img.shape));
  if (bit_depth != 8 && bit_depth != 16)
    throw DataError("write_pgm: bit depth must be 8 or 16");
  const std::uint16_t maxval = bit_depth == 8 ? 255 : 65535;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out << "P5\n" << img.shape[1] << " " << img.shape[0] << "\n" << maxval
      << "\n";
  for (double v : img.values) {
    std::uint16_t q = detail::quantize01(v, maxval);
    if (bit_depth == 16) out.put(static_cast<char>(q >> 8));
    out.put(static_cast<char>(q & 0xff));
  }
  if (!out) throw DataError("short write: " + path);
}

// ---- PNG (grayscale, via libpng) -------------------------------------------

inline RawImage read_png(const std::string& path) {
  detail::FileCloser fc;
  fc.fp = std::fopen(path.c_str(), "rb");
  if (!fc.fp) throw DataError("cannot open image: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError(path + ": png reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError(path + ": png info allocation failed");
  }
  RawImage img;
  std::vector<png_bytep> row_ptrs;
  std::vector<unsigned char> data;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path + ": corrupt or unreadable PNG");
  }
  png_init_io(png, fc.fp);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path + ": grayscale PNG required");
  }
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  if (depth == 16) png_set_swap(png);  // stored big-endian; we want native
  png_read_update_info(png, info);
  img.width = w;
  img.height = h;
  img.bit_depth = depth;
  const std::size_t stride = png_get_rowbytes(png, info);
  data.resize(stride * h);
  row_ptrs.resize(h);
  for (png_uint_32 r = 0; r < h; ++r) row_ptrs[r] = data.data() + r * stride;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  img.pixels.resize(static_cast<std::size_t>(w) * h);
  if (depth == 16) {
    const std::uint16_t* src = reinterpret_cast<const std::uint16_t*>(data.data());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = src[i];
  } else {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = data[i];
  }
  return img;
}

inline void write_png(const std::string& path, const Tensor& img,
                      int bit_depth = 16) {
  if (img.shape.size() != 2)
    throw ShapeError("write_png: expected [H,W] image, got " +
                     shape_str(img.shape));
  if (bit_depth != 8 && bit_depth != 16)
    throw DataError("write_png: bit depth must be 8 or 16");
  const std::size_t h = img.shape[0], w = img.shape[1];
  const std::uint16_t maxval = bit_depth == 8 ? 255 : 65535;
  std::vector<unsigned char> data;
  std::vector<png_bytep> row_ptrs(h);
  const std::size_t stride = w * (bit_depth / 8);
  data.resize(stride * h);
  for (std::size_t r = 0; r < h; ++r) {
    row_ptrs[r] = data.data() + r * stride;
    for (std::size_t c = 0; c < w; ++c) {
      std::uint16_t q = detail::quantize01(img.values[r * w + c], maxval);
      if (bit_depth == 16) {
        row_ptrs[r][2 * c] = static_cast<unsigned char>(q >> 8);
        row_ptrs[r][2 * c + 1] = static_cast<unsigned char>(q & 0xff);
      } else {
        row_ptrs[r][c] = static_cast<unsigned char>(q);
      }
    }
  }
  detail::FileCloser fc;
  fc.fp = std::fopen(path.c_str(), "wb");
  if (!fc.fp) throw DataError("cannot write image: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError(path + ": png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError(path + ": png info allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError(path + ": PNG write failed");
  }
  png_init_io(png, fc.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w),
               static_cast<png_uint_32>(h), bit_depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Dispatch on file extension: ".png" or ".pgm".
inline RawImage read_image(const std::string& path) {
  auto dot = path.find_last_of('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  for (char& c : ext) c = static_cast<char>(std::tolower(c));
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm") return read_pgm(path);
  throw DataError(path + ": unsupported image format (expected .png or .pgm)");
}

}  // namespace ssvr

#endif  // SSVR_IMAGE_IO_HPP

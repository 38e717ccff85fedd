#pragma once

#include <png.h>
#include <tiffio.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "hcfusion/errors.hpp"
#include "hcfusion/plane.hpp"
#include "hcfusion/tensor.hpp"

namespace hcfusion {

enum class ColorSpace { kGray, kRgb, kYCbCr };

/// Decoded raster with interleaved samples.
struct ImageSample {
  std::size_t height = 0, width = 0, channels = 1;
  int bit_depth = 8;
  ColorSpace color_space = ColorSpace::kGray;
  std::string modality;
  std::vector<std::uint16_t> pixels;

  double max_value() const { return bit_depth == 16 ? 65535.0 : 255.0; }
  bool is_color() const { return channels == 3; }

  /// Channel `c` as a plane of raw sample values.
  Plane channel(std::size_t c) const {
    Plane p(height, width);
    for (std::size_t i = 0; i < height * width; ++i) p.data[i] = pixels[i * channels + c];
    return p;
  }

  bool operator==(const ImageSample&) const = default;
};

inline const char* kSupportedFormats = "PNG (.png) and TIFF (.tif, .tiff), 8 or 16 bits, gray or RGB";

namespace detail {

inline std::string lower_extension(const std::string& path) {
  std::string ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngError {
  std::jmp_buf jmp;
  char message[256] = {};
};

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(err->message, sizeof(err->message), "%s", msg);
  std::longjmp(err->jmp, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

inline ImageSample read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open image '" + path + "'");
  PngError err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  ImageSample img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> raw;
  if (setjmp(err.jmp)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("cannot decode PNG '" + path + "': " + err.message);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  depth = png_get_bit_depth(png, info);
  img.channels = png_get_channels(png, info);
  img.bit_depth = depth == 16 ? 16 : 8;
  img.color_space = img.channels == 3 ? ColorSpace::kRgb : ColorSpace::kGray;
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = img.width * img.height * img.channels;
  img.pixels.resize(n);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t i = 0; i < img.width * img.channels; ++i) {
      const std::uint8_t* r = raw.data() + y * rowbytes;
      img.pixels[y * img.width * img.channels + i] =
          img.bit_depth == 16 ? static_cast<std::uint16_t>(r[2 * i] | (r[2 * i + 1] << 8)) : r[i];
    }
  return img;
}

inline void write_png(const std::string& path, const ImageSample& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot create image '" + path + "'");
  PngError err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  const std::size_t bytes = img.bit_depth == 16 ? 2 : 1;
  const std::size_t rowbytes = img.width * img.channels * bytes;
  std::vector<std::uint8_t> raw(rowbytes * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (bytes == 2) {
      raw[2 * i] = static_cast<std::uint8_t>(img.pixels[i] & 0xff);
      raw[2 * i + 1] = static_cast<std::uint8_t>(img.pixels[i] >> 8);
    } else {
      raw[i] = static_cast<std::uint8_t>(img.pixels[i]);
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * rowbytes;
  if (setjmp(err.jmp)) {
    png_destroy_write_struct(&png, &info);
    throw DataError("cannot encode PNG '" + path + "': " + err.message);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bytes == 2) png_set_swap(png);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct TiffCloser {
  void operator()(TIFF* t) const {
    if (t) TIFFClose(t);
  }
};

inline ImageSample read_tiff(const std::string& path) {
  TIFFSetWarningHandler(nullptr);
  std::unique_ptr<TIFF, TiffCloser> tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) throw DataError("cannot open TIFF '" + path + "'");
  std::uint32_t w = 0, h = 0;
  std::uint16_t bps = 8, spp = 1, planar = PLANARCONFIG_CONTIG;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
  if ((bps != 8 && bps != 16) || (spp != 1 && spp != 3 && spp != 4) || planar != PLANARCONFIG_CONTIG)
    throw DataError("unsupported TIFF layout in '" + path + "' (supported: " + kSupportedFormats + ")");
  ImageSample img;
  img.width = w;
  img.height = h;
  img.bit_depth = bps;
  img.channels = spp == 1 ? 1 : 3;
  img.color_space = img.channels == 3 ? ColorSpace::kRgb : ColorSpace::kGray;
  img.pixels.resize(static_cast<std::size_t>(w) * h * img.channels);
  std::vector<std::uint8_t> line(TIFFScanlineSize(tif.get()));
  for (std::uint32_t y = 0; y < h; ++y) {
    if (TIFFReadScanline(tif.get(), line.data(), y) < 0) throw DataError("cannot read TIFF scanline in '" + path + "'");
    for (std::uint32_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const std::size_t s = static_cast<std::size_t>(x) * spp + c;
        std::uint16_t v = 0;
        if (bps == 16)
          std::memcpy(&v, line.data() + 2 * s, 2);
        else
          v = line[s];
        img.pixels[(static_cast<std::size_t>(y) * w + x) * img.channels + c] = v;
      }
  }
  return img;
}

inline void write_tiff(const std::string& path, const ImageSample& img) {
  std::unique_ptr<TIFF, TiffCloser> tif(TIFFOpen(path.c_str(), "w"));
  if (!tif) throw DataError("cannot create TIFF '" + path + "'");
  TIFF* t = tif.get();
  TIFFSetField(t, TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(img.width));
  TIFFSetField(t, TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(img.height));
  TIFFSetField(t, TIFFTAG_BITSPERSAMPLE, static_cast<std::uint16_t>(img.bit_depth));
  TIFFSetField(t, TIFFTAG_SAMPLESPERPIXEL, static_cast<std::uint16_t>(img.channels));
  TIFFSetField(t, TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
  TIFFSetField(t, TIFFTAG_PHOTOMETRIC, img.channels == 3 ? PHOTOMETRIC_RGB : PHOTOMETRIC_MINISBLACK);
  TIFFSetField(t, TIFFTAG_COMPRESSION, COMPRESSION_NONE);
  TIFFSetField(t, TIFFTAG_ROWSPERSTRIP, static_cast<std::uint32_t>(1));
  const std::size_t bytes = img.bit_depth == 16 ? 2 : 1;
  std::vector<std::uint8_t> line(img.width * img.channels * bytes);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t i = 0; i < img.width * img.channels; ++i) {
      const auto v = img.pixels[y * img.width * img.channels + i];
      if (bytes == 2)
        std::memcpy(line.data() + 2 * i, &v, 2);
      else
        line[i] = static_cast<std::uint8_t>(v);
    }
    if (TIFFWriteScanline(t, line.data(), static_cast<std::uint32_t>(y), 0) < 0)
      throw DataError("cannot write TIFF scanline to '" + path + "'");
  }
}

}  // namespace detail

inline bool is_supported_image(const std::string& path) {
  const auto ext = detail::lower_extension(path);
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

inline ImageSample read_image(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError("image not found: '" + path + "'");
  const auto ext = detail::lower_extension(path);
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".tif" || ext == ".tiff") return detail::read_tiff(path);
  throw DataError("unsupported image format '" + ext + "' for '" + path + "'; supported: " + kSupportedFormats);
}

inline void write_image(const std::string& path, const ImageSample& img) {
  if (img.pixels.size() != img.width * img.height * img.channels)
    throw DataError("write_image: pixel buffer does not match dimensions");
  if (img.bit_depth != 8 && img.bit_depth != 16) throw DataError("write_image: bit depth must be 8 or 16");
  const auto ext = detail::lower_extension(path);
  if (ext == ".png") return detail::write_png(path, img);
  if (ext == ".tif" || ext == ".tiff") return detail::write_tiff(path, img);
  throw DataError("unsupported image format '" + ext + "' for '" + path + "'; supported: " + kSupportedFormats);
}

// ---------------------------------------------------------------------------
// Color conversion (full-range BT.601) and value normalization.

/// Luma of an RGB image, or the single channel of a gray one, in raw sample units.
inline Plane luminance(const ImageSample& img) {
  if (!img.is_color()) return img.channel(0);
  Plane y(img.height, img.width);
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const double r = img.pixels[3 * i], g = img.pixels[3 * i + 1], b = img.pixels[3 * i + 2];
    y.data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
  }
  return y;
}

struct YCbCrPlanes {
  Plane y, cb, cr;
};

inline YCbCrPlanes rgb_to_ycbcr(const ImageSample& img) {
  if (!img.is_color()) throw DataError("rgb_to_ycbcr: image is not RGB");
  const double off = (img.max_value() + 1.0) / 2.0;
  YCbCrPlanes p{Plane(img.height, img.width), Plane(img.height, img.width), Plane(img.height, img.width)};
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const double r = img.pixels[3 * i], g = img.pixels[3 * i + 1], b = img.pixels[3 * i + 2];
    p.y.data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
    p.cb.data[i] = off - 0.168736 * r - 0.331264 * g + 0.5 * b;
    p.cr.data[i] = off + 0.5 * r - 0.418688 * g - 0.081312 * b;
  }
  return p;
}

inline std::uint16_t quantize(double v, double max_value) {
  return static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, max_value));
}

inline ImageSample ycbcr_to_rgb(const YCbCrPlanes& p, int bit_depth) {
  ImageSample img;
  img.height = p.y.height;
  img.width = p.y.width;
  img.channels = 3;
  img.bit_depth = bit_depth;
  img.color_space = ColorSpace::kRgb;
  const double mx = img.max_value(), off = (mx + 1.0) / 2.0;
  img.pixels.resize(img.height * img.width * 3);
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const double y = p.y.data[i], cb = p.cb.data[i] - off, cr = p.cr.data[i] - off;
    img.pixels[3 * i] = quantize(y + 1.402 * cr, mx);
    img.pixels[3 * i + 1] = quantize(y - 0.344136 * cb - 0.714136 * cr, mx);
    img.pixels[3 * i + 2] = quantize(y + 1.772 * cb, mx);
  }
  return img;
}

/// Raw sample values to [-1, 1].
template <typename T>
Tensor<T> normalize(const Plane& p, double max_value) {
  Tensor<T> t({1, 1, p.height, p.width});
  for (std::size_t i = 0; i < p.size(); ++i) t[i] = static_cast<T>(p.data[i] / max_value * 2.0 - 1.0);
  return t;
}

/// [-1, 1] back to raw sample values, rounded half away from zero and clamped.
template <typename T>
Plane denormalize(const Tensor<T>& t, double max_value, std::size_t batch_index = 0) {
  const std::size_t H = t.dim(2), W = t.dim(3);
  Plane p(H, W);
  const T* src = t.slice(batch_index);
  for (std::size_t i = 0; i < H * W; ++i)
    p.data[i] = quantize((static_cast<double>(src[i]) + 1.0) / 2.0 * max_value, max_value);
  return p;
}

inline ImageSample gray_sample(const Plane& p, int bit_depth) {
  ImageSample img;
  img.height = p.height;
  img.width = p.width;
  img.bit_depth = bit_depth;
  img.pixels.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) img.pixels[i] = quantize(p.data[i], img.max_value());
  return img;
}

/// Maps a plane between bit depths (8 <-> 16) by scaling to the new maximum.
inline Plane rescale_depth(const Plane& p, double from_max, double to_max) {
  if (from_max == to_max) return p;
  Plane out = p;
  for (auto& v : out.data) v = v / from_max * to_max;
  return out;
}

}  // namespace hcfusion

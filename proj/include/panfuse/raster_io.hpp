#pragma once

// ".pfr" raster container and grayscale PNG ingestion.
//
// Layout: "PFR1", u32 width, u32 height, u32 band_count (little endian), then
// width*height*band_count float32 LE values, band-sequential, row-major.

#include <bit>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "panfuse/error.hpp"
#include "panfuse/raster.hpp"

namespace panfuse::io {

inline constexpr char kRasterMagic[4] = {'P', 'F', 'R', '1'};
inline constexpr std::size_t kRasterHeaderBytes = 16;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidInput("short write to " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_raster(const MultispectralImage& img) {
  if (img.width() > std::numeric_limits<std::uint32_t>::max() ||
      img.height() > std::numeric_limits<std::uint32_t>::max())
    throw InvalidInput("encode_raster: dimensions exceed u32");
  std::vector<std::uint8_t> out(kRasterMagic, kRasterMagic + 4);
  detail::put_u32(out, static_cast<std::uint32_t>(img.width()));
  detail::put_u32(out, static_cast<std::uint32_t>(img.height()));
  detail::put_u32(out, static_cast<std::uint32_t>(img.band_count()));
  out.reserve(kRasterHeaderBytes + 4 * img.width() * img.height() * img.band_count());
  for (const auto& b : img.bands())
    for (double v : b.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline MultispectralImage decode_raster(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kRasterHeaderBytes)
    throw FormatError("pfr: truncated header: expected " + std::to_string(kRasterHeaderBytes) +
                      " bytes at offset 0, got " + std::to_string(bytes.size()));
  if (std::memcmp(bytes.data(), kRasterMagic, 4) != 0)
    throw FormatError("pfr: bad magic at offset 0");
  const std::uint64_t w = detail::get_u32(bytes.data() + 4);
  const std::uint64_t h = detail::get_u32(bytes.data() + 8);
  const std::uint64_t k = detail::get_u32(bytes.data() + 12);
  if (w == 0 || h == 0 || k == 0)
    throw FormatError("pfr: zero dimension in header at offset 4");
  // w*h fits in 64 bits; guard the product with k and the byte multiplier.
  const std::uint64_t pixels = w * h;
  if (pixels > std::numeric_limits<std::uint64_t>::max() / k / 4 ||
      pixels * k * 4 > std::numeric_limits<std::size_t>::max() - kRasterHeaderBytes)
    throw FormatError("pfr: dimension overflow in header at offset 4");
  const std::uint64_t payload = pixels * k * 4;
  const std::uint64_t actual = bytes.size() - kRasterHeaderBytes;
  if (actual != payload)
    throw FormatError("pfr: payload at offset 16 " +
                      std::string(actual < payload ? "truncated" : "has trailing bytes") +
                      ": expected " + std::to_string(payload) + " bytes, got " + std::to_string(actual));

  std::vector<RasterBand> bands;
  bands.reserve(k);
  const std::uint8_t* p = bytes.data() + kRasterHeaderBytes;
  for (std::uint64_t b = 0; b < k; ++b) {
    std::vector<double> data(pixels);
    for (std::uint64_t i = 0; i < pixels; ++i, p += 4) {
      const float f = std::bit_cast<float>(detail::get_u32(p));
      if (!std::isfinite(f))
        throw FormatError("pfr: non-finite value at offset " +
                          std::to_string(static_cast<std::size_t>(p - bytes.data())));
      data[i] = f;
    }
    bands.emplace_back(w, h, std::move(data));
  }
  return MultispectralImage(std::move(bands));
}

inline void save_raster(const MultispectralImage& img, const std::filesystem::path& path) {
  detail::write_file(path, encode_raster(img));
}

inline void save_raster(const RasterBand& band, const std::filesystem::path& path) {
  save_raster(MultispectralImage({band}), path);
}

// 8/16-bit grayscale PNG, normalized to [0,1] by the type maximum.
inline RasterBand load_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw InvalidInput("cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw NumericalError("png: libpng allocation failed");
  }
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};

  std::vector<double> data;
  std::vector<std::uint8_t> buf;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int depth = 0, color = 0;
  if (setjmp(png_jmpbuf(png))) throw FormatError("png: decode failed for " + path.string());
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_get_IHDR(png, info, &width, &height, &depth, &color, nullptr, nullptr, nullptr);
  if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16))
    throw FormatError("png: only 8/16-bit grayscale is supported (" + path.string() + ")");
  if (depth == 16) png_set_swap(png);  // rows become host-order u16 (little endian hosts)
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buf.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());

  data.resize(static_cast<std::size_t>(width) * height);
  for (png_uint_32 y = 0; y < height; ++y)
    for (png_uint_32 x = 0; x < width; ++x) {
      double v;
      if (depth == 8) {
        v = rows[y][x] / 255.0;
      } else {
        std::uint16_t s;
        std::memcpy(&s, rows[y] + 2 * x, 2);
        v = s / 65535.0;
      }
      data[static_cast<std::size_t>(y) * width + x] = v;
    }
  return RasterBand(width, height, std::move(data));
}

// Dispatches on the file's leading bytes: PNG signature or "PFR1".
inline MultispectralImage load_raster(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0)
    return MultispectralImage({load_png(path)});
  return decode_raster(bytes);
}

inline RasterBand load_band(const std::filesystem::path& path) {
  auto img = load_raster(path);
  if (img.band_count() != 1)
    throw InvalidInput(path.string() + ": expected a single band, found " +
                       std::to_string(img.band_count()));
  return img.band(0);
}

}  // namespace panfuse::io

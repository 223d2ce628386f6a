#pragma once
// PNG (8-bit RGB) and PGM (8-bit grey) writers for inspection output.

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "scm/tensor.hpp"

namespace scm {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Round-half-up quantization of [0,1] to 0..255.
inline std::uint8_t quantize_u8(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& body) {
  put_be32(out, static_cast<std::uint32_t>(body.size()));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), body.begin(), body.end());
  uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace detail

// Encodes an image tensor [3,H,W] in [0,1] as PNG bytes.
inline std::vector<std::uint8_t> encode_png(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw DimensionError("encode_png expects [3,H,W]");
  const auto H = image.dim(1), W = image.dim(2);
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(H * (1 + 3 * W)));
  for (std::int64_t y = 0; y < H; ++y) {
    raw.push_back(0);  // filter: none
    for (std::int64_t x = 0; x < W; ++x)
      for (std::int64_t c = 0; c < 3; ++c) raw.push_back(quantize_u8(image[(c * H + y) * W + x]));
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("zlib compression failed");
  z.resize(zlen);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(W));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(H));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const std::filesystem::path& path, const Tensor& image) {
  detail::write_bytes(path, encode_png(image));
}

// Writes one [H,W] plane (values in [0,1]) as binary PGM.
inline void write_pgm(const std::filesystem::path& path, std::span<const double> plane, std::int64_t H,
                      std::int64_t W) {
  if (static_cast<std::int64_t>(plane.size()) != H * W) throw DimensionError("write_pgm plane size mismatch");
  std::string header = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (double v : plane) bytes.push_back(quantize_u8(v));
  detail::write_bytes(path, bytes);
}

// Writes a matrix as PGM after min-max normalization (heat-map style).
inline void write_pgm_normalized(const std::filesystem::path& path, std::span<const double> plane, std::int64_t H,
                                 std::int64_t W) {
  auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  double a = *lo, b = *hi;
  std::vector<double> norm(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i) norm[i] = b > a ? (plane[i] - a) / (b - a) : 0.0;
  write_pgm(path, norm, H, W);
}

}  // namespace scm

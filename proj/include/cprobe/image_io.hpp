#pragma once

// Binary PPM (P6) and PGM (P5) images with maxval 255.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cprobe/errors.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}

  std::uint8_t* px(std::size_t y, std::size_t x) { return &pixels[(y * width + x) * 3]; }
  const std::uint8_t* px(std::size_t y, std::size_t x) const { return &pixels[(y * width + x) * 3]; }
  bool operator==(const RgbImage&) const = default;
};

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}
  bool operator==(const GrayImage&) const = default;
};

namespace detail {

inline std::size_t read_pnm_int(std::istream& is) {
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = is.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw IoError("malformed PNM header");
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    ch = is.get();
  }
  // exactly one whitespace byte terminates the header field
  return v;
}

inline void read_pnm(const std::filesystem::path& path, const char* magic, std::size_t channels,
                     std::size_t& h, std::size_t& w, std::vector<std::uint8_t>& pixels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string m(2, '\0');
  is.read(m.data(), 2);
  if (m != magic) throw IoError(path.string() + ": expected " + magic + " image");
  w = read_pnm_int(is);
  h = read_pnm_int(is);
  if (read_pnm_int(is) != 255) throw IoError(path.string() + ": only maxval 255 supported");
  pixels.resize(h * w * channels);
  is.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!is) throw IoError(path.string() + ": truncated pixel data");
}

inline void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t h,
                      std::size_t w, const std::vector<std::uint8_t>& pixels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << magic << '\n' << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  detail::write_pnm(path, "P6", img.height, img.width, img.pixels);
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  RgbImage img;
  detail::read_pnm(path, "P6", 3, img.height, img.width, img.pixels);
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  detail::write_pnm(path, "P5", img.height, img.width, img.pixels);
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  GrayImage img;
  detail::read_pnm(path, "P5", 1, img.height, img.width, img.pixels);
  return img;
}

/// [1,3,H,W] tensor with values in [0,1].
inline Tensor to_tensor(const RgbImage& img) {
  Tensor t({1, 3, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) t.at(0, c, y, x) = img.px(y, x)[c] / 255.0f;
  return t;
}

/// Binary [H,W] mask: 1 where the pixel is non-zero.
inline Tensor to_mask(const GrayImage& img) {
  Tensor t({img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i] ? 1.0f : 0.0f;
  return t;
}

}  // namespace cprobe

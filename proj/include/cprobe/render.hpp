#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "cprobe/errors.hpp"
#include "cprobe/image_io.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

/// Blue-white-red rendering of an [H,W] map, scaled by its largest
/// magnitude. Zero maps render white.
inline RgbImage colorize(const Tensor& heat) {
  if (heat.rank() != 2) throw ShapeError("heatmap must be [H,W]");
  float peak = 0.0f;
  for (float v : heat.data()) {
    if (!std::isfinite(v)) throw ShapeError("heatmap contains non-finite values");
    peak = std::max(peak, std::abs(v));
  }
  RgbImage img(heat.dim(0), heat.dim(1));
  for (std::size_t i = 0; i < heat.size(); ++i) {
    const float t = peak > 0 ? heat[i] / peak : 0.0f;  // in [-1,1]
    const auto fade = static_cast<std::uint8_t>(std::lround(255.0f * (1.0f - std::abs(t))));
    std::uint8_t* p = &img.pixels[i * 3];
    p[0] = t < 0 ? fade : 255;
    p[1] = fade;
    p[2] = t > 0 ? fade : 255;
  }
  return img;
}

inline void render_heatmap(const Tensor& heat, const std::filesystem::path& out) {
  write_ppm(out, colorize(heat));
}

}  // namespace cprobe

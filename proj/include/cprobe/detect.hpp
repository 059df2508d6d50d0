#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cprobe/errors.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

/// Axis-aligned box in input pixels, half-open [x0,x1) x [y0,y1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

inline double iou(const Box& a, const Box& b) {
  const Box inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
                  std::min(a.y1, b.y1)};
  const double i = inter.area();
  const double u = a.area() + b.area() - i;
  return u > 0 ? i / u : 0.0;
}

struct Detection {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t class_id = 0;
  float score = 0.0f;
  Box box;
};

/// Maps grid cells to fixed boxes: each cell owns a box of `box_scale` cells
/// per side centred on the cell centre, clipped to the image.
struct GridGeometry {
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  double box_scale = 2.0;

  Box cell_box(std::size_t row, std::size_t col, std::size_t grid_h, std::size_t grid_w) const {
    const double ch = static_cast<double>(image_height) / grid_h;
    const double cw = static_cast<double>(image_width) / grid_w;
    const double cy = (row + 0.5) * ch, cx = (col + 0.5) * cw;
    const double hh = 0.5 * box_scale * ch, hw = 0.5 * box_scale * cw;
    return {std::max(0.0, cx - hw), std::max(0.0, cy - hh),
            std::min<double>(image_width, cx + hw), std::min<double>(image_height, cy + hh)};
  }
};

struct NmsOptions {
  float score_threshold = 0.5f;
  float iou_threshold = 0.5f;
  /// Class index treated as background and never reported; -1 disables.
  int background_class = 0;
};

/// Softmax over the class axis of [N,K,Gh,Gw] logits.
inline Tensor softmax_classes(const Tensor& logits) {
  const Shape4 s = shape4(logits);
  Tensor out(logits.shape());
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < s.channels; ++k) mx = std::max<double>(mx, logits.at(n, k, y, x));
        double z = 0.0;
        for (std::size_t k = 0; k < s.channels; ++k) z += std::exp(logits.at(n, k, y, x) - mx);
        for (std::size_t k = 0; k < s.channels; ++k) {
          out.at(n, k, y, x) = static_cast<float>(std::exp(logits.at(n, k, y, x) - mx) / z);
        }
      }
  return out;
}

/// Per-cell argmax classification followed by greedy suppression. The result
/// is sorted by descending score.
inline std::vector<Detection> nms(const Tensor& logits, const GridGeometry& geometry,
                                  const NmsOptions& opts = {}) {
  const Shape4 s = shape4(logits);
  if (s.batch != 1) throw ShapeError("nms expects logits of shape [1,K,Gh,Gw]");
  const Tensor probs = softmax_classes(logits);

  std::vector<Detection> candidates;
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < s.channels; ++k)
        if (probs.at(0, k, y, x) > probs.at(0, best, y, x)) best = k;
      const float score = probs.at(0, best, y, x);
      if (static_cast<int>(best) == opts.background_class) continue;
      if (!(score > opts.score_threshold)) continue;
      candidates.push_back({y, x, best, score, geometry.cell_box(y, x, s.height, s.width)});
    }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });

  std::vector<Detection> kept;
  for (const Detection& d : candidates) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, d.box) > opts.iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace cprobe

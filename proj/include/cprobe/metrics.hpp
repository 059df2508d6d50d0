#pragma once

// Concept localization and input-perturbation faithfulness curves.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cprobe/attribution.hpp"
#include "cprobe/detect.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/lrp.hpp"
#include "cprobe/model.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

struct LocalizationResult {
  double mu_c = 0.0;
  double inside_mass = 0.0;
  double total_mass = 0.0;
};

/// Share of positive heatmap mass inside the binary mask. Throws
/// UndefinedMetric when there is no positive mass at all.
inline LocalizationResult localization(const Tensor& heat, const Tensor& mask) {
  if (heat.shape() != mask.shape()) {
    throw ShapeError("heatmap " + shape_str(heat.shape()) + " and mask " +
                     shape_str(mask.shape()) + " differ");
  }
  LocalizationResult r;
  for (std::size_t i = 0; i < heat.size(); ++i) {
    if (mask[i] != 0.0f && mask[i] != 1.0f) throw ShapeError("mask is not binary");
    if (heat[i] > 0) {
      r.total_mass += heat[i];
      if (mask[i] == 1.0f) r.inside_mass += heat[i];
    }
  }
  if (!(r.total_mass > 0)) throw UndefinedMetric("heatmap has no positive relevance");
  r.mu_c = r.inside_mass / r.total_mass;
  return r;
}

inline std::optional<LocalizationResult> try_localization(const Tensor& heat, const Tensor& mask) {
  try {
    return localization(heat, mask);
  } catch (const UndefinedMetric&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Perturbation

enum class FillMode { Mean, Zero };
enum class PixelOrder { Ranked, Random };

inline const char* to_string(FillMode f) { return f == FillMode::Mean ? "mean" : "zero"; }
inline const char* to_string(PixelOrder o) { return o == PixelOrder::Ranked ? "ranked" : "random"; }

inline std::vector<double> default_perturbation_steps() {
  return {0.0, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0};
}

struct PerturbOptions {
  std::vector<double> steps = default_perturbation_steps();
  FillMode fill = FillMode::Mean;
  /// Per-channel fill for FillMode::Mean, normally the dataset mean. Empty
  /// means the channel means of the image being perturbed.
  std::vector<float> fill_values;
  PixelOrder order = PixelOrder::Ranked;
  std::uint64_t seed = 0;
  ProjectionMode projection = ProjectionMode::ChannelScale;
  /// Skip the per-step explanation (usage ratio and mu_c become NaN).
  bool scores_only = false;
};

struct PerturbationCurve {
  std::vector<double> fractions;
  std::vector<double> class_scores;
  std::vector<double> usage_ratios;
  /// NaN where mu_c is undefined or no mask was given.
  std::vector<double> localization_scores;
  PixelOrder order = PixelOrder::Ranked;
};

/// Per-channel means over a set of [1,C,H,W] images.
inline std::vector<float> channel_means(std::span<const Tensor> images) {
  if (images.empty()) throw DataError("no images to average");
  const Shape4 s0 = shape4(images.front());
  std::vector<double> acc(s0.channels, 0.0);
  double count = 0;
  for (const Tensor& img : images) {
    const Shape4 s = shape4(img);
    if (s.channels != s0.channels) throw ShapeError("images disagree on channel count");
    const std::size_t plane = s.height * s.width;
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) acc[c] += img[(n * s.channels + c) * plane + p];
    count += static_cast<double>(s.batch * plane);
  }
  std::vector<float> out(acc.size());
  for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c] / count);
  return out;
}

/// Spatial positions of an [H,W] map ordered by descending value, ties
/// row-major.
inline std::vector<std::size_t> rank_pixels(const Tensor& heat) {
  std::vector<std::size_t> idx(heat.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return heat[a] > heat[b]; });
  return idx;
}

inline std::vector<std::size_t> random_pixels(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

/// Removes pixels of `x` in order of `heat` (or randomly) at each fraction
/// of `opts.steps` and records the probability of the tracked detection's
/// class at its original cell, a fresh usage ratio and a fresh mu_c.
inline PerturbationCurve perturb_and_score(const ModelGraph& model, const Composite& composite,
                                           const Tensor& x, const Tensor& heat,
                                           const ConceptVector& cv, const Detection& det,
                                           const std::optional<Tensor>& mask,
                                           const PerturbOptions& opts = {}) {
  const Shape4 s = shape4(x);
  if (s.batch != 1) throw ShapeError("perturbation expects a single image");
  if (heat.shape() != Shape{s.height, s.width}) throw ShapeError("heatmap does not match the image");
  if (opts.steps.empty() || opts.steps.front() != 0.0) {
    throw ConfigError("perturbation steps must start at 0");
  }
  for (std::size_t i = 1; i < opts.steps.size(); ++i) {
    if (!(opts.steps[i] > opts.steps[i - 1]) || opts.steps[i] > 1.0) {
      throw ConfigError("perturbation steps must increase strictly within [0,1]");
    }
  }

  const std::size_t plane = s.height * s.width;
  std::vector<float> fill(s.channels, 0.0f);
  if (opts.fill == FillMode::Mean) {
    fill = opts.fill_values.empty() ? channel_means(std::span<const Tensor>(&x, 1)) : opts.fill_values;
    if (fill.size() != s.channels) throw ShapeError("fill values do not match channel count");
  }
  const std::vector<std::size_t> order =
      opts.order == PixelOrder::Ranked ? rank_pixels(heat) : random_pixels(plane, opts.seed);

  PerturbationCurve curve;
  curve.order = opts.order;
  Tensor img = x;
  std::size_t removed = 0;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (double f : opts.steps) {
    const auto target_count = static_cast<std::size_t>(std::lround(f * plane));
    for (; removed < target_count; ++removed) {
      const std::size_t p = order[removed];
      for (std::size_t c = 0; c < s.channels; ++c) img[c * plane + p] = fill[c];
    }
    const ForwardResult fwd = forward(model, img);
    const Tensor probs = softmax_classes(fwd.output);
    curve.fractions.push_back(f);
    curve.class_scores.push_back(probs.at(0, det.class_id, det.row, det.col));
    if (opts.scores_only) {
      curve.usage_ratios.push_back(nan);
      curve.localization_scores.push_back(nan);
      continue;
    }
    const ConceptAttribution a = explain_concept(model, fwd.trace, composite, cv,
                                                 init_single_detection(fwd.output, det),
                                                 opts.projection);
    curve.usage_ratios.push_back(a.usage_ratio);
    const auto loc = mask ? try_localization(a.input_heatmap, *mask) : std::nullopt;
    curve.localization_scores.push_back(loc ? loc->mu_c : nan);
  }
  return curve;
}

/// 1 - usage ratio per step.
inline std::vector<double> concept_share_curve(const PerturbationCurve& curve) {
  std::vector<double> out;
  out.reserve(curve.usage_ratios.size());
  for (double u : curve.usage_ratios) out.push_back(1.0 - u);
  return out;
}

/// Trapezoidal area under ys over xs.
inline double auc(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("auc: length mismatch");
  double a = 0.0;
  for (std::size_t i = 1; i < xs.size(); ++i) a += 0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]);
  return a;
}

inline double class_score_auc(const PerturbationCurve& c) { return auc(c.fractions, c.class_scores); }

inline constexpr const char* kCurveCsvHeader =
    "fraction,class_score,usage_ratio,mu_c,non_concept_share";

/// CSV with '#' comment lines describing the settings, then the fixed
/// header and one row per step. Undefined values are written as "nan".
inline void write_curve_csv(const std::filesystem::path& path, const PerturbationCurve& curve,
                            const PerturbOptions& opts) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "# order=" << to_string(curve.order) << " fill=" << to_string(opts.fill)
     << " seed=" << opts.seed << " projection=" << to_string(opts.projection) << '\n';
  os << "# steps=";
  for (std::size_t i = 0; i < opts.steps.size(); ++i) os << (i ? ";" : "") << opts.steps[i];
  os << '\n' << kCurveCsvHeader << '\n';
  const auto share = concept_share_curve(curve);
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
    os << curve.fractions[i] << ',' << curve.class_scores[i] << ',' << curve.usage_ratios[i] << ','
       << curve.localization_scores[i] << ',' << share[i] << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace cprobe

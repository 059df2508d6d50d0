#pragma once

// Concept-conditional attribution: relevance at the concept layer is
// projected onto the concept direction and the projection is propagated on
// to the input.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cprobe/concepts.hpp"
#include "cprobe/detect.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/lrp.hpp"
#include "cprobe/model.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/synth.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

enum class ProjectionMode { ChannelScale, OrthogonalProjection };

inline const char* to_string(ProjectionMode m) {
  return m == ProjectionMode::ChannelScale ? "channel" : "orth";
}

inline ProjectionMode parse_projection_mode(const std::string& s) {
  if (s == "channel") return ProjectionMode::ChannelScale;
  if (s == "orth") return ProjectionMode::OrthogonalProjection;
  throw ConfigError("unknown projection mode '" + s + "'");
}

inline const char* to_string(InitMode m) {
  switch (m) {
    case InitMode::FullOutput: return "full";
    case InitMode::ClassMask: return "classmask";
    case InitMode::SingleDetection: return "single";
  }
  return "?";
}

inline InitMode parse_init_mode(const std::string& s) {
  if (s == "full") return InitMode::FullOutput;
  if (s == "classmask") return InitMode::ClassMask;
  if (s == "single") return InitMode::SingleDetection;
  throw ConfigError("unknown init mode '" + s + "'");
}

/// Projects latent relevance `raw` ([C,h,w] or [1,C,h,w]) onto `v`.
/// ChannelScale multiplies channel c by v[c]/|v|; OrthogonalProjection
/// replaces each spatial fibre r by (r.v / |v|^2) v.
inline Tensor project(const Tensor& raw, const Tensor& v, ProjectionMode mode) {
  const std::size_t c = raw.rank() == 4 ? raw.dim(1) : raw.dim(0);
  if ((raw.rank() != 3 && raw.rank() != 4) || (raw.rank() == 4 && raw.dim(0) != 1)) {
    throw ShapeError("latent relevance must be [C,h,w], got " + shape_str(raw.shape()));
  }
  if (v.size() != c) {
    throw ShapeError("concept vector has " + std::to_string(v.size()) + " entries, layer has " +
                     std::to_string(c) + " channels");
  }
  double norm2 = 0.0;
  for (float x : v.data()) norm2 += static_cast<double>(x) * x;
  if (!(norm2 > 0) || !std::isfinite(norm2)) throw VectorError("concept vector has zero norm");

  const std::size_t plane = raw.size() / c;
  Tensor out(raw.shape());
  if (mode == ProjectionMode::ChannelScale) {
    const double norm = std::sqrt(norm2);
    for (std::size_t k = 0; k < c; ++k) {
      const double s = v[k] / norm;
      for (std::size_t p = 0; p < plane; ++p) out[k * plane + p] = static_cast<float>(raw[k * plane + p] * s);
    }
  } else {
    for (std::size_t p = 0; p < plane; ++p) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += static_cast<double>(raw[k * plane + p]) * v[k];
      const double s = dot / norm2;
      for (std::size_t k = 0; k < c; ++k) out[k * plane + p] = static_cast<float>(s * v[k]);
    }
  }
  return out;
}

inline Tensor project(const Tensor& raw, const ConceptVector& cv, ProjectionMode mode) {
  return project(raw, cv.v, mode);
}

struct AttributionProvenance {
  std::string concept_name;
  std::string layer;
  InitMode init = InitMode::FullOutput;
  ProjectionMode projection = ProjectionMode::ChannelScale;
};

struct ConceptAttribution {
  Tensor input_heatmap;     // [H,W]
  Tensor projected_latent;  // [C,h,w]
  Tensor raw_latent;        // [C,h,w]
  /// L1(projected) / L1(raw), clamped to [0,1]; 0 when raw is all zero.
  double usage_ratio = 0.0;
  /// Same ratio with L2 norms, never clamped.
  double usage_ratio_l2 = 0.0;
  /// True when the unclamped L1 ratio exceeded 1.
  bool clamped = false;
  /// Full input relevance [1,C_in,H,W].
  Tensor input_relevance;
  AttributionProvenance provenance;
};

namespace detail {

inline Tensor drop_batch(const Tensor& t) {
  const Shape4 s = shape4(t);
  return t.reshaped({s.channels, s.height, s.width});
}

}  // namespace detail

/// Attribution for a model whose forward trace is already available.
inline ConceptAttribution explain_concept(const ModelGraph& model, const ActivationTrace& trace,
                                          const Composite& composite,
                                          const ConceptVector& cv, const InitTarget& target,
                                          ProjectionMode mode = ProjectionMode::ChannelScale) {
  const std::size_t idx = model.index_of(cv.layer);
  const RelevanceState upper = backward(model, trace, composite, target, cv.layer);
  const Tensor& raw = upper.layers.at(cv.layer);
  const Tensor projected = project(raw, cv, mode);
  const RelevanceState lower = propagate(model, trace, composite, projected, idx);

  ConceptAttribution out;
  out.raw_latent = detail::drop_batch(raw);
  out.projected_latent = detail::drop_batch(projected);
  out.input_relevance = *lower.input_attribution;
  out.input_heatmap = heatmap(lower);
  const double raw_l1 = l1norm(raw), raw_l2 = l2norm(raw);
  if (raw_l1 > 0) {
    const double ratio = l1norm(projected) / raw_l1;
    out.clamped = ratio > 1.0;
    out.usage_ratio = std::clamp(ratio, 0.0, 1.0);
    out.usage_ratio_l2 = l2norm(projected) / raw_l2;
  }
  out.provenance = {cv.meta.concept_name, cv.layer, target.mode, mode};
  return out;
}

/// Forward pass on `x` ([1,C,H,W]) followed by explain_concept.
inline ConceptAttribution explain_concept(const ModelGraph& model, const Tensor& x,
                                          const Composite& composite,
                                          const ConceptVector& cv, const InitTarget& target,
                                          ProjectionMode mode = ProjectionMode::ChannelScale) {
  const ForwardResult fwd = forward(model, x);
  return explain_concept(model, fwd.trace, composite, cv, target, mode);
}

/// Same backward pass with the concept projection replaced by a channel mask
/// that keeps only channel `k` at the concept layer.
inline Tensor channel_masked_heatmap(const ModelGraph& model, const ActivationTrace& trace,
                                     const Composite& composite, const std::string& layer,
                                     std::size_t k, const InitTarget& target) {
  const std::size_t idx = model.index_of(layer);
  const RelevanceState upper = backward(model, trace, composite, target, layer);
  Tensor masked = upper.layers.at(layer);
  const Shape4 s = shape4(masked);
  if (k >= s.channels) throw IndexError("channel out of range");
  for (std::size_t c = 0; c < s.channels; ++c)
    if (c != k)
      for (std::size_t p = 0; p < s.height * s.width; ++p) masked[c * s.height * s.width + p] = 0.0f;
  return heatmap(propagate(model, trace, composite, masked, idx));
}

// ---------------------------------------------------------------------------
// Ranking

/// How the backward pass is seeded for each sample of a dataset.
struct InitRequest {
  InitMode mode = InitMode::FullOutput;
  /// Classes kept by ClassMask.
  std::vector<std::size_t> classes;
  /// Index into the NMS output used by SingleDetection (sorted by score).
  std::size_t detection = 0;
  NmsOptions nms;
  double box_scale = 2.0;
};

/// Detections for a forward output, using the grid geometry of `model`.
inline std::vector<Detection> detect(const ModelGraph& model, const Tensor& logits,
                                     const NmsOptions& nms_opts = {}, double box_scale = 2.0) {
  const GridGeometry geom{model.input_shape().height, model.input_shape().width, box_scale};
  return nms(logits, geom, nms_opts);
}

/// Builds the init target for `logits`; nullopt when SingleDetection finds
/// no detection at all.
inline std::optional<InitTarget> make_init(const ModelGraph& model, const Tensor& logits,
                                           const InitRequest& req) {
  if (req.mode != InitMode::SingleDetection) return init_target(logits, req.mode, req.classes);
  const auto dets = detect(model, logits, req.nms, req.box_scale);
  if (dets.empty()) return std::nullopt;
  if (req.detection >= dets.size()) {
    throw IndexError("detection " + std::to_string(req.detection) + " requested, only " +
                     std::to_string(dets.size()) + " found");
  }
  return init_single_detection(logits, dets[req.detection]);
}

struct UsageEntry {
  std::size_t sample_id = 0;
  double usage_ratio = 0.0;
};

inline void sort_by_usage(std::vector<UsageEntry>& entries) {
  std::sort(entries.begin(), entries.end(), [](const UsageEntry& a, const UsageEntry& b) {
    if (a.usage_ratio != b.usage_ratio) return a.usage_ratio > b.usage_ratio;
    return a.sample_id < b.sample_id;
  });
}

/// Usage ratio per image, sorted descending with ties broken by id. Samples
/// without a detection under SingleDetection score 0.
inline std::vector<UsageEntry> rank_by_usage(const ModelGraph& model, const Composite& composite,
                                             std::span<const Tensor> images,
                                             const ConceptVector& cv, const InitRequest& init,
                                             ProjectionMode mode = ProjectionMode::ChannelScale) {
  std::vector<UsageEntry> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const ForwardResult fwd = forward(model, images[i]);
    const auto target = make_init(model, fwd.output, init);
    out[i].sample_id = i;
    if (target) {
      out[i].usage_ratio =
          explain_concept(model, fwd.trace, composite, cv, *target, mode).usage_ratio;
    }
  });
  sort_by_usage(out);
  return out;
}

inline std::vector<UsageEntry> rank_by_usage(const ModelGraph& model, const Composite& composite,
                                             const DatasetHandle& dataset,
                                             const ConceptVector& cv, const InitRequest& init,
                                             ProjectionMode mode = ProjectionMode::ChannelScale) {
  std::vector<Tensor> images;
  images.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) images.push_back(dataset.image(i));
  auto ranked = rank_by_usage(model, composite, images, cv, init, mode);
  for (auto& e : ranked) e.sample_id = dataset.entries[e.sample_id].id;
  sort_by_usage(ranked);
  return ranked;
}

/// Writes heatmap.cptn, input_relevance.cptn, raw_latent.cptn,
/// projected_latent.cptn and attribution.txt into `dir`.
inline void export_attribution(const ConceptAttribution& a, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_tensor(dir / "heatmap.cptn", a.input_heatmap);
  save_tensor(dir / "input_relevance.cptn", a.input_relevance);
  save_tensor(dir / "raw_latent.cptn", a.raw_latent);
  save_tensor(dir / "projected_latent.cptn", a.projected_latent);
  std::ofstream os(dir / "attribution.txt");
  os << "concept=" << a.provenance.concept_name << '\n'
     << "layer=" << a.provenance.layer << '\n'
     << "init=" << to_string(a.provenance.init) << '\n'
     << "projection=" << to_string(a.provenance.projection) << '\n'
     << "vector_normalized=" << (a.provenance.projection == ProjectionMode::ChannelScale ? 1 : 0)
     << '\n'
     << "usage_ratio=" << a.usage_ratio << '\n'
     << "usage_ratio_l2=" << a.usage_ratio_l2 << '\n'
     << "usage_ratio_clamped=" << (a.clamped ? 1 : 0) << '\n';
  if (!os) throw IoError("failed writing " + (dir / "attribution.txt").string());
}

}  // namespace cprobe

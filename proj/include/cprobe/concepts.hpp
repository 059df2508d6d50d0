#pragma once

// Linear concept encodings in a chosen layer: CAV (hinge-loss linear
// classifier), pattern CAV and its simplified variant, and Net2Vec.

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

#include "json.hpp"

#include "cprobe/binary_io.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/model.hpp"
#include "cprobe/synth.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

enum class ConceptMethod : std::uint8_t { CAV = 0, PatCAV = 1, SPatCAV = 2, Net2Vec = 3 };

inline const char* to_string(ConceptMethod m) {
  switch (m) {
    case ConceptMethod::CAV: return "cav";
    case ConceptMethod::PatCAV: return "patcav";
    case ConceptMethod::SPatCAV: return "spatcav";
    case ConceptMethod::Net2Vec: return "net2vec";
  }
  return "?";
}

inline ConceptMethod parse_concept_method(const std::string& s) {
  if (s == "cav") return ConceptMethod::CAV;
  if (s == "patcav") return ConceptMethod::PatCAV;
  if (s == "spatcav") return ConceptMethod::SPatCAV;
  if (s == "net2vec") return ConceptMethod::Net2Vec;
  throw ConfigError("unknown concept method '" + s + "'");
}

/// Activation of one concept-dataset item at the concept layer.
struct ConceptSample {
  Tensor activation;  // [C,h,w]
  int label = 0;      // 1 = concept present
  std::optional<Tensor> mask;  // [H_img,W_img] binary, required by Net2Vec
};

struct ConceptMetadata {
  std::string concept_name;
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
  /// Held-out accuracy (CAV) or IoU (Net2Vec); NaN when not measured.
  double held_out_score = std::numeric_limits<double>::quiet_NaN();
  std::string score_kind = "none";
  bool precondition_warning = false;
  std::string warning;
};

inline nlohmann::json to_json(const ConceptMetadata& m) {
  nlohmann::json j = {{"concept", m.concept_name},
                      {"n_positive", m.n_positive},
                      {"n_negative", m.n_negative},
                      {"score_kind", m.score_kind},
                      {"precondition_warning", m.precondition_warning},
                      {"warning", m.warning}};
  j["held_out_score"] = std::isnan(m.held_out_score) ? nlohmann::json(nullptr)
                                                     : nlohmann::json(m.held_out_score);
  return j;
}

inline ConceptMetadata concept_metadata_from_json(const nlohmann::json& j) {
  ConceptMetadata m;
  m.concept_name = j.value("concept", "");
  m.n_positive = j.value("n_positive", std::size_t{0});
  m.n_negative = j.value("n_negative", std::size_t{0});
  m.score_kind = j.value("score_kind", "none");
  m.precondition_warning = j.value("precondition_warning", false);
  m.warning = j.value("warning", "");
  if (j.contains("held_out_score") && !j["held_out_score"].is_null()) {
    m.held_out_score = j["held_out_score"].get<double>();
  }
  return m;
}

/// Layer-anchored linear concept direction.
struct ConceptVector {
  std::string layer;
  Tensor v;  // [C]
  ConceptMethod method = ConceptMethod::CAV;
  float bias = 0.0f;  // CAV only
  ConceptMetadata meta;

  std::size_t channels() const { return v.size(); }

  /// Signed CAV decision value w.a + b for a channel vector `a`.
  double decision(std::span<const float> a) const {
    double acc = bias;
    for (std::size_t c = 0; c < v.size(); ++c) acc += static_cast<double>(v[c]) * a[c];
    return acc;
  }
};

// ---------------------------------------------------------------------------

namespace detail {

/// Channel means of a [C,h,w] (or [1,C,h,w]) activation.
inline std::vector<double> spatial_mean(const Tensor& act) {
  const std::size_t c = act.rank() == 4 ? act.dim(1) : act.dim(0);
  const std::size_t plane = act.size() / c;
  std::vector<double> out(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < plane; ++i) out[k] += act[k * plane + i];
    out[k] /= static_cast<double>(plane);
  }
  return out;
}

inline void require_both_labels(std::span<const ConceptSample> samples, std::size_t& pos,
                                std::size_t& neg) {
  pos = neg = 0;
  for (const auto& s : samples) {
    if (s.label != 0 && s.label != 1) throw DataError("concept labels must be 0 or 1");
    (s.label ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) {
    throw DataError("concept training needs samples with and without the concept");
  }
}

/// Stratified split into (train, held-out) index lists. Each class is
/// shuffled with a stream keyed by its first index rather than its label, so
/// swapping the labels leaves the partition unchanged.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    std::span<const ConceptSample> samples, double holdout_fraction, std::uint64_t seed) {
  std::vector<std::size_t> train, held;
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].label == label) idx.push_back(i);
    if (idx.empty()) continue;
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (idx.front() + 1)));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_held = static_cast<std::size_t>(std::lround(holdout_fraction * idx.size()));
    if (holdout_fraction > 0 && n_held == 0 && idx.size() >= 2) n_held = 1;
    n_held = std::min(n_held, idx.size() - 1);  // keep both classes in training
    held.insert(held.end(), idx.begin(), idx.begin() + static_cast<long>(n_held));
    train.insert(train.end(), idx.begin() + static_cast<long>(n_held), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());
  return {train, held};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CAV

struct CavOptions {
  double reg = 1e-3;
  int epochs = 1000;
  double lr = 1.0;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.25;
  /// Held-out accuracy below this attaches a precondition warning.
  double precondition = 0.85;
};

/// Soft-margin linear classifier on spatially averaged activations, solved
/// by full-batch subgradient descent on the regularised hinge loss. The
/// returned vector is the normal of the separating hyperplane.
inline ConceptVector train_cav(std::span<const ConceptSample> samples, const CavOptions& opts = {}) {
  ConceptVector out;
  out.method = ConceptMethod::CAV;
  detail::require_both_labels(samples, out.meta.n_positive, out.meta.n_negative);

  std::vector<std::vector<double>> x;
  for (const auto& s : samples) x.push_back(detail::spatial_mean(s.activation));
  const std::size_t dim = x.front().size();
  for (const auto& xi : x)
    if (xi.size() != dim) throw DataError("concept samples disagree on channel count");

  auto [train, held] = detail::stratified_split(samples, opts.holdout_fraction, opts.seed);

  // Features are centred and divided by one global scale (the root of the
  // total variance), which moves only b and rescales w. The objective is the
  // mean hinge loss plus 0.5*reg*|u|^2 in those coordinates, so reg does not
  // depend on the units of the layer. The strongly convex step schedule
  // lr/(1 + lr*reg*t) keeps the subgradient iteration converging.
  std::vector<double> mu(dim, 0.0);
  for (std::size_t i : train)
    for (std::size_t k = 0; k < dim; ++k) mu[k] += x[i][k] / train.size();
  double scale = 0.0;
  for (std::size_t i : train)
    for (std::size_t k = 0; k < dim; ++k) scale += (x[i][k] - mu[k]) * (x[i][k] - mu[k]) / train.size();
  scale = std::sqrt(scale);
  if (!(scale > 0)) scale = 1.0;
  const double lam = opts.reg;
  std::vector<std::vector<double>> z(x.size(), std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t k = 0; k < dim; ++k) z[i][k] = (x[i][k] - mu[k]) / scale;

  const double n = static_cast<double>(train.size());
  const auto objective = [&](const std::vector<double>& uu, double bb) {
    double hinge = 0.0, penalty = 0.0;
    for (double w : uu) penalty += w * w;
    for (std::size_t i : train) {
      const double t = samples[i].label ? 1.0 : -1.0;
      double m = bb;
      for (std::size_t k = 0; k < dim; ++k) m += uu[k] * z[i][k];
      hinge += std::max(0.0, 1.0 - t * m);
    }
    return 0.5 * lam * penalty + hinge / n;
  };

  std::vector<double> u(dim, 0.0), best_u = u, avg_u = u, gu(dim);
  double b = 0.0, best_b = 0.0, avg_b = 0.0, best_obj = objective(u, b);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t k = 0; k < dim; ++k) gu[k] = lam * u[k];
    double gb = 0.0;
    for (std::size_t i : train) {
      const double t = samples[i].label ? 1.0 : -1.0;
      double m = b;
      for (std::size_t k = 0; k < dim; ++k) m += u[k] * z[i][k];
      if (t * m < 1.0) {
        for (std::size_t k = 0; k < dim; ++k) gu[k] -= t * z[i][k] / n;
        gb -= t / n;
      }
    }
    const double step = opts.lr / (1.0 + opts.lr * lam * epoch);
    for (std::size_t k = 0; k < dim; ++k) u[k] -= step * gu[k];
    b -= step * gb;
    // Second half of the run is averaged; the subgradient iterates oscillate.
    const int start = opts.epochs / 2;
    if (epoch >= start) {
      const double c = 1.0 / (epoch - start + 1);
      for (std::size_t k = 0; k < dim; ++k) avg_u[k] += c * (u[k] - avg_u[k]);
      avg_b += c * (b - avg_b);
    }
    const double obj = objective(u, b);
    if (obj < best_obj) {
      best_obj = obj;
      best_u = u;
      best_b = b;
    }
  }
  if (opts.epochs > 0 && objective(avg_u, avg_b) < best_obj) {
    best_u = avg_u;
    best_b = avg_b;
  }

  std::vector<float> v(dim);
  double bias = best_b;
  for (std::size_t k = 0; k < dim; ++k) {
    const double wk = best_u[k] / scale;
    v[k] = static_cast<float>(wk);
    bias -= wk * mu[k];
  }
  out.v = Tensor::vector(std::move(v));
  out.bias = static_cast<float>(bias);

  if (!held.empty()) {
    std::size_t correct = 0;
    for (std::size_t i : held) {
      std::vector<float> xf(x[i].begin(), x[i].end());
      const bool predicted = out.decision(xf) > 0;
      correct += predicted == (samples[i].label == 1);
    }
    out.meta.held_out_score = static_cast<double>(correct) / held.size();
    out.meta.score_kind = "accuracy";
    if (out.meta.held_out_score < opts.precondition) {
      out.meta.precondition_warning = true;
      out.meta.warning = "PreconditionWarning: held-out accuracy " +
                         std::to_string(out.meta.held_out_score) + " below " +
                         std::to_string(opts.precondition);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pattern CAV

/// Covariance between channel-averaged activations and {0,1} labels. With
/// `simplified`, the unnormalised sum over (a - mean_a)(t - mean_t);
/// otherwise the covariance divided by the label variance.
inline ConceptVector train_patcav(std::span<const ConceptSample> samples, bool simplified) {
  ConceptVector out;
  out.method = simplified ? ConceptMethod::SPatCAV : ConceptMethod::PatCAV;
  if (samples.empty()) throw DataError("no concept samples");

  std::vector<std::vector<double>> x;
  for (const auto& s : samples) x.push_back(detail::spatial_mean(s.activation));
  const std::size_t dim = x.front().size();
  const double n = static_cast<double>(samples.size());

  std::vector<double> mean_a(dim, 0.0);
  double mean_t = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (x[i].size() != dim) throw DataError("concept samples disagree on channel count");
    for (std::size_t k = 0; k < dim; ++k) mean_a[k] += x[i][k] / n;
    mean_t += samples[i].label / n;
  }
  double var_t = 0.0;
  for (const auto& s : samples) var_t += (s.label - mean_t) * (s.label - mean_t) / n;
  if (!(var_t > 0)) throw DataError("pattern CAV needs non-zero label variance");
  detail::require_both_labels(samples, out.meta.n_positive, out.meta.n_negative);

  std::vector<double> w(dim, 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double dt = samples[i].label - mean_t;
    for (std::size_t k = 0; k < dim; ++k) w[k] += (x[i][k] - mean_a[k]) * dt;
  }
  if (!simplified) {
    for (double& wk : w) wk = wk / n / var_t;
  }
  out.v = Tensor::vector(std::vector<float>(w.begin(), w.end()));
  return out;
}

// ---------------------------------------------------------------------------
// Net2Vec

struct Net2VecOptions {
  /// Fraction of the highest activations kept per sample.
  double tau_quantile = 0.005;
  /// Keep the top fraction per channel instead of over all channels jointly.
  bool per_channel_threshold = false;
  /// Step size as a multiple of 1/L, L the curvature bound of the loss.
  double lr = 1.0;
  int epochs = 300;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.25;
};

/// Area-average `mask` [H,W] onto an h x w grid, then binarise at 0.5.
inline Tensor downsample_mask(const Tensor& mask, std::size_t h, std::size_t w) {
  if (mask.rank() != 2) throw ShapeError("mask must be [H,W]");
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  const double sy = static_cast<double>(H) / h, sx = static_cast<double>(W) / w;
  Tensor out({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double y0 = i * sy, y1 = (i + 1) * sy, x0 = j * sx, x1 = (j + 1) * sx;
      double acc = 0.0;
      for (std::size_t y = static_cast<std::size_t>(y0); y < std::min<double>(H, std::ceil(y1)); ++y) {
        const double oy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        if (oy <= 0) continue;
        for (std::size_t x = static_cast<std::size_t>(x0); x < std::min<double>(W, std::ceil(x1)); ++x) {
          const double ox = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          if (ox > 0) acc += oy * ox * mask[y * W + x];
        }
      }
      out[i * w + j] = acc / (sy * sx) >= 0.5 ? 1.0f : 0.0f;
    }
  return out;
}

/// Keeps the top `tau` fraction of values of a [C,h,w] activation (jointly
/// or per channel) and zeroes the rest.
inline Tensor threshold_top(const Tensor& act, double tau, bool per_channel) {
  const std::size_t c = act.dim(0);
  const std::size_t group = per_channel ? act.size() / c : act.size();
  Tensor out = act;
  for (std::size_t g0 = 0; g0 < act.size(); g0 += group) {
    std::vector<float> vals(act.data().begin() + g0, act.data().begin() + g0 + group);
    const std::size_t keep =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(tau * group)), 1, group);
    std::nth_element(vals.begin(), vals.begin() + (keep - 1), vals.end(), std::greater<>());
    const float cut = vals[keep - 1];
    for (std::size_t i = g0; i < g0 + group; ++i)
      if (out[i] < cut) out[i] = 0.0f;
  }
  return out;
}

/// Thresholded activations and layer-resolution masks for Net2Vec, with the
/// binary cross-entropy objective over all pixels.
class Net2VecProblem {
 public:
  Net2VecProblem(std::span<const ConceptSample> samples, const Net2VecOptions& opts) {
    if (samples.empty()) throw DataError("no concept samples");
    bool any_mask = false;
    for (const auto& s : samples) {
      if (!s.mask) throw DataError("Net2Vec needs a concept mask for every sample");
      Tensor act = s.activation.rank() == 4
                       ? s.activation.reshaped({s.activation.dim(1), s.activation.dim(2),
                                                s.activation.dim(3)})
                       : s.activation;
      if (act.rank() != 3) throw ShapeError("concept activation must be [C,h,w]");
      channels_ = act.dim(0);
      Tensor m = downsample_mask(*s.mask, act.dim(1), act.dim(2));
      for (float v : s.mask->data()) any_mask = any_mask || v > 0;
      acts_.push_back(threshold_top(act, opts.tau_quantile, opts.per_channel_threshold));
      masks_.push_back(std::move(m));
    }
    if (!any_mask) throw DataError("all concept masks are empty");
  }

  std::size_t size() const { return acts_.size(); }
  std::size_t channels() const { return channels_; }
  const Tensor& activation(std::size_t i) const { return acts_.at(i); }
  const Tensor& mask(std::size_t i) const { return masks_.at(i); }

  /// M(x, w) = sigmoid(sum_k w_k a^tau_k) per pixel, as [h,w].
  Tensor predict(std::size_t i, std::span<const double> w) const {
    const Tensor& a = acts_[i];
    const std::size_t plane = a.size() / channels_;
    Tensor out({a.dim(1), a.dim(2)});
    for (std::size_t p = 0; p < plane; ++p) {
      double z = 0.0;
      for (std::size_t k = 0; k < channels_; ++k) z += w[k] * a[k * plane + p];
      out[p] = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
    }
    return out;
  }

  /// Mean per-pixel BCE over `subset` and its gradient with respect to w.
  double loss_and_gradient(std::span<const std::size_t> subset, std::span<const double> w,
                           std::vector<double>* grad) const {
    if (grad) grad->assign(channels_, 0.0);
    double loss = 0.0;
    std::size_t pixels = 0;
    for (std::size_t i : subset) {
      const Tensor& a = acts_[i];
      const Tensor& y = masks_[i];
      const std::size_t plane = y.size();
      for (std::size_t p = 0; p < plane; ++p) {
        double z = 0.0;
        for (std::size_t k = 0; k < channels_; ++k) z += w[k] * a[k * plane + p];
        // log(1+e^z) - y*z, evaluated stably
        loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y[p] * z;
        if (grad) {
          const double r = 1.0 / (1.0 + std::exp(-z)) - y[p];
          for (std::size_t k = 0; k < channels_; ++k) (*grad)[k] += r * a[k * plane + p];
        }
      }
      pixels += plane;
    }
    if (grad)
      for (double& g : *grad) g /= static_cast<double>(pixels);
    return loss / static_cast<double>(pixels);
  }

  /// Pooled IoU of (M > 0.5) against the masks over `subset`; NaN if the
  /// union is empty.
  double iou(std::span<const std::size_t> subset, std::span<const double> w) const {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i : subset) {
      const Tensor m = predict(i, w);
      for (std::size_t p = 0; p < m.size(); ++p) {
        const bool pred = m[p] > 0.5f, truth = masks_[i][p] > 0.5f;
        inter += pred && truth;
        uni += pred || truth;
      }
    }
    return uni ? static_cast<double>(inter) / uni : std::numeric_limits<double>::quiet_NaN();
  }

  /// Upper bound on the curvature of the mean BCE: mean_p sum_k a_k^2 / 4.
  double curvature_bound(std::span<const std::size_t> subset) const {
    double acc = 0.0;
    std::size_t pixels = 0;
    for (std::size_t i : subset) {
      for (float v : acts_[i].data()) acc += static_cast<double>(v) * v;
      pixels += masks_[i].size();
    }
    return pixels ? 0.25 * acc / pixels : 0.0;
  }

 private:
  std::vector<Tensor> acts_;
  std::vector<Tensor> masks_;
  std::size_t channels_ = 0;
};

/// Weight vector whose sigmoid-combined thresholded activations reproduce
/// the concept masks, fitted by batch gradient descent on BCE from w = 0.
inline ConceptVector train_net2vec(std::span<const ConceptSample> samples,
                                   const Net2VecOptions& opts = {}) {
  const Net2VecProblem problem(samples, opts);
  ConceptVector out;
  out.method = ConceptMethod::Net2Vec;
  for (const auto& s : samples) (s.label ? out.meta.n_positive : out.meta.n_negative)++;

  // Net2Vec does not need both labels; split on whichever are present.
  std::vector<std::size_t> train, held;
  {
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(opts.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_held = static_cast<std::size_t>(std::lround(opts.holdout_fraction * idx.size()));
    n_held = std::min(n_held, idx.size() - 1);
    held.assign(idx.begin(), idx.begin() + static_cast<long>(n_held));
    train.assign(idx.begin() + static_cast<long>(n_held), idx.end());
  }

  std::vector<double> w(problem.channels(), 0.0), grad;
  const double curvature = problem.curvature_bound(train);
  const double step = curvature > 0 ? opts.lr / curvature : 0.0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    problem.loss_and_gradient(train, w, &grad);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= step * grad[k];
  }

  out.v = Tensor::vector(std::vector<float>(w.begin(), w.end()));
  out.meta.score_kind = "iou";
  out.meta.held_out_score = problem.iou(held.empty() ? std::span<const std::size_t>(train)
                                                     : std::span<const std::size_t>(held),
                                        w);
  return out;
}

// ---------------------------------------------------------------------------
// Activation collection

/// Image with concept annotations, as fed to collect_activations.
struct ConceptSource {
  Tensor image;  // [1,C,H,W] or [C,H,W]
  int label = 0;
  std::optional<Tensor> mask;
};

inline std::vector<ConceptSample> collect_activations(const ModelGraph& model,
                                                      const std::string& layer,
                                                      std::span<const ConceptSource> items) {
  const std::size_t idx = model.index_of(layer);
  const Shape4& in = model.input_shape();
  std::vector<ConceptSample> out;
  out.reserve(items.size());
  for (const auto& item : items) {
    const Tensor x = item.image.reshaped({1, in.channels, in.height, in.width});
    const ForwardResult fwd = forward(model, x);
    const Tensor& act = fwd.trace.records()[idx].output;
    out.push_back({act.reshaped({act.dim(1), act.dim(2), act.dim(3)}), item.label, item.mask});
  }
  return out;
}

inline std::vector<ConceptSample> collect_activations(const ModelGraph& model,
                                                      const std::string& layer,
                                                      const DatasetHandle& dataset) {
  (void)model.index_of(layer);
  std::vector<ConceptSource> items;
  items.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    items.push_back({dataset.image(i), dataset.entries[i].concept_label, dataset.mask(i)});
  }
  return collect_activations(model, layer, items);
}

// ---------------------------------------------------------------------------
// "CPCV" concept vector files: magic, u8 method, u16-prefixed layer name,
// f32 bias, CPTN record of v, then u32-prefixed UTF-8 JSON metadata.

inline void write_concept(std::ostream& os, const ConceptVector& cv) {
  bin::write_magic(os, "CPCV");
  bin::write_u8(os, static_cast<std::uint8_t>(cv.method));
  bin::write_short_string(os, cv.layer);
  bin::write_f32(os, cv.bias);
  write_tensor(os, cv.v);
  const std::string meta = to_json(cv.meta).dump();
  bin::write_u32(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
}

inline ConceptVector read_concept(std::istream& is) {
  bin::expect_magic(is, "CPCV");
  ConceptVector cv;
  const auto tag = bin::read_u8(is);
  if (tag > static_cast<std::uint8_t>(ConceptMethod::Net2Vec)) {
    throw IoError("unknown concept method tag " + std::to_string(tag));
  }
  cv.method = static_cast<ConceptMethod>(tag);
  cv.layer = bin::read_short_string(is);
  cv.bias = bin::read_f32(is);
  cv.v = read_tensor(is);
  std::string meta(bin::read_u32(is), '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta.size()));
  if (!is) throw IoError("truncated concept metadata");
  try {
    cv.meta = concept_metadata_from_json(nlohmann::json::parse(meta));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed concept metadata: ") + e.what());
  }
  return cv;
}

inline void save_concept(const std::filesystem::path& path, const ConceptVector& cv) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_concept(os, cv);
  if (!os) throw IoError("failed writing " + path.string());
}

inline ConceptVector load_concept(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_concept(is);
}

}  // namespace cprobe

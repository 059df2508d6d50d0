#pragma once

#include <fnmatch.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cprobe/detect.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/model.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

// ---------------------------------------------------------------------------
// Rules and composites.

struct LrpRule {
  enum class Kind { Epsilon, AlphaBeta, Pass };

  Kind kind = Kind::Pass;
  float eps = 1e-6f;
  float alpha = 1.0f;
  float beta = 0.0f;

  static LrpRule epsilon(float eps = 1e-6f) {
    if (!(eps > 0)) throw ConfigError("epsilon rule needs eps > 0");
    return {Kind::Epsilon, eps, 1.0f, 0.0f};
  }
  static LrpRule alpha_beta(float alpha = 1.0f, float beta = 0.0f) {
    if (std::abs(alpha - beta - 1.0f) > 1e-6f || beta < 0) {
      throw ConfigError("alpha-beta rule needs alpha - beta == 1 and beta >= 0");
    }
    return {Kind::AlphaBeta, 0.0f, alpha, beta};
  }
  static LrpRule pass() { return {}; }

  /// Parses "epsilon", "epsilon:1e-4", "alphabeta" or "alphabeta:2,1".
  static LrpRule parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string head = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    try {
      if (head == "epsilon") return epsilon(arg.empty() ? 1e-6f : std::stof(arg));
      if (head == "alphabeta") {
        if (arg.empty()) return alpha_beta();
        const auto comma = arg.find(',');
        if (comma == std::string::npos) throw ConfigError("alphabeta expects 'alpha,beta'");
        return alpha_beta(std::stof(arg.substr(0, comma)), std::stof(arg.substr(comma + 1)));
      }
      if (head == "pass") return pass();
    } catch (const std::logic_error&) {
      throw ConfigError("malformed rule argument in '" + text + "'");
    }
    throw ConfigError("unknown LRP rule '" + text + "'");
  }

  std::string str() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::Epsilon: os << "epsilon:" << eps; break;
      case Kind::AlphaBeta: os << "alphabeta:" << alpha << "," << beta; break;
      case Kind::Pass: os << "pass"; break;
    }
    return os.str();
  }
};

/// Ordered (layer-name glob -> rule) assignments. The first matching pattern
/// decides; every linear layer must be matched. Non-linear layers ignore the
/// composite (ReLU and Flatten pass relevance, MaxPool is winner-takes-all).
class Composite {
 public:
  Composite() = default;

  Composite& add(std::string pattern, LrpRule rule) {
    rules_.emplace_back(std::move(pattern), rule);
    return *this;
  }

  const std::vector<std::pair<std::string, LrpRule>>& rules() const noexcept { return rules_; }

  std::optional<LrpRule> match(const std::string& layer_name) const {
    for (const auto& [pattern, rule] : rules_) {
      if (fnmatch(pattern.c_str(), layer_name.c_str(), 0) == 0) return rule;
    }
    return std::nullopt;
  }

  LrpRule rule_for(const LayerSpec& layer) const {
    if (!is_linear(layer.kind)) return LrpRule::pass();
    auto rule = match(layer.name);
    if (!rule) throw ConfigError("no LRP rule matches layer '" + layer.name + "'");
    return *rule;
  }

  void check(const ModelGraph& model) const {
    for (const LayerSpec& l : model.layers()) (void)rule_for(l);
  }

  /// Epsilon on the detection head and dense layers, alpha1-beta0 on
  /// convolutions.
  static Composite default_for(const ModelGraph& model, float eps = 1e-6f) {
    Composite c;
    for (const LayerSpec& l : model.layers()) {
      if (l.kind == LayerKind::Conv) c.add(l.name, LrpRule::alpha_beta());
      if (l.kind == LayerKind::Dense || l.kind == LayerKind::DetectionHead) {
        c.add(l.name, LrpRule::epsilon(eps));
      }
    }
    return c;
  }

  /// Epsilon everywhere; used for conservation and linearity checks.
  static Composite uniform(LrpRule rule) { return Composite().add("*", rule); }

  /// Reads `rule.<glob>=<rule>` lines; blank lines and '#' comments skipped.
  static Composite parse(std::istream& is) {
    Composite c;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("composite line " + std::to_string(lineno) + ": expected key=value");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.rfind("rule.", 0) != 0 || key.size() == 5) {
        throw ConfigError("composite line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
      c.add(key.substr(5), LrpRule::parse(value));
    }
    return c;
  }

  static Composite load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open composite file " + path.string());
    return parse(is);
  }

 private:
  std::vector<std::pair<std::string, LrpRule>> rules_;
};

// ---------------------------------------------------------------------------
// Backward-pass initialisation.

enum class InitMode { FullOutput, ClassMask, SingleDetection };

struct InitTarget {
  InitMode mode = InitMode::FullOutput;
  Tensor tensor;  // shaped like the head logits, non-negative
};

namespace detail {

/// clip_min0(logits) / max, with the max taken over the whole clipped map.
inline Tensor clip_and_scale(const Tensor& logits) {
  Tensor t = elementwise(ElementwiseOp::ClipMin0, logits);
  float mx = 0.0f;
  for (float v : t.data()) mx = std::max(mx, v);
  if (mx > 0.0f) {
    for (float& v : t.data()) v /= mx;
  }
  return t;
}

}  // namespace detail

inline InitTarget init_full_output(const Tensor& logits) {
  return {InitMode::FullOutput, detail::clip_and_scale(logits)};
}

inline InitTarget init_class_mask(const Tensor& logits, const std::vector<std::size_t>& classes) {
  const Shape4 s = shape4(logits);
  Tensor t = detail::clip_and_scale(logits);
  std::vector<float> keep(s.channels, 0.0f);
  for (std::size_t k : classes) {
    if (k >= s.channels) throw IndexError("class " + std::to_string(k) + " outside head range");
    keep[k] = 1.0f;
  }
  return {InitMode::ClassMask, elementwise(ElementwiseOp::Mul, t, Tensor::vector(keep))};
}

inline InitTarget init_single_detection(const Tensor& logits, const Detection& det) {
  const Shape4 s = shape4(logits);
  if (s.batch != 1) throw ShapeError("single-detection targets need batch size 1");
  if (det.row >= s.height || det.col >= s.width) {
    throw IndexError("detection cell (" + std::to_string(det.row) + "," +
                     std::to_string(det.col) + ") outside the " + std::to_string(s.height) +
                     "x" + std::to_string(s.width) + " grid");
  }
  if (det.class_id >= s.channels) {
    throw IndexError("detection class " + std::to_string(det.class_id) + " outside head range");
  }
  Tensor t(logits.shape());
  t.at(0, det.class_id, det.row, det.col) = 1.0f;
  return {InitMode::SingleDetection, std::move(t)};
}

/// Dispatches on `mode`. ClassMask uses `classes`; SingleDetection needs
/// exactly one entry in `detections`.
inline InitTarget init_target(const Tensor& logits, InitMode mode,
                              const std::vector<std::size_t>& classes = {},
                              const std::vector<Detection>& detections = {}) {
  switch (mode) {
    case InitMode::FullOutput: return init_full_output(logits);
    case InitMode::ClassMask: return init_class_mask(logits, classes);
    case InitMode::SingleDetection:
      if (detections.size() != 1) {
        throw IndexError("single-detection target needs exactly one detection, got " +
                         std::to_string(detections.size()));
      }
      return init_single_detection(logits, detections.front());
  }
  throw ConfigError("unknown init mode");
}

// ---------------------------------------------------------------------------
// Relevance propagation.

struct RelevanceState {
  /// Relevance at each visited layer's output, keyed by layer name.
  std::map<std::string, Tensor> layers;
  /// Relevance at the model input; absent when propagation stopped early.
  std::optional<Tensor> input_attribution;
};

namespace detail {

inline Tensor positive_part(const Tensor& t) {
  Tensor o = t;
  for (float& v : o.data()) v = std::max(v, 0.0f);
  return o;
}

inline Tensor negative_part(const Tensor& t) {
  Tensor o = t;
  for (float& v : o.data()) v = std::min(v, 0.0f);
  return o;
}

inline Tensor lrp_epsilon(const LayerSpec& l, const LayerRecord& rec, const Tensor& relevance,
                          float eps) {
  const Shape4 in = shape4(rec.input);
  const Tensor kernel = l.kernel_for(in);
  // The recorded output is z_j including the bias.
  Tensor s = relevance;
  for (std::size_t j = 0; j < s.size(); ++j) {
    const double z = rec.output[j];
    const double denom = z + (z >= 0 ? eps : -eps);
    s[j] = static_cast<float>(relevance[j] / denom);
  }
  Tensor c = conv2d_backward_input(s, kernel, rec.input.shape(), l.conv_stride(), l.conv_pad());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= rec.input[i];
  return c;
}

/// Generic alpha-beta: positive contributions receive alpha * share, negative
/// contributions -beta * share. Positive and negative parts of the bias enter
/// the respective normalisers.
inline Tensor lrp_alpha_beta(const LayerSpec& l, const LayerRecord& rec, const Tensor& relevance,
                             float alpha, float beta) {
  const Shape4 in = shape4(rec.input);
  const Tensor kernel = l.kernel_for(in);
  const Tensor a_pos = positive_part(rec.input), a_neg = negative_part(rec.input);
  const Tensor w_pos = positive_part(kernel), w_neg = negative_part(kernel);
  const std::size_t stride = l.conv_stride(), pad = l.conv_pad();

  const auto distribute = [&](const Tensor& a1, const Tensor& w1, const Tensor& a2,
                              const Tensor& w2, const Tensor& bias_part) {
    const Tensor zero_bias(bias_part.shape());
    Tensor z = conv2d(a1, w1, bias_part, stride, pad);
    const Tensor z2 = conv2d(a2, w2, zero_bias, stride, pad);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += z2[j];
    Tensor s = relevance;
    for (std::size_t j = 0; j < s.size(); ++j) {
      s[j] = z[j] != 0.0f ? static_cast<float>(static_cast<double>(relevance[j]) / z[j]) : 0.0f;
    }
    Tensor r1 = conv2d_backward_input(s, w1, rec.input.shape(), stride, pad);
    const Tensor r2 = conv2d_backward_input(s, w2, rec.input.shape(), stride, pad);
    for (std::size_t i = 0; i < r1.size(); ++i) r1[i] = a1[i] * r1[i] + a2[i] * r2[i];
    return r1;
  };

  Tensor out = distribute(a_pos, w_pos, a_neg, w_neg, positive_part(l.bias));
  if (alpha != 1.0f) out = scaled(out, alpha);
  if (beta != 0.0f) {
    const Tensor neg = distribute(a_pos, w_neg, a_neg, w_pos, negative_part(l.bias));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= beta * neg[i];
  }
  return out;
}

inline Tensor lrp_maxpool(const LayerSpec& l, const LayerRecord& rec, const Tensor& relevance) {
  const auto winners = maxpool_argmax(rec.input, l.window, l.stride);
  Tensor out(rec.input.shape());
  for (std::size_t j = 0; j < winners.size(); ++j) out[winners[j]] += relevance[j];
  return out;
}

inline void check_trace(const ModelGraph& model, const ActivationTrace& trace) {
  for (std::size_t i = 0; i < model.size(); ++i) {
    const std::string& name = model.layer(i).name;
    if (i >= trace.size() || trace.records()[i].name != name) {
      throw TraceError("trace has no entry for layer '" + name + "'");
    }
  }
}

}  // namespace detail

/// Relevance at the input of layer `layer` given relevance at its output.
inline Tensor propagate_layer(const LayerSpec& layer, const LayerRecord& rec,
                              const LrpRule& rule, const Tensor& relevance) {
  if (relevance.shape() != rec.output.shape()) {
    throw ShapeError("relevance " + shape_str(relevance.shape()) + " does not match output of '" +
                     layer.name + "' " + shape_str(rec.output.shape()));
  }
  switch (layer.kind) {
    case LayerKind::Conv:
    case LayerKind::Dense:
    case LayerKind::DetectionHead:
      switch (rule.kind) {
        case LrpRule::Kind::Epsilon: return detail::lrp_epsilon(layer, rec, relevance, rule.eps);
        case LrpRule::Kind::AlphaBeta:
          return detail::lrp_alpha_beta(layer, rec, relevance, rule.alpha, rule.beta);
        case LrpRule::Kind::Pass:
          throw ConfigError("pass rule cannot be applied to linear layer '" + layer.name + "'");
      }
      break;
    case LayerKind::ReLU:
      return relevance;
    case LayerKind::Flatten:
      return relevance.reshaped(rec.input.shape());
    case LayerKind::MaxPool:
      return detail::lrp_maxpool(layer, rec, relevance);
    case LayerKind::BatchNorm:
      throw CanonizeError("relevance propagation needs a canonized model (found BatchNorm '" +
                          layer.name + "')");
  }
  throw ConfigError("unknown layer kind");
}

/// Propagates `relevance`, given at the output of layer `from`, towards the
/// input. If `stop` is set, propagation halts once the relevance at the
/// output of layer `stop` is known.
inline RelevanceState propagate(const ModelGraph& model, const ActivationTrace& trace,
                                const Composite& composite, Tensor relevance, std::size_t from,
                                std::optional<std::size_t> stop = std::nullopt) {
  detail::check_trace(model, trace);
  if (from >= model.size()) throw IndexError("start layer out of range");
  if (stop && *stop > from) throw IndexError("stop layer lies above the start layer");
  RelevanceState state;
  for (std::size_t i = from + 1; i-- > 0;) {
    const LayerSpec& l = model.layer(i);
    state.layers[l.name] = relevance;
    if (stop && *stop == i) return state;
    relevance = propagate_layer(l, trace.records()[i], composite.rule_for(l), relevance);
  }
  state.input_attribution = std::move(relevance);
  return state;
}

/// Full backward pass from the head, optionally halting at `stop_layer`.
inline RelevanceState backward(const ModelGraph& model, const ActivationTrace& trace,
                               const Composite& composite, const InitTarget& target,
                               const std::optional<std::string>& stop_layer = std::nullopt) {
  std::optional<std::size_t> stop;
  if (stop_layer) stop = model.index_of(*stop_layer);
  return propagate(model, trace, composite, target.tensor, model.size() - 1, stop);
}

/// Channel sum of the input attribution of batch item `sample`, as [H,W].
inline Tensor heatmap(const RelevanceState& state, std::size_t sample = 0) {
  if (!state.input_attribution) throw TraceError("relevance state has no input attribution");
  const Tensor& r = *state.input_attribution;
  const Shape4 s = shape4(r);
  if (sample >= s.batch) throw IndexError("sample index out of range");
  Tensor out({s.height, s.width});
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      double acc = 0.0;
      for (std::size_t c = 0; c < s.channels; ++c) acc += r.at(sample, c, y, x);
      out[y * s.width + x] = static_cast<float>(acc);
    }
  return out;
}

/// Writes one CPTN record per layer (file name = layer name) plus "input"
/// for the input attribution.
inline void export_relevance(const RelevanceState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, t] : state.layers) save_tensor(dir / name, t);
  if (state.input_attribution) save_tensor(dir / "input", *state.input_attribution);
}

}  // namespace cprobe

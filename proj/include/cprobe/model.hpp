#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "cprobe/binary_io.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

enum class LayerKind : std::uint8_t {
  Conv = 0,
  Dense = 1,
  ReLU = 2,
  MaxPool = 3,
  BatchNorm = 4,
  Flatten = 5,
  DetectionHead = 6,
};

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "Conv";
    case LayerKind::Dense: return "Dense";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool: return "MaxPool";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::DetectionHead: return "DetectionHead";
  }
  return "?";
}

/// Conv, Dense and DetectionHead carry weights and therefore LRP rules.
inline bool is_linear(LayerKind kind) {
  return kind == LayerKind::Conv || kind == LayerKind::Dense ||
         kind == LayerKind::DetectionHead;
}

/// One layer of a ModelGraph.
///
/// Parameter layout by kind:
///  - Conv / DetectionHead: weight [K,C,kh,kw], bias [K]; `stride`, `pad`.
///  - Dense: weight [out, C*H*W], bias [out]. The input is flattened and the
///    result is emitted as [N,out,1,1].
///  - MaxPool: square window `window` with step `stride`.
///  - BatchNorm: gamma, beta, running_mean, running_var [C] and `eps`.
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;

  std::uint32_t stride = 1;
  std::uint32_t pad = 0;
  std::uint32_t window = 2;

  Tensor weight;
  Tensor bias;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float eps = 1e-5f;

  static LayerSpec conv(std::string name, Tensor weight, Tensor bias,
                        std::uint32_t stride = 1, std::uint32_t pad = 0) {
    LayerSpec s;
    s.kind = LayerKind::Conv;
    s.name = std::move(name);
    s.weight = std::move(weight);
    s.bias = std::move(bias);
    s.stride = stride;
    s.pad = pad;
    return s;
  }

  static LayerSpec head(std::string name, Tensor weight, Tensor bias,
                        std::uint32_t stride = 1, std::uint32_t pad = 0) {
    LayerSpec s = conv(std::move(name), std::move(weight), std::move(bias), stride, pad);
    s.kind = LayerKind::DetectionHead;
    return s;
  }

  static LayerSpec dense(std::string name, Tensor weight, Tensor bias) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.name = std::move(name);
    s.weight = std::move(weight);
    s.bias = std::move(bias);
    return s;
  }

  static LayerSpec relu(std::string name) {
    LayerSpec s;
    s.kind = LayerKind::ReLU;
    s.name = std::move(name);
    return s;
  }

  static LayerSpec flatten(std::string name) {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    s.name = std::move(name);
    return s;
  }

  static LayerSpec maxpool(std::string name, std::uint32_t window, std::uint32_t stride) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.name = std::move(name);
    s.window = window;
    s.stride = stride;
    return s;
  }

  static LayerSpec batchnorm(std::string name, Tensor gamma, Tensor beta, Tensor mean,
                             Tensor var, float eps) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.name = std::move(name);
    s.gamma = std::move(gamma);
    s.beta = std::move(beta);
    s.running_mean = std::move(mean);
    s.running_var = std::move(var);
    s.eps = eps;
    return s;
  }

  /// Weight viewed as a convolution kernel [K,C,kh,kw] for an input of
  /// per-sample shape (C,H,W). Dense layers become a full-extent kernel.
  Tensor kernel_for(const Shape4& in) const {
    if (kind == LayerKind::Dense) {
      return weight.reshaped({weight.dim(0), in.channels, in.height, in.width});
    }
    return weight;
  }

  std::uint32_t conv_stride() const { return kind == LayerKind::Dense ? 1 : stride; }
  std::uint32_t conv_pad() const { return kind == LayerKind::Dense ? 0 : pad; }
};

namespace detail {

inline Shape4 maxpool_out(const Shape4& in, std::uint32_t window, std::uint32_t stride) {
  if (window < 1 || stride < 1) throw ShapeError("maxpool window and stride must be >= 1");
  return {in.batch, in.channels, conv_out_extent(in.height, window, stride, 0),
          conv_out_extent(in.width, window, stride, 0)};
}

/// Output shape of `layer` for input shape `in`; validates parameters.
inline Shape4 infer_output(const LayerSpec& layer, const Shape4& in) {
  const auto need_vec = [&](const Tensor& t, std::size_t n, const char* what) {
    if (t.rank() != 1 || t.dim(0) != n) {
      throw ShapeError("layer '" + layer.name + "': " + what + " must have shape [" +
                       std::to_string(n) + "], got " + shape_str(t.shape()));
    }
  };
  switch (layer.kind) {
    case LayerKind::Conv:
    case LayerKind::DetectionHead: {
      if (layer.weight.rank() != 4) throw ShapeError("layer '" + layer.name + "': weight must be rank 4");
      need_vec(layer.bias, layer.weight.dim(0), "bias");
      const ConvGeometry g = conv_geometry(in.to_shape(), layer.weight.shape(), layer.stride, layer.pad);
      return {in.batch, g.k, g.oh, g.ow};
    }
    case LayerKind::Dense: {
      if (layer.weight.rank() != 2 || layer.weight.dim(1) != in.per_sample()) {
        throw ShapeError("layer '" + layer.name + "': dense weight must have shape [out," +
                         std::to_string(in.per_sample()) + "], got " +
                         shape_str(layer.weight.shape()));
      }
      need_vec(layer.bias, layer.weight.dim(0), "bias");
      return {in.batch, layer.weight.dim(0), 1, 1};
    }
    case LayerKind::ReLU:
      return in;
    case LayerKind::MaxPool:
      return maxpool_out(in, layer.window, layer.stride);
    case LayerKind::BatchNorm:
      need_vec(layer.gamma, in.channels, "gamma");
      need_vec(layer.beta, in.channels, "beta");
      need_vec(layer.running_mean, in.channels, "running_mean");
      need_vec(layer.running_var, in.channels, "running_var");
      return in;
    case LayerKind::Flatten:
      return {in.batch, in.per_sample(), 1, 1};
  }
  throw ShapeError("unknown layer kind");
}

}  // namespace detail

/// Ordered layer list with a fixed per-sample input shape. Any layer name
/// may serve as the split point between the feature extractor and the rest
/// of the network.
class ModelGraph {
 public:
  ModelGraph() = default;

  /// `input` gives (channels, height, width); its batch field is ignored.
  ModelGraph(Shape4 input, std::vector<LayerSpec> layers)
      : input_(input), layers_(std::move(layers)) {
    input_.batch = 1;
    validate();
  }

  const Shape4& input_shape() const noexcept { return input_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::size_t size() const noexcept { return layers_.size(); }
  const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }

  /// Per-sample output shape of layer `i` (batch = 1).
  const Shape4& output_shape(std::size_t i) const { return out_shapes_.at(i); }
  const Shape4& input_shape_of(std::size_t i) const {
    return i == 0 ? input_ : out_shapes_.at(i - 1);
  }

  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw NameError("unknown layer '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t num_classes() const { return out_shapes_.back().channels; }
  std::size_t grid_height() const { return out_shapes_.back().height; }
  std::size_t grid_width() const { return out_shapes_.back().width; }

  /// Mutable parameter access for the trainer; shapes must be preserved.
  LayerSpec& mutable_layer(std::size_t i) { return layers_.at(i); }

 private:
  void validate() {
    if (layers_.empty()) throw ShapeError("model has no layers");
    if (input_.channels == 0 || input_.height == 0 || input_.width == 0) {
      throw ShapeError("model input extents must be >= 1");
    }
    index_.clear();
    out_shapes_.clear();
    Shape4 cur = input_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const LayerSpec& l = layers_[i];
      if (l.name.empty()) throw ShapeError("layer " + std::to_string(i) + " has no name");
      if (!index_.emplace(l.name, i).second) {
        throw ShapeError("duplicate layer name '" + l.name + "'");
      }
      const bool last = i + 1 == layers_.size();
      if ((l.kind == LayerKind::DetectionHead) != last) {
        throw ShapeError("model must contain exactly one DetectionHead, as its last layer");
      }
      cur = detail::infer_output(l, cur);
      out_shapes_.push_back(cur);
    }
  }

  Shape4 input_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape4> out_shapes_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Forward pass.

struct LayerRecord {
  std::string name;
  Tensor input;
  Tensor output;
};

/// Inputs and outputs of every layer for one forward pass.
class ActivationTrace {
 public:
  void push(LayerRecord record) {
    index_[record.name] = records_.size();
    records_.push_back(std::move(record));
  }

  const LayerRecord& at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw TraceError("trace has no entry for layer '" + name + "'");
    return records_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<LayerRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }

 private:
  std::vector<LayerRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ForwardResult {
  Tensor output;
  ActivationTrace trace;
};

namespace detail {

inline Tensor maxpool_forward(const Tensor& in, std::uint32_t window, std::uint32_t stride) {
  const Shape4 s = shape4(in);
  const Shape4 o = maxpool_out(s, window, stride);
  Tensor out(o.to_shape());
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t oy = 0; oy < o.height; ++oy)
        for (std::size_t ox = 0; ox < o.width; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          for (std::size_t ky = 0; ky < window; ++ky)
            for (std::size_t kx = 0; kx < window; ++kx)
              best = std::max(best, in.at(n, c, oy * stride + ky, ox * stride + kx));
          out.at(n, c, oy, ox) = best;
        }
  return out;
}

/// Flat input index of the winner of every pooling window; ties go to the
/// first element in row-major order.
inline std::vector<std::size_t> maxpool_argmax(const Tensor& in, std::uint32_t window,
                                               std::uint32_t stride) {
  const Shape4 s = shape4(in);
  const Shape4 o = maxpool_out(s, window, stride);
  std::vector<std::size_t> winners;
  winners.reserve(o.batch * o.per_sample());
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t oy = 0; oy < o.height; ++oy)
        for (std::size_t ox = 0; ox < o.width; ++ox) {
          std::size_t best_idx = 0;
          float best = -std::numeric_limits<float>::infinity();
          for (std::size_t ky = 0; ky < window; ++ky)
            for (std::size_t kx = 0; kx < window; ++kx) {
              const std::size_t y = oy * stride + ky;
              const std::size_t x = ox * stride + kx;
              const float v = in.at(n, c, y, x);
              if (v > best) {
                best = v;
                best_idx = ((n * s.channels + c) * s.height + y) * s.width + x;
              }
            }
          winners.push_back(best_idx);
        }
  return winners;
}

inline Tensor batchnorm_forward(const LayerSpec& l, const Tensor& in) {
  const Shape4 s = shape4(in);
  Tensor out = in;
  const std::size_t plane = s.height * s.width;
  for (std::size_t c = 0; c < s.channels; ++c) {
    const double scale = l.gamma[c] / std::sqrt(static_cast<double>(l.running_var[c]) + l.eps);
    const double shift = l.beta[c] - l.running_mean[c] * scale;
    for (std::size_t n = 0; n < s.batch; ++n) {
      float* p = out.data().data() + (n * s.channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>(p[i] * scale + shift);
    }
  }
  return out;
}

}  // namespace detail

/// Applies a single layer to a batch.
inline Tensor apply_layer(const LayerSpec& l, const Tensor& in) {
  const Shape4 s = shape4(in);
  switch (l.kind) {
    case LayerKind::Conv:
    case LayerKind::DetectionHead:
    case LayerKind::Dense:
      return conv2d(in, l.kernel_for(s), l.bias, l.conv_stride(), l.conv_pad());
    case LayerKind::ReLU:
      return elementwise(ElementwiseOp::Relu, in);
    case LayerKind::MaxPool:
      return detail::maxpool_forward(in, l.window, l.stride);
    case LayerKind::BatchNorm:
      return detail::batchnorm_forward(l, in);
    case LayerKind::Flatten:
      return in.reshaped({s.batch, s.per_sample(), 1, 1});
  }
  throw ShapeError("unknown layer kind");
}

/// Runs `x` [N,C,H,W] through the model, recording every layer.
inline ForwardResult forward(const ModelGraph& model, const Tensor& x) {
  const Shape4 s = shape4(x);
  const Shape4& expect = model.input_shape();
  if (s.channels != expect.channels || s.height != expect.height || s.width != expect.width) {
    throw ShapeError("input " + shape_str(x.shape()) + " does not match model input [N," +
                     std::to_string(expect.channels) + "," + std::to_string(expect.height) +
                     "," + std::to_string(expect.width) + "]");
  }
  ForwardResult result;
  Tensor cur = x;
  for (const LayerSpec& l : model.layers()) {
    Tensor next = apply_layer(l, cur);
    result.trace.push({l.name, std::move(cur), next});
    cur = std::move(next);
  }
  result.output = std::move(cur);
  return result;
}

// ---------------------------------------------------------------------------
// Canonization: fold inference-mode batch normalization into adjacent linear
// layers.

namespace detail {

inline std::vector<double> bn_scale(const LayerSpec& bn) {
  std::vector<double> scale(bn.gamma.size());
  for (std::size_t c = 0; c < scale.size(); ++c) {
    scale[c] = bn.gamma[c] / std::sqrt(static_cast<double>(bn.running_var[c]) + bn.eps);
  }
  return scale;
}

/// linear -> BN: w'[k] = w[k]*s_k, b'[k] = (b[k] - mean_k)*s_k + beta_k.
inline LayerSpec fold_bn_after(LayerSpec linear, const LayerSpec& bn) {
  const auto scale = bn_scale(bn);
  const std::size_t k_out = linear.weight.dim(0);
  const std::size_t per_k = linear.weight.size() / k_out;
  for (std::size_t k = 0; k < k_out; ++k) {
    for (std::size_t i = 0; i < per_k; ++i) {
      linear.weight[k * per_k + i] = static_cast<float>(linear.weight[k * per_k + i] * scale[k]);
    }
    linear.bias[k] = static_cast<float>((linear.bias[k] - bn.running_mean[k]) * scale[k] +
                                        bn.beta[k]);
  }
  return linear;
}

/// BN -> linear, valid only when the linear layer sees no zero padding:
/// w'[k,c] = w[k,c]*s_c, b'[k] = b[k] + sum_c w[k,c]*(beta_c - mean_c*s_c).
inline LayerSpec fold_bn_before(const LayerSpec& bn, LayerSpec linear, const Shape4& in) {
  if (linear.kind != LayerKind::Dense && linear.pad != 0) {
    throw CanonizeError("cannot fold BatchNorm '" + bn.name + "' into padded layer '" +
                        linear.name + "'");
  }
  const auto scale = bn_scale(bn);
  const Tensor kernel = linear.kernel_for(in);
  const std::size_t k_out = kernel.dim(0), c_in = kernel.dim(1);
  const std::size_t taps = kernel.dim(2) * kernel.dim(3);
  Tensor w = kernel;
  for (std::size_t k = 0; k < k_out; ++k) {
    double shift = 0.0;
    for (std::size_t c = 0; c < c_in; ++c) {
      const double offset = bn.beta[c] - bn.running_mean[c] * scale[c];
      for (std::size_t t = 0; t < taps; ++t) {
        float& wv = w[(k * c_in + c) * taps + t];
        shift += wv * offset;
        wv = static_cast<float>(wv * scale[c]);
      }
    }
    linear.bias[k] = static_cast<float>(linear.bias[k] + shift);
  }
  linear.weight = w.reshaped(linear.weight.shape());
  return linear;
}

}  // namespace detail

/// Returns an equivalent graph without BatchNorm layers. A BatchNorm is
/// folded into the preceding linear layer when there is one, otherwise into
/// the following one.
inline ModelGraph canonize(const ModelGraph& model) {
  std::vector<LayerSpec> out;
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.kind != LayerKind::BatchNorm) {
      out.push_back(l);
      continue;
    }
    if (!out.empty() && is_linear(out.back().kind)) {
      out.back() = detail::fold_bn_after(out.back(), l);
      continue;
    }
    if (i + 1 < layers.size() && is_linear(layers[i + 1].kind)) {
      out.push_back(detail::fold_bn_before(l, layers[i + 1], model.input_shape_of(i)));
      ++i;
      continue;
    }
    throw CanonizeError("BatchNorm '" + l.name + "' is not adjacent to a linear layer");
  }
  return ModelGraph(model.input_shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// "CPMD" model files.
//
// magic "CPMD", u16 layer count, then per layer: u8 kind, u16-prefixed name,
// u8 hyperparameter count + that many u32 (stride, pad, window), u8 parameter
// count + that many CPTN records. The per-sample input shape (C,H,W) follows
// as three u32 after the last layer.

inline void write_model(std::ostream& os, const ModelGraph& model) {
  bin::write_magic(os, "CPMD");
  bin::write_u16(os, static_cast<std::uint16_t>(model.size()));
  for (const LayerSpec& l : model.layers()) {
    bin::write_u8(os, static_cast<std::uint8_t>(l.kind));
    bin::write_short_string(os, l.name);
    bin::write_u8(os, 3);
    bin::write_u32(os, l.stride);
    bin::write_u32(os, l.pad);
    bin::write_u32(os, l.window);
    std::vector<const Tensor*> params;
    if (is_linear(l.kind)) params = {&l.weight, &l.bias};
    if (l.kind == LayerKind::BatchNorm) {
      params = {&l.gamma, &l.beta, &l.running_mean, &l.running_var};
    }
    Tensor eps_holder = Tensor::vector({l.eps});
    if (l.kind == LayerKind::BatchNorm) params.push_back(&eps_holder);
    bin::write_u8(os, static_cast<std::uint8_t>(params.size()));
    for (const Tensor* p : params) write_tensor(os, *p);
  }
  const Shape4& in = model.input_shape();
  bin::write_u32(os, static_cast<std::uint32_t>(in.channels));
  bin::write_u32(os, static_cast<std::uint32_t>(in.height));
  bin::write_u32(os, static_cast<std::uint32_t>(in.width));
}

inline ModelGraph read_model(std::istream& is) {
  bin::expect_magic(is, "CPMD");
  const std::size_t count = bin::read_u16(is);
  std::vector<LayerSpec> layers(count);
  for (LayerSpec& l : layers) {
    const auto tag = bin::read_u8(is);
    if (tag > static_cast<std::uint8_t>(LayerKind::DetectionHead)) {
      throw IoError("unknown layer kind tag " + std::to_string(tag));
    }
    l.kind = static_cast<LayerKind>(tag);
    l.name = bin::read_short_string(is);
    const std::size_t hyper = bin::read_u8(is);
    std::vector<std::uint32_t> hp(hyper);
    for (auto& h : hp) h = bin::read_u32(is);
    if (hyper > 0) l.stride = hp[0];
    if (hyper > 1) l.pad = hp[1];
    if (hyper > 2) l.window = hp[2];
    const std::size_t nparams = bin::read_u8(is);
    std::vector<Tensor> params;
    for (std::size_t p = 0; p < nparams; ++p) params.push_back(read_tensor(is));
    if (is_linear(l.kind)) {
      if (params.size() != 2) throw IoError("layer '" + l.name + "' needs weight and bias");
      l.weight = std::move(params[0]);
      l.bias = std::move(params[1]);
    } else if (l.kind == LayerKind::BatchNorm) {
      if (params.size() != 5) throw IoError("BatchNorm '" + l.name + "' needs 5 parameters");
      l.gamma = std::move(params[0]);
      l.beta = std::move(params[1]);
      l.running_mean = std::move(params[2]);
      l.running_var = std::move(params[3]);
      l.eps = params[4][0];
    } else if (!params.empty()) {
      throw IoError("layer '" + l.name + "' of kind " + to_string(l.kind) +
                    " takes no parameters");
    }
  }
  Shape4 in;
  in.batch = 1;
  in.channels = bin::read_u32(is);
  in.height = bin::read_u32(is);
  in.width = bin::read_u32(is);
  return ModelGraph(in, std::move(layers));
}

inline void save_model(const std::filesystem::path& path, const ModelGraph& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_model(os, model);
  if (!os) throw IoError("failed writing " + path.string());
}

inline ModelGraph load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_model(is);
}

}  // namespace cprobe

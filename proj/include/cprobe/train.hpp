#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "cprobe/errors.hpp"
#include "cprobe/model.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

/// One training image with a class label per grid cell (row-major).
struct TrainingExample {
  Tensor image;  // [C,H,W] or [1,C,H,W]
  std::vector<int> cell_labels;
};

struct TrainOptions {
  int epochs = 10;
  float lr = 0.05f;
  float momentum = 0.9f;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  /// Optional per-class loss weight; empty means uniform.
  std::vector<float> class_weights;
};

struct TrainResult {
  ModelGraph model;
  double initial_loss = 0.0;
  /// Mean minibatch loss of every epoch.
  std::vector<double> epoch_losses;
};

namespace detail {

inline Tensor stack_images(std::span<const TrainingExample> data,
                           const std::vector<std::size_t>& order, std::size_t begin,
                           std::size_t end, const Shape4& input) {
  const std::size_t per = input.per_sample();
  std::vector<float> buf;
  buf.reserve((end - begin) * per);
  for (std::size_t i = begin; i < end; ++i) {
    const Tensor& img = data[order[i]].image;
    if (img.size() != per) {
      throw ShapeError("training image " + shape_str(img.shape()) + " does not match model input");
    }
    buf.insert(buf.end(), img.data().begin(), img.data().end());
  }
  return Tensor({end - begin, input.channels, input.height, input.width}, std::move(buf));
}

/// Weighted per-cell softmax cross-entropy; returns the loss and writes the
/// gradient with respect to the logits.
inline double cell_cross_entropy(const Tensor& logits, std::span<const TrainingExample> data,
                                 const std::vector<std::size_t>& order, std::size_t begin,
                                 const std::vector<float>& class_weights, Tensor* grad) {
  const Shape4 s = shape4(logits);
  const std::size_t cells = s.height * s.width;
  if (grad) *grad = Tensor(logits.shape());
  double loss = 0.0, weight_total = 0.0;
  std::vector<double> p(s.channels);
  for (std::size_t n = 0; n < s.batch; ++n) {
    const auto& labels = data[order[begin + n]].cell_labels;
    if (labels.size() != cells) throw ShapeError("cell label count does not match model grid");
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        const int label = labels[y * s.width + x];
        if (label < 0 || static_cast<std::size_t>(label) >= s.channels) {
          throw DataError("cell label " + std::to_string(label) + " outside class range");
        }
        const double w = class_weights.empty() ? 1.0 : class_weights.at(label);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < s.channels; ++k) mx = std::max<double>(mx, logits.at(n, k, y, x));
        double z = 0.0;
        for (std::size_t k = 0; k < s.channels; ++k) {
          p[k] = std::exp(logits.at(n, k, y, x) - mx);
          z += p[k];
        }
        for (double& v : p) v /= z;
        loss += -w * std::log(std::max(p[label], 1e-30));
        weight_total += w;
        if (grad) {
          for (std::size_t k = 0; k < s.channels; ++k) {
            grad->at(n, k, y, x) = static_cast<float>(w * (p[k] - (k == static_cast<std::size_t>(label))));
          }
        }
      }
  }
  if (weight_total <= 0) return 0.0;
  if (grad) {
    for (float& g : grad->data()) g = static_cast<float>(g / weight_total);
  }
  return loss / weight_total;
}

struct LayerGrads {
  Tensor weight;
  Tensor bias;
};

/// Backpropagates `grad` through the traced forward pass, filling parameter
/// gradients for the linear layers. BatchNorm acts as a frozen affine map.
inline std::vector<LayerGrads> backprop(const ModelGraph& model, const ActivationTrace& trace,
                                        Tensor grad) {
  std::vector<LayerGrads> grads(model.size());
  for (std::size_t i = model.size(); i-- > 0;) {
    const LayerSpec& l = model.layer(i);
    const LayerRecord& rec = trace.records()[i];
    const Shape4 in = shape4(rec.input);
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Dense:
      case LayerKind::DetectionHead: {
        const Tensor kernel = l.kernel_for(in);
        grads[i].weight = conv2d_backward_kernel(rec.input, grad, kernel.shape(), l.conv_stride(),
                                                 l.conv_pad())
                              .reshaped(l.weight.shape());
        grads[i].bias = reduce(ReduceOp::Sum, grad, {0, 2, 3});
        if (i > 0) {
          grad = conv2d_backward_input(grad, kernel, rec.input.shape(), l.conv_stride(),
                                       l.conv_pad());
        }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t j = 0; j < grad.size(); ++j)
          if (!(rec.input[j] > 0.0f)) grad[j] = 0.0f;
        break;
      case LayerKind::MaxPool: {
        const auto winners = maxpool_argmax(rec.input, l.window, l.stride);
        Tensor g(rec.input.shape());
        for (std::size_t j = 0; j < winners.size(); ++j) g[winners[j]] += grad[j];
        grad = std::move(g);
        break;
      }
      case LayerKind::BatchNorm: {
        const std::size_t plane = in.height * in.width;
        for (std::size_t n = 0; n < in.batch; ++n)
          for (std::size_t c = 0; c < in.channels; ++c) {
            const double scale = l.gamma[c] / std::sqrt(static_cast<double>(l.running_var[c]) + l.eps);
            float* p = grad.data().data() + (n * in.channels + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) p[j] = static_cast<float>(p[j] * scale);
          }
        break;
      }
      case LayerKind::Flatten:
        grad = grad.reshaped(rec.input.shape());
        break;
    }
  }
  return grads;
}

}  // namespace detail

/// Mean per-cell cross-entropy of `model` over `data`.
inline double evaluate_loss(const ModelGraph& model, std::span<const TrainingExample> data,
                            const std::vector<float>& class_weights = {},
                            std::size_t batch_size = 32) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    const Tensor x = detail::stack_images(data, order, b, e, model.input_shape());
    const Tensor logits = forward(model, x).output;
    total += detail::cell_cross_entropy(logits, data, order, b, class_weights, nullptr) * (e - b);
  }
  return data.empty() ? 0.0 : total / data.size();
}

/// Fraction of grid cells whose argmax class matches the label.
inline double cell_accuracy(const ModelGraph& model, std::span<const TrainingExample> data) {
  std::size_t correct = 0, total = 0;
  for (const TrainingExample& ex : data) {
    const Tensor x = ex.image.reshaped({1, model.input_shape().channels,
                                        model.input_shape().height, model.input_shape().width});
    const Tensor logits = forward(model, x).output;
    const Shape4 s = shape4(logits);
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t xx = 0; xx < s.width; ++xx) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < s.channels; ++k)
          if (logits.at(0, k, y, xx) > logits.at(0, best, y, xx)) best = k;
        correct += static_cast<int>(best) == ex.cell_labels[y * s.width + xx];
        ++total;
      }
  }
  return total ? static_cast<double>(correct) / total : 0.0;
}

/// Minibatch SGD with momentum on per-cell softmax cross-entropy.
/// Deterministic for a given seed.
inline TrainResult train(const ModelGraph& model, std::span<const TrainingExample> data,
                         const TrainOptions& opts) {
  if (data.empty()) throw DataError("training set is empty");
  if (opts.batch_size == 0) throw TrainError("batch size must be >= 1");

  TrainResult result{model, evaluate_loss(model, data, opts.class_weights), {}};
  if (!std::isfinite(result.initial_loss)) throw TrainError("initial loss is not finite");

  ModelGraph& m = result.model;
  std::vector<detail::LayerGrads> velocity(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (is_linear(m.layer(i).kind)) {
      velocity[i] = {Tensor(m.layer(i).weight.shape()), Tensor(m.layer(i).bias.shape())};
    }
  }

  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < data.size(); b += opts.batch_size) {
      const std::size_t e = std::min(data.size(), b + opts.batch_size);
      const Tensor x = detail::stack_images(data, order, b, e, m.input_shape());
      ForwardResult fwd = forward(m, x);
      Tensor grad;
      const double loss =
          detail::cell_cross_entropy(fwd.output, data, order, b, opts.class_weights, &grad);
      if (!std::isfinite(loss)) {
        throw TrainError("loss diverged in epoch " + std::to_string(epoch + 1));
      }
      epoch_loss += loss * (e - b);
      const auto grads = detail::backprop(m, fwd.trace, std::move(grad));
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (!is_linear(m.layer(i).kind)) continue;
        LayerSpec& l = m.mutable_layer(i);
        const auto step = [&](Tensor& param, Tensor& vel, const Tensor& g) {
          for (std::size_t j = 0; j < param.size(); ++j) {
            vel[j] = opts.momentum * vel[j] + g[j];
            param[j] -= opts.lr * vel[j];
          }
        };
        step(l.weight, velocity[i].weight, grads[i].weight);
        step(l.bias, velocity[i].bias, grads[i].bias);
        for (float v : l.weight.data())
          if (!std::isfinite(v)) throw TrainError("parameters of '" + l.name + "' diverged in epoch " + std::to_string(epoch + 1));
      }
    }
    epoch_loss /= data.size();
    if (!std::isfinite(epoch_loss)) {
      throw TrainError("loss diverged in epoch " + std::to_string(epoch + 1));
    }
    result.epoch_losses.push_back(epoch_loss);
  }
  return result;
}

}  // namespace cprobe

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "cprobe/model.hpp"

namespace cprobe {

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

/// Small grid detector: three conv/relu/pool stages (8, 16, 16 channels)
/// and a 1x1 head. The grid is the input size divided by 8.
inline ModelGraph standard_detector(std::size_t channels, std::size_t height, std::size_t width,
                                    std::size_t num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto conv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                        std::uint32_t pad) {
    return LayerSpec::conv(name, detail::he_normal({out, in, k, k}, in * k * k, rng),
                           Tensor({out}), 1, pad);
  };
  std::vector<LayerSpec> layers;
  layers.push_back(conv("feat.0", channels, 8, 3, 1));
  layers.push_back(LayerSpec::relu("feat.1"));
  layers.push_back(LayerSpec::maxpool("feat.2", 2, 2));
  layers.push_back(conv("feat.3", 8, 16, 3, 1));
  layers.push_back(LayerSpec::relu("feat.4"));
  layers.push_back(LayerSpec::maxpool("feat.5", 2, 2));
  layers.push_back(conv("feat.6", 16, 16, 3, 1));
  layers.push_back(LayerSpec::relu("feat.7"));
  layers.push_back(LayerSpec::maxpool("feat.8", 2, 2));
  layers.push_back(LayerSpec::head("head", detail::he_normal({num_classes, 16, 1, 1}, 16, rng),
                                   Tensor({num_classes})));
  return ModelGraph(Shape4{1, channels, height, width}, std::move(layers));
}

}  // namespace cprobe

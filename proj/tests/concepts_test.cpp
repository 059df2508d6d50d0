#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "cprobe/concepts.hpp"
#include "cprobe/zoo.hpp"
#include "support/oracles.hpp"

using namespace cprobe;

namespace {

// Channel 0 carries the label (+1 / -1), the other channels are zero.
std::vector<ConceptSample> separable(size_t per_class) {
  std::vector<ConceptSample> out;
  for (size_t i = 0; i < 2 * per_class; ++i) {
    const int label = i % 2;
    Tensor a({3, 2, 2});
    for (size_t p = 0; p < 4; ++p) a[p] = label ? 1.0f : -1.0f;
    out.push_back({a, label, std::nullopt});
  }
  return out;
}

std::vector<ConceptSample> random_labelled(size_t n, std::mt19937_64& rng) {
  std::vector<ConceptSample> out;
  for (size_t i = 0; i < n; ++i) {
    out.push_back({oracle::random_tensor({4, 3, 3}, rng), int(i % 3 == 0), std::nullopt});
  }
  return out;
}

std::vector<double> as_double(const Tensor& t) { return oracle::to_double(t); }

// Planted Net2Vec data: channel 1 is exactly 2 on the (downsampled) concept
// mask and 0 elsewhere; channels 0 and 2 are noise in [0, 0.5).
std::vector<ConceptSample> planted_masks(size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pos(0, 5), len(1, 3);
  std::vector<ConceptSample> out;
  for (size_t i = 0; i < n; ++i) {
    Tensor act = oracle::random_tensor({3, 8, 8}, rng, 0.0f, 0.5f);
    Tensor mask({16, 16});
    const int y0 = pos(rng), x0 = pos(rng), h = len(rng), w = len(rng);
    for (size_t y = 0; y < 8; ++y)
      for (size_t x = 0; x < 8; ++x) {
        const bool on = int(y) >= y0 && int(y) < y0 + h && int(x) >= x0 && int(x) < x0 + w;
        act[64 + y * 8 + x] = on ? 2.0f : 0.0f;
        for (size_t dy = 0; dy < 2; ++dy)
          for (size_t dx = 0; dx < 2; ++dx) mask[(2 * y + dy) * 16 + 2 * x + dx] = on ? 1.0f : 0.0f;
      }
    out.push_back({act, 1, mask});
  }
  return out;
}

}  // namespace

TEST(Cav, SeparableDataGivesAxisDirection) {
  const auto samples = separable(20);
  const ConceptVector cv = train_cav(samples);
  EXPECT_GT(oracle::cosine(as_double(cv.v), {1, 0, 0}), 0.99);
  EXPECT_DOUBLE_EQ(cv.meta.held_out_score, 1.0);
  EXPECT_EQ(cv.meta.score_kind, "accuracy");
  EXPECT_FALSE(cv.meta.precondition_warning);
  EXPECT_EQ(cv.meta.n_positive, 20u);
  EXPECT_EQ(cv.meta.n_negative, 20u);
  EXPECT_EQ(cv.method, ConceptMethod::CAV);
}

TEST(Cav, LabelFlipNegates) {
  std::mt19937_64 rng(3);
  auto samples = random_labelled(60, rng);
  for (auto& s : samples)
    for (size_t p = 0; p < 9; ++p) s.activation[p] += s.label ? 1.5f : -1.5f;
  const ConceptVector a = train_cav(samples);
  for (auto& s : samples) s.label = 1 - s.label;
  const ConceptVector b = train_cav(samples);
  auto neg = as_double(a.v);
  for (double& v : neg) v = -v;
  EXPECT_GT(oracle::cosine(as_double(b.v), neg), 0.99);
}

TEST(Cav, OverlappingClassesTriggerWarning) {
  std::vector<ConceptSample> samples;
  for (int i = 0; i < 40; ++i) samples.push_back({Tensor({2, 1, 1}, 0.7f), i % 2, std::nullopt});
  const ConceptVector cv = train_cav(samples);
  EXPECT_NEAR(cv.meta.held_out_score, 0.5, 0.1);
  EXPECT_TRUE(cv.meta.precondition_warning);
  EXPECT_FALSE(cv.meta.warning.empty());
}

TEST(Cav, DecisionSignIsScaleInvariant) {
  std::mt19937_64 rng(5);
  auto samples = random_labelled(45, rng);
  for (auto& s : samples) s.activation[9] += s.label ? 0.8f : -0.8f;
  const ConceptVector cv = train_cav(samples);
  for (float c : {0.01f, 3.0f, 1e4f}) {
    ConceptVector scaled_cv = cv;
    scaled_cv.v = scaled(cv.v, c);
    scaled_cv.bias = cv.bias * c;
    for (const auto& s : samples) {
      const auto mean = detail::spatial_mean(s.activation);
      const std::vector<float> a(mean.begin(), mean.end());
      EXPECT_EQ(cv.decision(a) > 0, scaled_cv.decision(a) > 0);
    }
  }
}

TEST(Cav, Errors) {
  std::vector<ConceptSample> one_class{{Tensor({2, 1, 1}, 1.0f), 1, std::nullopt},
                                       {Tensor({2, 1, 1}, 2.0f), 1, std::nullopt}};
  EXPECT_THROW(train_cav(one_class), DataError);
  EXPECT_THROW(train_patcav(one_class, true), DataError);
  EXPECT_THROW(train_cav(std::vector<ConceptSample>{}), DataError);
}

TEST(PatCav, TwoPointFixture) {
  const std::vector<ConceptSample> s{{Tensor({2, 1, 1}, std::vector<float>{3, 1}), 1, std::nullopt},
                                     {Tensor({2, 1, 1}, std::vector<float>{1, 1}), 0, std::nullopt}};
  const ConceptVector spat = train_patcav(s, true);
  EXPECT_FLOAT_EQ(spat.v[0], 1.0f);
  EXPECT_FLOAT_EQ(spat.v[1], 0.0f);
  EXPECT_EQ(spat.method, ConceptMethod::SPatCAV);
  // n = 2, label variance 1/4
  const ConceptVector pat = train_patcav(s, false);
  EXPECT_FLOAT_EQ(pat.v[0], 2.0f);
  EXPECT_FLOAT_EQ(pat.v[1], 0.0f);
  EXPECT_EQ(pat.method, ConceptMethod::PatCAV);
}

TEST(PatCav, ConstantChannelIsZero) {
  std::mt19937_64 rng(7);
  auto samples = random_labelled(30, rng);
  for (auto& s : samples)
    for (size_t p = 0; p < 9; ++p) s.activation[2 * 9 + p] = 0.25f;
  for (bool simplified : {true, false}) EXPECT_NEAR(train_patcav(samples, simplified).v[2], 0.0f, 1e-7);
}

TEST(PatCav, ParallelToMeanDifference) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto samples = random_labelled(25 + trial, rng);
    const auto spat = as_double(train_patcav(samples, true).v);
    const auto pat = as_double(train_patcav(samples, false).v);
    EXPECT_GT(oracle::cosine(pat, spat), 0.999);

    std::vector<double> m1(4, 0.0), m0(4, 0.0);
    double n1 = 0, n0 = 0;
    for (const auto& s : samples) {
      auto& m = s.label ? m1 : m0;
      (s.label ? n1 : n0) += 1;
      for (size_t k = 0; k < 4; ++k)
        for (size_t p = 0; p < 9; ++p) m[k] += s.activation[k * 9 + p] / 9.0;
    }
    std::vector<double> diff(4);
    for (size_t k = 0; k < 4; ++k) diff[k] = m1[k] / n1 - m0[k] / n0;
    EXPECT_GT(oracle::cosine(spat, diff), 0.999);
  }
}

TEST(Net2Vec, ZeroWeightsPredictHalf) {
  const auto samples = planted_masks(4, 1);
  const Net2VecProblem problem(samples, {});
  const std::vector<double> w(3, 0.0);
  for (size_t i = 0; i < problem.size(); ++i) {
    const Tensor m = problem.predict(i, w);
    for (float v : m.data()) EXPECT_FLOAT_EQ(v, 0.5f);
  }
  const std::vector<size_t> all{0, 1, 2, 3};
  EXPECT_NEAR(problem.loss_and_gradient(all, w, nullptr), std::log(2.0), 1e-12);
}

TEST(Net2Vec, GradientMatchesFiniteDifferences) {
  const auto samples = planted_masks(6, 2);
  Net2VecOptions o;
  o.tau_quantile = 0.2;
  const Net2VecProblem problem(samples, o);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int probe = 0; probe < 5; ++probe) {
    const std::vector<double> w{u(rng), u(rng), u(rng)};
    const std::vector<size_t> subset{size_t(probe)};
    std::vector<double> g;
    problem.loss_and_gradient(subset, w, &g);
    for (size_t k = 0; k < 3; ++k) {
      auto wp = w, wm = w;
      const double h = 1e-5;
      wp[k] += h;
      wm[k] -= h;
      const double numeric =
          (problem.loss_and_gradient(subset, wp, nullptr) - problem.loss_and_gradient(subset, wm, nullptr)) / (2 * h);
      EXPECT_NEAR(g[k], numeric, 1e-4 * std::max(std::abs(numeric), 1e-3));
    }
  }
}

TEST(Net2Vec, RecoversPlantedChannel) {
  const auto samples = planted_masks(40, 5);
  Net2VecOptions o;
  o.tau_quantile = 0.1;
  const ConceptVector cv = train_net2vec(samples, o);
  EXPECT_EQ(cv.method, ConceptMethod::Net2Vec);
  EXPECT_GT(cv.v[1], cv.v[0]);
  EXPECT_GT(cv.v[1], cv.v[2]);
  EXPECT_EQ(cv.meta.score_kind, "iou");
  EXPECT_GE(cv.meta.held_out_score, 0.9);

  const Net2VecProblem problem(samples, o);
  const std::vector<size_t> all = [&] {
    std::vector<size_t> v(samples.size());
    std::iota(v.begin(), v.end(), 0);
    return v;
  }();
  const auto w = as_double(cv.v);
  EXPECT_LT(problem.loss_and_gradient(all, w, nullptr), std::log(2.0));
}

TEST(Net2Vec, Thresholding) {
  const Tensor a({2, 1, 2}, std::vector<float>{4, 1, 3, 2});
  EXPECT_EQ(threshold_top(a, 0.5, false), Tensor({2, 1, 2}, std::vector<float>{4, 0, 3, 0}));
  EXPECT_EQ(threshold_top(a, 0.5, true), Tensor({2, 1, 2}, std::vector<float>{4, 0, 3, 0}));
  EXPECT_EQ(threshold_top(a, 0.25, false), Tensor({2, 1, 2}, std::vector<float>{4, 0, 0, 0}));
  // a tiny quantile still keeps the single largest value
  EXPECT_EQ(threshold_top(a, 0.001, false), Tensor({2, 1, 2}, std::vector<float>{4, 0, 0, 0}));

  Tensor m({4, 4});
  m[0] = m[1] = m[4] = 1.0f;  // 3 of the top-left 2x2 block
  m[15] = 1.0f;               // 1 of the bottom-right block
  EXPECT_EQ(downsample_mask(m, 2, 2), Tensor({2, 2}, std::vector<float>{1, 0, 0, 0}));
}

TEST(Net2Vec, Errors) {
  auto samples = planted_masks(3, 1);
  for (auto& s : samples) s.mask = Tensor({16, 16});
  EXPECT_THROW(train_net2vec(samples), DataError);
  samples = planted_masks(3, 1);
  samples[1].mask.reset();
  EXPECT_THROW(train_net2vec(samples), DataError);
}

TEST(Trainers, Deterministic) {
  std::mt19937_64 rng(13);
  auto samples = random_labelled(40, rng);
  CavOptions o;
  o.seed = 9;
  EXPECT_EQ(train_cav(samples, o).v, train_cav(samples, o).v);
  const auto planted = planted_masks(10, 4);
  EXPECT_EQ(train_net2vec(planted).v, train_net2vec(planted).v);
  EXPECT_EQ(train_patcav(samples, false).v, train_patcav(samples, false).v);
}

TEST(CollectActivations, MatchesTrace) {
  const ModelGraph m = standard_detector(3, 16, 16, 3, 4);
  std::mt19937_64 rng(1);
  std::vector<ConceptSource> items;
  for (int i = 0; i < 10; ++i) items.push_back({oracle::random_tensor({1, 3, 16, 16}, rng, 0.0f, 1.0f), i % 2, std::nullopt});
  const auto samples = collect_activations(m, "feat.4", items);
  ASSERT_EQ(samples.size(), 10u);
  for (size_t i = 0; i < 10; ++i) {
    const ForwardResult f = forward(m, items[i].image);
    const Tensor& ref = f.trace.at("feat.4").output;
    EXPECT_EQ(samples[i].activation.reshaped(ref.shape()), ref);
    EXPECT_EQ(samples[i].activation.rank(), 3u);
    EXPECT_EQ(samples[i].label, int(i % 2));
  }
  EXPECT_THROW(collect_activations(m, "feat.99", items), NameError);

  ModelGraph zero = m;
  for (size_t i = 0; i < zero.size(); ++i) {
    zero.mutable_layer(i).weight = Tensor(zero.layer(i).weight.shape());
    zero.mutable_layer(i).bias = Tensor(zero.layer(i).bias.shape());
  }
  for (const auto& s : collect_activations(zero, "feat.1", items))
    for (float v : s.activation.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ConceptFile, RoundTrip) {
  ConceptVector cv;
  cv.layer = "feat.4";
  cv.v = Tensor::vector({0.5f, -1.25f, 3.0f});
  cv.method = ConceptMethod::SPatCAV;
  cv.bias = -0.75f;
  cv.meta.concept_name = "ring";
  cv.meta.n_positive = 12;
  cv.meta.n_negative = 30;
  cv.meta.held_out_score = 0.8;
  cv.meta.score_kind = "accuracy";
  cv.meta.precondition_warning = true;
  cv.meta.warning = "low accuracy";
  std::stringstream ss;
  write_concept(ss, cv);
  const ConceptVector back = read_concept(ss);
  EXPECT_EQ(back.layer, cv.layer);
  EXPECT_EQ(back.v, cv.v);
  EXPECT_EQ(back.method, cv.method);
  EXPECT_EQ(back.bias, cv.bias);
  EXPECT_EQ(back.meta.concept_name, "ring");
  EXPECT_EQ(back.meta.n_positive, 12u);
  EXPECT_DOUBLE_EQ(back.meta.held_out_score, 0.8);
  EXPECT_TRUE(back.meta.precondition_warning);

  std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "CPCV");
  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_concept(truncated), IoError);
  bytes[4] = 9;
  std::istringstream bad_tag(bytes);
  EXPECT_THROW(read_concept(bad_tag), IoError);
  EXPECT_THROW(load_concept("/nonexistent/concept.cpcv"), IoError);
}

TEST(ConceptMethodNames, RoundTrip) {
  for (auto m : {ConceptMethod::CAV, ConceptMethod::PatCAV, ConceptMethod::SPatCAV, ConceptMethod::Net2Vec})
    EXPECT_EQ(parse_concept_method(to_string(m)), m);
  EXPECT_THROW(parse_concept_method("tcav"), ConfigError);
}

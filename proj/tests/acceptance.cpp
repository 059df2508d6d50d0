// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Runtime budgets are part of each criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cprobe/cprobe.hpp"
#include "support/oracles.hpp"
#include "support/planted.hpp"

using namespace cprobe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
  return m;
}

// Balanced concept set: `per_class` scenes with and without the concept.
std::vector<ConceptSource> balanced_concepts(const SceneSpec& spec, size_t per_class) {
  std::vector<ConceptSource> items;
  size_t pos = 0, neg = 0;
  for (size_t i = 0; pos < per_class || neg < per_class; ++i) {
    const Scene s = render_scene(spec, i);
    size_t& seen = s.concept_label ? pos : neg;
    if (seen >= per_class) continue;
    ++seen;
    items.push_back({scene_tensor(s), s.concept_label, scene_mask(s)});
  }
  return items;
}

ConceptVector cav_at(const ModelGraph& m, const std::string& layer, const std::vector<ConceptSource>& items) {
  ConceptVector cv = train_cav(collect_activations(m, layer, items));
  cv.layer = layer;
  return cv;
}

std::optional<Detection> first_of_class(const ModelGraph& m, const Tensor& logits, int cls) {
  for (const Detection& d : detect(m, logits))
    if (d.class_id == static_cast<std::size_t>(cls)) return d;
  return std::nullopt;
}

ModelGraph train_standard(const SceneSpec& spec, size_t n, int epochs, float lr, std::uint64_t seed) {
  std::vector<TrainingExample> data;
  for (size_t i = 0; i < n; ++i) data.push_back(training_example(render_scene(spec, i)));
  TrainOptions o;
  o.epochs = epochs;
  o.lr = lr;
  o.seed = seed;
  return train(standard_detector(3, 32, 32, 3, seed), data, o).model;
}

// ---------------------------------------------------------------------------

Outcome conservation() {
  std::mt19937_64 rng(101);
  const ModelGraph m(Shape4{1, 3, 8, 8},
                     {LayerSpec::conv("c0", oracle::random_tensor({6, 3, 3, 3}, rng), Tensor({6}), 1, 1),
                      LayerSpec::relu("r0"), LayerSpec::maxpool("p0", 2, 2),
                      LayerSpec::conv("c1", oracle::random_tensor({5, 6, 3, 3}, rng), Tensor({5}), 1, 1),
                      LayerSpec::relu("r1"), LayerSpec::maxpool("p1", 2, 2),
                      LayerSpec::head("head", oracle::random_tensor({3, 5, 1, 1}, rng), Tensor({3}))});
  const Composite comp = Composite::uniform(LrpRule::epsilon(1e-6f));
  double worst = 0;
  int used = 0;
  for (int i = 0; used < 50 && i < 1000; ++i) {
    const Tensor x = oracle::random_tensor({1, 3, 8, 8}, rng, 0.0f, 1.0f);
    const ForwardResult f = forward(m, x);
    const InitTarget t = init_full_output(f.output);
    const double initial = sum(t.tensor);
    if (initial <= 0) continue;  // nothing positive to explain
    const double input = sum(*backward(m, f.trace, comp, t).input_attribution);
    worst = std::max(worst, std::abs(input - initial) / initial);
    ++used;
  }
  return {used == 50 && worst <= 1e-3, fmt("worst relative gap %.2e over %d inputs", worst, used)};
}

Outcome canonization() {
  std::mt19937_64 rng(202);
  const auto w = [&](Shape s, size_t fan_in) {
    const float r = std::sqrt(3.0f / fan_in);
    return oracle::random_tensor(std::move(s), rng, -r, r);
  };
  const auto bn = [&](const std::string& name, size_t c) {
    return LayerSpec::batchnorm(name, oracle::random_tensor({c}, rng, 0.5f, 2.0f), oracle::random_tensor({c}, rng),
                                oracle::random_tensor({c}, rng), oracle::random_tensor({c}, rng, 0.5f, 2.0f), 1e-5f);
  };
  const ModelGraph m(Shape4{1, 3, 16, 16},
                     {LayerSpec::conv("c0", w({8, 3, 3, 3}, 27), oracle::random_tensor({8}, rng), 1, 1), bn("bn0", 8),
                      LayerSpec::relu("r0"), LayerSpec::maxpool("p0", 2, 2), bn("bn1", 8),
                      LayerSpec::conv("c1", w({8, 8, 3, 3}, 72), oracle::random_tensor({8}, rng), 1, 0),
                      LayerSpec::relu("r1"), LayerSpec::flatten("f"),
                      LayerSpec::dense("fc", w({6, 8 * 6 * 6}, 288), oracle::random_tensor({6}, rng)), bn("bn2", 6),
                      LayerSpec::head("head", w({3, 6, 1, 1}, 6), oracle::random_tensor({3}, rng))});
  const ModelGraph c = canonize(m);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor x = oracle::random_tensor({1, 3, 16, 16}, rng);
    worst = std::max(worst, max_abs_diff(forward(m, x).output, forward(c, x).output));
  }
  const bool merged = c.size() == m.size() - 3;
  return {merged && worst <= 1e-5, fmt("max |diff| %.2e, %zu -> %zu layers", worst, m.size(), c.size())};
}

Outcome crp_special_case() {
  std::mt19937_64 rng(303);
  const ModelGraph m = standard_detector(3, 32, 32, 3, 3);
  const Composite comp = Composite::default_for(m);
  const std::string layer = "feat.4";
  const size_t channels = 16;
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const ForwardResult f = forward(m, oracle::random_tensor({1, 3, 32, 32}, rng, 0.0f, 1.0f));
    const InitTarget t = init_full_output(f.output);
    for (size_t k : {size_t(0), size_t(5), size_t(10), size_t(15)}) {
      ConceptVector cv;
      cv.layer = layer;
      cv.v = Tensor({channels});
      cv.v[k] = 1.0f;
      const Tensor a = explain_concept(m, f.trace, comp, cv, t).input_heatmap;
      worst = std::max(worst, max_abs_diff(a, channel_masked_heatmap(m, f.trace, comp, layer, k, t)));
    }
  }
  return {worst <= 1e-6, fmt("max |diff| %.2e over 20 inputs x 4 channels", worst)};
}

Outcome cav_precondition() {
  const ModelGraph m = planted::detector();
  const auto items = balanced_concepts(planted::scene_spec(400), 100);
  auto samples = collect_activations(m, planted::kPlantedLayer, items);
  const ConceptVector good = train_cav(samples);

  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  std::shuffle(labels.begin(), labels.end(), std::mt19937_64(404));
  for (size_t i = 0; i < samples.size(); ++i) samples[i].label = labels[i];
  const ConceptVector shuffled = train_cav(samples);

  const bool pass = good.meta.held_out_score >= 0.85 && !good.meta.precondition_warning &&
                    shuffled.meta.held_out_score <= 0.6 && shuffled.meta.precondition_warning;
  return {pass, fmt("separable %.3f, shuffled %.3f (warning %s)", good.meta.held_out_score,
                    shuffled.meta.held_out_score, shuffled.meta.precondition_warning ? "raised" : "missing")};
}

Outcome patcav_identity() {
  std::mt19937_64 rng(505);
  double worst = 1;
  for (int d = 0; d < 10; ++d) {
    std::vector<ConceptSample> s;
    for (int i = 0; i < 30 + d; ++i) s.push_back({oracle::random_tensor({5, 3, 3}, rng), int(i % 3 == 0), std::nullopt});
    worst = std::min(worst, oracle::cosine(train_patcav(s, false).v, train_patcav(s, true).v));
  }
  const std::vector<ConceptSample> fixture{{Tensor({2, 1, 1}, std::vector<float>{3, 1}), 1, std::nullopt},
                                           {Tensor({2, 1, 1}, std::vector<float>{1, 1}), 0, std::nullopt}};
  const Tensor v = train_patcav(fixture, true).v;
  const bool exact = v[0] == 1.0f && v[1] == 0.0f;
  return {worst > 0.999 && exact, fmt("min cosine %.6f, fixture [%g,%g]", worst, v[0], v[1])};
}

// Channel 1 equals 2 on the concept block and 0 elsewhere, the rest is noise.
std::vector<ConceptSample> planted_masks(size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pos(0, 5), len(1, 3);
  std::vector<ConceptSample> out;
  for (size_t i = 0; i < n; ++i) {
    Tensor act = oracle::random_tensor({3, 8, 8}, rng, 0.0f, 0.5f);
    Tensor mask({16, 16});
    const int y0 = pos(rng), x0 = pos(rng), h = len(rng), w = len(rng);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const bool on = y >= y0 && y < y0 + h && x >= x0 && x < x0 + w;
        act[64 + y * 8 + x] = on ? 2.0f : 0.0f;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) mask[(2 * y + dy) * 16 + 2 * x + dx] = on ? 1.0f : 0.0f;
      }
    out.push_back({act, 1, mask});
  }
  return out;
}

Outcome net2vec() {
  Net2VecOptions o;
  o.tau_quantile = 0.1;
  const auto probe_set = planted_masks(8, 606);
  const Net2VecProblem problem(probe_set, o);
  std::mt19937_64 rng(607);
  std::uniform_real_distribution<double> u(-2, 2);
  double worst = 0;
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
      worst = std::max(worst, std::abs(g[k] - numeric) / std::max(std::abs(numeric), 1e-3));
    }
  }
  const ConceptVector cv = train_net2vec(planted_masks(60, 608), o);
  return {worst <= 1e-4 && cv.meta.held_out_score >= 0.9,
          fmt("gradient rel err %.2e, held-out IoU %.3f", worst, cv.meta.held_out_score)};
}

Outcome localization_layers() {
  const ModelGraph m = planted::detector();
  const Composite comp = Composite::default_for(m);
  const auto items = balanced_concepts(planted::scene_spec(100), 100);
  const SceneSpec test = planted::scene_spec(200, 1, 2);
  double means[2] = {0, 0};
  int counts[2] = {0, 0};
  const std::string layers[2] = {planted::kPlantedLayer, planted::kMixedLayer};
  for (int l = 0; l < 2; ++l) {
    const ConceptVector cv = cav_at(m, layers[l], items);
    for (size_t i = 0; counts[l] < 100 && i < 2000; ++i) {
      const Scene s = render_scene(test, i);
      const ForwardResult f = forward(m, scene_tensor(s));
      const auto det = first_of_class(m, f.output, 1);
      if (!det) continue;
      const auto a = explain_concept(m, f.trace, comp, cv, init_single_detection(f.output, *det));
      const auto loc = try_localization(a.input_heatmap, scene_mask(s));
      if (!loc) continue;
      means[l] += loc->mu_c;
      ++counts[l];
    }
    means[l] /= std::max(counts[l], 1);
  }
  const bool pass = counts[0] == 100 && counts[1] == 100 && means[0] >= 0.8 && means[0] > means[1];
  return {pass, fmt("mean mu_c %s %.3f vs %s %.3f (%d/%d samples)", layers[0].c_str(), means[0], layers[1].c_str(),
                    means[1], counts[0], counts[1])};
}

Outcome ranked_vs_random() {
  const SceneSpec spec = standard_scene_spec(1);
  const ModelGraph m = train_standard(spec, 128, 8, 0.02f, 1);
  const ConceptVector cv = cav_at(m, "feat.4", [&] {
    std::vector<ConceptSource> items;
    for (size_t i = 0; i < 100; ++i) {
      const Scene s = render_scene(spec, 5000 + i);
      items.push_back({scene_tensor(s), s.concept_label, scene_mask(s)});
    }
    return items;
  }());
  std::vector<Tensor> pool;
  for (size_t i = 0; i < 32; ++i) pool.push_back(scene_tensor(render_scene(spec, 20000 + i)));
  const Composite comp = Composite::default_for(m);
  PerturbOptions po;
  po.scores_only = true;
  po.fill_values = channel_means(pool);
  double ranked = 0, random = 0;
  int n = 0;
  for (size_t i = 0; n < 50 && i < 2000; ++i) {
    const Tensor x = scene_tensor(render_scene(spec, 30000 + i));
    const ForwardResult f = forward(m, x);
    const auto dets = detect(m, f.output);
    if (dets.empty()) continue;
    const Tensor heat = explain_concept(m, f.trace, comp, cv, init_single_detection(f.output, dets[0])).input_heatmap;
    po.order = PixelOrder::Ranked;
    ranked += class_score_auc(perturb_and_score(m, comp, x, heat, cv, dets[0], std::nullopt, po));
    po.order = PixelOrder::Random;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      po.seed = seed;
      random += class_score_auc(perturb_and_score(m, comp, x, heat, cv, dets[0], std::nullopt, po)) / 5;
    }
    ++n;
  }
  ranked /= std::max(n, 1);
  random /= std::max(n, 1);
  const double margin = (random - ranked) / random;
  return {n == 50 && margin >= 0.10, fmt("ranked AUC %.4f, random AUC %.4f, margin %.1f%%", ranked, random, 100 * margin)};
}

Outcome concept_share_trend() {
  const ModelGraph m = planted::detector();
  const Composite comp = Composite::default_for(m);
  const ConceptVector cv = cav_at(m, planted::kPlantedLayer, balanced_concepts(planted::scene_spec(100), 100));
  const SceneSpec test = planted::scene_spec(200, 1, 2);
  int n = 0, share_up = 0, mu_down = 0;
  for (size_t i = 0; n < 50 && i < 2000; ++i) {
    const Scene s = render_scene(test, i);
    const Tensor x = scene_tensor(s), mask = scene_mask(s);
    const ForwardResult f = forward(m, x);
    const auto det = first_of_class(m, f.output, 1);
    if (!det) continue;
    const auto a = explain_concept(m, f.trace, comp, cv, init_single_detection(f.output, *det));
    const auto curve = perturb_and_score(m, comp, x, a.input_heatmap, cv, *det, mask);
    const auto share = concept_share_curve(curve);
    share_up += share.back() > share.front();
    const double mu0 = curve.localization_scores.front(), mu1 = curve.localization_scores.back();
    mu_down += !std::isnan(mu0) && !std::isnan(mu1) && mu1 < mu0;
    ++n;
  }
  const bool pass = n == 50 && share_up >= 0.8 * n && mu_down >= 0.8 * n;
  return {pass, fmt("share up %d/%d, mu_c down %d/%d", share_up, n, mu_down, n)};
}

// Two detectors, trained with and without the ring tied to the class-1 discs.
// Each is probed on class-1 detections drawn at its own confound level.
Outcome spurious_correlation() {
  constexpr std::uint64_t kSeed = 1;
  const auto concepts = balanced_concepts(standard_scene_spec(77, 0.0), 100);
  double usage[2] = {0, 0};
  int counts[2] = {0, 0};
  double scores[2] = {0, 0};
  const double confounds[2] = {0.9, 0.0};
  for (int k = 0; k < 2; ++k) {
    const ModelGraph m = train_standard(standard_scene_spec(kSeed, confounds[k]), 256, 15, 0.05f, kSeed);
    const ConceptVector cv = cav_at(m, "feat.4", concepts);
    scores[k] = cv.meta.held_out_score;
    const Composite comp = Composite::default_for(m);
    const SceneSpec test = standard_scene_spec(99, confounds[k]);
    for (size_t i = 0; counts[k] < 20 && i < 2000; ++i) {
      const ForwardResult f = forward(m, scene_tensor(render_scene(test, i)));
      const auto det = first_of_class(m, f.output, 1);
      if (!det) continue;
      usage[k] += explain_concept(m, f.trace, comp, cv, init_single_detection(f.output, *det)).usage_ratio;
      ++counts[k];
    }
    usage[k] /= std::max(counts[k], 1);
  }
  const double factor = usage[1] > 0 ? usage[0] / usage[1] : 0.0;
  return {counts[0] == 20 && counts[1] == 20 && factor >= 2.0,
          fmt("usage %.4f (confound 0.9) vs %.4f (confound 0.0), factor %.2f; CAV accuracy %.2f / %.2f", usage[0],
              usage[1], factor, scores[0], scores[1])};
}

Outcome cli_pipeline() {
  const fs::path root = fs::temp_directory_path() / "cprobe_acceptance_cli";
  fs::remove_all(root);
  const std::string cli = CPROBE_CLI_PATH;
  const auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + cli + "\" " + args + " > \"" + (root / "log.txt").string() + "\" 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  fs::create_directories(root);
  const std::string r = root.string();
  const std::vector<std::string> steps{
      "--seed 3 generate --out " + r + "/data --n 64 --confound 0.5",
      "--seed 3 train --dataset " + r + "/data --out " + r + "/model",
      "--seed 3 concept --model " + r + "/model/model.cpmd --dataset " + r + "/data --layer feat.4 --out " + r + "/concept",
      "--seed 3 explain --model " + r + "/model/model.cpmd --dataset " + r + "/data --concept " + r +
          "/concept/concept.cpcv --out " + r + "/explain --init full",
      "--seed 3 evaluate --model " + r + "/model/model.cpmd --dataset " + r + "/data --concept " + r +
          "/concept/concept.cpcv --out " + r + "/eval --layers feat.1,feat.4,feat.7"};
  for (size_t i = 0; i < steps.size(); ++i)
    if (!run(steps[i])) return {false, fmt("step %zu exited nonzero", i + 1)};

  const std::vector<std::string> artifacts{
      "data/labels.csv",          "data/spec.json",           "data/images/00063.ppm",
      "data/masks/ring/00063.pgm", "model/model.cpmd",          "model/training.csv",
      "model/run_config.ini",     "concept/concept.cpcv",      "concept/concept.json",
      "explain/heatmap.ppm",      "explain/input.ppm",         "explain/attribution.txt",
      "eval/usage_ranking.csv",   "eval/faithfulness.csv",     "eval/layers.csv",
      "eval/summary.json",        "eval/run_config.ini"};
  for (const auto& a : artifacts)
    if (!fs::exists(root / a)) return {false, "missing " + a};
  fs::remove_all(root);
  return {true, fmt("5 subcommands, %zu artifacts present", artifacts.size())};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, 10, conservation},          {2, 10, canonization},        {3, 30, crp_special_case},
      {4, 60, cav_precondition},      {5, 5, patcav_identity},      {6, 120, net2vec},
      {7, 300, localization_layers},  {8, 600, ranked_vs_random},   {9, 600, concept_share_trend},
      {10, 600, spurious_correlation}, {11, 300, cli_pipeline}};
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("AC%d %s  %s  [%.1fs of %.0fs]%s\n", c.id, pass ? "PASS" : "FAIL", o.detail.c_str(), secs, c.budget_s,
                in_time ? "" : " over budget");
    std::fflush(stdout);
  }
  return failed == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "cprobe/synth.hpp"

using namespace cprobe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cprobe_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

size_t mask_pixels(const Scene& s) {
  size_t n = 0;
  for (auto v : s.mask.pixels) n += v != 0;
  return n;
}

}  // namespace

TEST(Synth, NoConceptObjectsMeansEmptyMasks) {
  SceneSpec spec = standard_scene_spec(3);
  for (auto& o : spec.objects)
    if (o.shape == spec.concept_shape) o.min_count = o.max_count = 0;
  for (size_t i = 0; i < 30; ++i) {
    const Scene s = render_scene(spec, i);
    EXPECT_EQ(s.concept_label, 0);
    EXPECT_EQ(mask_pixels(s), 0u);
  }
}

TEST(Synth, SingleDiscConceptMatchesAnalyticArea) {
  SceneSpec spec;
  spec.height = spec.width = 48;
  spec.concept_shape = ShapeKind::Disc;
  spec.objects = {{ShapeKind::Disc, {200, 200, 200}, 13, 19, 1, 1, 0}};
  for (size_t i = 0; i < 30; ++i) {
    const Scene s = render_scene(spec, i);
    // The radius is not exported; recover it from the mask's row extent.
    int top = -1, bottom = -1;
    for (size_t y = 0; y < 48; ++y)
      for (size_t x = 0; x < 48; ++x)
        if (s.mask.pixels[y * 48 + x]) {
          if (top < 0) top = int(y);
          bottom = int(y);
        }
    ASSERT_GE(top, 0);
    const double r = (bottom - top) / 2.0;
    EXPECT_NEAR(double(mask_pixels(s)), std::numbers::pi * r * r, 0.01 * std::numbers::pi * r * r);
  }
}

TEST(Synth, MaskAndLabelAgree) {
  const SceneSpec spec = standard_scene_spec(11, 0.5);
  int positives = 0;
  for (size_t i = 0; i < 200; ++i) {
    const Scene s = render_scene(spec, i);
    EXPECT_EQ(s.concept_label == 1, mask_pixels(s) > 0);
    for (auto v : s.mask.pixels) EXPECT_TRUE(v == 0 || v == 1);
    positives += s.concept_label;
  }
  EXPECT_GT(positives, 0);
  EXPECT_LT(positives, 200);
}

TEST(Synth, MaskIsExactlyTheConceptColour) {
  SceneSpec spec = standard_scene_spec(2);
  spec.noise = 0;
  const Rgb ring = spec.concept_recipe()->color;
  for (size_t i = 0; i < 20; ++i) {
    const Scene s = render_scene(spec, i);
    for (size_t y = 0; y < spec.height; ++y)
      for (size_t x = 0; x < spec.width; ++x) {
        const auto* p = s.image.px(y, x);
        EXPECT_EQ(s.mask.pixels[y * spec.width + x] == 1, (Rgb{p[0], p[1], p[2]} == ring));
      }
  }
}

// A cell carries a class iff that class's pixels cover more than a quarter
// of it; recomputed here from the noise-free colours.
TEST(Synth, CellLabelsFollowCoverageRule) {
  SceneSpec spec = standard_scene_spec(4);
  spec.noise = 0;
  const size_t cell = spec.height / spec.grid;
  for (size_t i = 0; i < 40; ++i) {
    const Scene s = render_scene(spec, i);
    for (size_t gy = 0; gy < spec.grid; ++gy)
      for (size_t gx = 0; gx < spec.grid; ++gx) {
        std::vector<size_t> cover(3, 0);
        for (size_t y = gy * cell; y < (gy + 1) * cell; ++y)
          for (size_t x = gx * cell; x < (gx + 1) * cell; ++x) {
            const auto* p = s.image.px(y, x);
            for (const auto& o : spec.objects)
              if (o.class_id > 0 && (Rgb{p[0], p[1], p[2]} == o.color)) ++cover[o.class_id];
          }
        int expect = 0;
        size_t best = 0;
        for (int k = 1; k < 3; ++k)
          if (cover[k] > best) best = cover[k], expect = k;
        if (best * 4 <= cell * cell) expect = 0;
        EXPECT_EQ(s.cells[gy * spec.grid + gx], expect) << "scene " << i << " cell " << gy << "," << gx;
      }
  }
}

TEST(Synth, RenderIsPureFunctionOfSpecAndIndex) {
  const SceneSpec spec = standard_scene_spec(8, 0.3);
  for (size_t i = 0; i < 10; ++i) {
    const Scene a = render_scene(spec, i), b = render_scene(spec, i);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_EQ(a.cells, b.cells);
  }
  EXPECT_NE(render_scene(spec, 0).image, render_scene(spec, 1).image);
  EXPECT_NE(render_scene(standard_scene_spec(9, 0.3), 0).image, render_scene(spec, 0).image);
}

TEST(Synth, GenerateTwiceIsBitIdentical) {
  const SceneSpec spec = standard_scene_spec(5, 0.2);
  const fs::path a = scratch("a"), b = scratch("b");
  generate(spec, 12, a);
  generate(spec, 12, b);
  size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 12u * 2 + 2);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synth, DatasetRoundTrip) {
  const SceneSpec spec = standard_scene_spec(6);
  const fs::path root = scratch("round");
  const DatasetHandle made = generate(spec, 10, root);
  const DatasetHandle loaded = load_dataset(root);
  ASSERT_EQ(loaded.size(), 10u);
  EXPECT_TRUE(fs::exists(root / "images" / "00003.ppm"));
  EXPECT_TRUE(fs::exists(root / "masks" / "ring" / "00003.pgm"));
  EXPECT_EQ(to_json(loaded.spec), to_json(spec));
  for (size_t i = 0; i < 10; ++i) {
    const Scene s = render_scene(spec, i);
    EXPECT_EQ(loaded.entries[i].concept_label, s.concept_label);
    EXPECT_EQ(loaded.entries[i].cells, made.entries[i].cells);
    EXPECT_EQ(loaded.image(i), scene_tensor(s));
    EXPECT_EQ(loaded.mask(i), scene_mask(s));
  }
  const auto ex = training_examples(loaded);
  EXPECT_EQ(ex.size(), 10u);

  fs::remove(loaded.image_path(4));
  EXPECT_THROW(load_dataset(root), IoError);
  fs::remove_all(root);
  EXPECT_THROW(load_dataset(root), IoError);
}

TEST(Synth, SpecJsonRoundTrip) {
  SceneSpec spec = standard_scene_spec(42, 0.7);
  spec.objects.push_back({ShapeKind::Rectangle, {1, 2, 3}, 2, 3, 0, 1, 0});
  const SceneSpec back = scene_spec_from_json(nlohmann::json::parse(to_json(spec).dump()));
  EXPECT_EQ(to_json(back), to_json(spec));
  EXPECT_EQ(render_scene(back, 3).image, render_scene(spec, 3).image);
}

TEST(Synth, ConfoundReportTracksSpec) {
  // Binomial concentration: within 2/sqrt(n) of the expected rate.
  const size_t n = 200;
  const fs::path root = scratch("confound");
  const double tied = confound_report(generate(standard_scene_spec(7, 1.0), n, root));
  EXPECT_NEAR(tied, 1.0, 2.0 / std::sqrt(double(n)));

  fs::remove_all(root);
  const DatasetHandle free = generate(standard_scene_spec(7, 0.0), n, root);
  double base = 0;
  for (const auto& e : free.entries) base += e.concept_label;
  base /= n;
  EXPECT_NEAR(confound_report(free), base, 2.0 / std::sqrt(double(n)));
  fs::remove_all(root);
}

TEST(Synth, ConfoundRateUndefinedWithoutClass) {
  EXPECT_THROW(confound_rate({}, {}, 1), UndefinedMetric);
  EXPECT_THROW(confound_rate({1, 0}, {{0, 2}, {2, 2}}, 1), UndefinedMetric);
  EXPECT_DOUBLE_EQ(confound_rate({1, 0, 1}, {{1}, {1}, {0}}, 1), 0.5);
}

TEST(Synth, ImpossiblePlacementIsGenerationError) {
  SceneSpec spec;
  spec.height = spec.width = 16;
  spec.max_retries = 20;
  spec.objects = {{ShapeKind::Disc, {255, 0, 0}, 6, 7, 5, 5, 1}};
  EXPECT_THROW(render_scene(spec, 0), GenerationError);
}

TEST(Synth, InvalidSpecsAreConfigErrors) {
  SceneSpec spec = standard_scene_spec();
  spec.confound = 1.5;
  EXPECT_THROW(render_scene(spec, 0), ConfigError);
  spec = standard_scene_spec();
  spec.width = 30;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = standard_scene_spec();
  spec.objects[0].max_size = 40;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = standard_scene_spec();
  spec.objects[0].min_count = 3;
  spec.objects[0].max_count = 1;
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_THROW(generate(standard_scene_spec(), 0, scratch("zero")), ConfigError);
  EXPECT_THROW(parse_shape_kind("hexagon"), ConfigError);
}

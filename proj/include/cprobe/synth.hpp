#pragma once

// Deterministic synthetic scenes with pixel-exact concept masks and per-cell
// class labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cprobe/errors.hpp"
#include "cprobe/image_io.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/tensor.hpp"
#include "cprobe/train.hpp"

namespace cprobe {

enum class ShapeKind : std::uint8_t { Disc, Rectangle, Ring, Cross };

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Disc: return "disc";
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Cross: return "cross";
  }
  return "?";
}

inline ShapeKind parse_shape_kind(const std::string& s) {
  if (s == "disc") return ShapeKind::Disc;
  if (s == "rectangle") return ShapeKind::Rectangle;
  if (s == "ring") return ShapeKind::Ring;
  if (s == "cross") return ShapeKind::Cross;
  throw ConfigError("unknown shape kind '" + s + "'");
}

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// A kind of object to scatter over the canvas. `size` is the radius (disc,
/// ring) or half-extent (rectangle, cross) in pixels.
struct ObjectRecipe {
  ShapeKind shape = ShapeKind::Disc;
  Rgb color{255, 255, 255};
  int min_size = 3;
  int max_size = 5;
  int min_count = 0;
  int max_count = 1;
  /// Detection class (>= 1) labelled on the grid; 0 means not a class.
  int class_id = 0;
};

/// A cell is labelled with a class iff that class covers more than this
/// fraction of the cell.
inline constexpr double kCellCoverage = 0.25;

struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t grid = 4;  // cells per side
  Rgb background{0, 0, 0};
  int noise = 0;  // uniform per-channel jitter amplitude
  std::vector<ObjectRecipe> objects;
  /// Objects of this shape kind form the concept and its mask.
  ShapeKind concept_shape = ShapeKind::Ring;
  std::string concept_name = "concept";
  /// Probability that a concept object is placed touching each instance of
  /// `confound_class`.
  double confound = 0.0;
  int confound_class = 1;
  std::uint64_t seed = 0;
  int max_retries = 500;

  std::size_t num_classes() const {
    int mx = 0;
    for (const auto& o : objects) mx = std::max(mx, o.class_id);
    return static_cast<std::size_t>(mx) + 1;
  }

  void validate() const {
    if (height == 0 || width == 0 || grid == 0) throw ConfigError("scene extents must be positive");
    if (height % grid || width % grid) throw ConfigError("image size must be a multiple of the grid");
    if (!(confound >= 0.0 && confound <= 1.0)) throw ConfigError("confound must lie in [0,1]");
    for (const auto& o : objects) {
      if (o.min_size < 1 || o.max_size < o.min_size) throw ConfigError("bad object size range");
      if (o.min_count < 0 || o.max_count < o.min_count) throw ConfigError("bad object count range");
      if (2 * o.max_size + 1 > static_cast<int>(std::min(height, width))) {
        throw ConfigError("object does not fit the canvas");
      }
    }
    if (confound > 0 && !concept_recipe()) {
      throw ConfigError("confounding requires a recipe with the concept shape");
    }
  }

  const ObjectRecipe* concept_recipe() const {
    for (const auto& o : objects)
      if (o.shape == concept_shape) return &o;
    return nullptr;
  }
};

/// Default recipe of the command-line generator: red discs (class 1) and
/// blue crosses (class 2) on a dark background, with a yellow ring concept
/// that is not itself a class. `confound` ties rings to the discs.
inline SceneSpec standard_scene_spec(std::uint64_t seed = 0, double confound = 0.0) {
  SceneSpec s;
  s.background = {30, 30, 30};
  s.noise = 10;
  s.concept_shape = ShapeKind::Ring;
  s.concept_name = "ring";
  s.confound = confound;
  s.confound_class = 1;
  s.seed = seed;
  s.objects = {
      {ShapeKind::Disc, {210, 50, 50}, 3, 5, 1, 2, 1},
      {ShapeKind::Cross, {50, 90, 220}, 3, 5, 0, 2, 2},
      {ShapeKind::Ring, {220, 200, 40}, 3, 4, 0, 1, 0},
  };
  return s;
}

inline constexpr int kSceneRestarts = 50;

struct Scene {
  RgbImage image;
  GrayImage mask;  // 1 on concept pixels
  std::vector<int> cells;
  int concept_label = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline bool shape_covers(ShapeKind kind, int size, int dx, int dy) {
  const long d2 = static_cast<long>(dx) * dx + static_cast<long>(dy) * dy;
  const long r2 = static_cast<long>(size) * size;
  switch (kind) {
    case ShapeKind::Disc: return d2 <= r2;
    case ShapeKind::Ring: {
      const double inner = size * 0.5;
      return d2 <= r2 && static_cast<double>(d2) >= inner * inner;
    }
    case ShapeKind::Rectangle:
      return std::abs(dx) <= size && std::abs(dy) <= std::max(1, (size * 3) / 5);
    case ShapeKind::Cross: {
      const int t = std::max(1, size / 3);
      return (std::abs(dx) <= size && std::abs(dy) <= t) || (std::abs(dy) <= size && std::abs(dx) <= t);
    }
  }
  return false;
}

struct Placement {
  ShapeKind shape;
  int size;
  int cy, cx;
};

class Canvas {
 public:
  Canvas(std::size_t h, std::size_t w) : h_(h), w_(w), owner_(h * w, -1) {}

  /// True if the shape fits on the canvas and keeps a one-pixel gap to all
  /// previously placed objects.
  bool free_for(const Placement& p) const {
    if (p.cy - p.size < 0 || p.cx - p.size < 0 || p.cy + p.size >= static_cast<int>(h_) ||
        p.cx + p.size >= static_cast<int>(w_)) {
      return false;
    }
    for (int dy = -p.size - 1; dy <= p.size + 1; ++dy)
      for (int dx = -p.size - 1; dx <= p.size + 1; ++dx) {
        const int y = p.cy + dy, x = p.cx + dx;
        if (y < 0 || x < 0 || y >= static_cast<int>(h_) || x >= static_cast<int>(w_)) continue;
        if (owner_[y * w_ + x] < 0) continue;
        // any shape pixel within one pixel of an occupied one is a clash
        for (int ey = -1; ey <= 1; ++ey)
          for (int ex = -1; ex <= 1; ++ex)
            if (shape_covers(p.shape, p.size, dx + ex, dy + ey)) return false;
      }
    return true;
  }

  void place(const Placement& p, int id) {
    for (int dy = -p.size; dy <= p.size; ++dy)
      for (int dx = -p.size; dx <= p.size; ++dx)
        if (shape_covers(p.shape, p.size, dx, dy)) owner_[(p.cy + dy) * w_ + (p.cx + dx)] = id;
  }

  int owner(std::size_t y, std::size_t x) const { return owner_[y * w_ + x]; }

 private:
  std::size_t h_, w_;
  std::vector<int> owner_;
};

}  // namespace detail

/// Renders scene `index` of `spec`. Pure function of (spec, index).
inline Scene render_scene(const SceneSpec& spec, std::size_t index) {
  spec.validate();
  std::mt19937_64 rng(detail::splitmix64(spec.seed ^ detail::splitmix64(index + 1)));
  const auto uniform_int = [&](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };

  detail::Canvas canvas(spec.height, spec.width);
  std::vector<const ObjectRecipe*> owners;

  std::string failure;
  const auto place_random = [&](const ObjectRecipe& r) -> std::optional<detail::Placement> {
    const int size = uniform_int(r.min_size, r.max_size);
    for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
      const detail::Placement p{r.shape, size, uniform_int(size, static_cast<int>(spec.height) - size - 1),
                                uniform_int(size, static_cast<int>(spec.width) - size - 1)};
      if (canvas.free_for(p)) {
        canvas.place(p, static_cast<int>(owners.size()));
        owners.push_back(&r);
        return p;
      }
    }
    failure = "could not place a " + std::string(to_string(r.shape));
    return std::nullopt;
  };

  // Concept object touching `anchor`, at a random bearing.
  const auto place_adjacent = [&](const ObjectRecipe& r, const detail::Placement& anchor) {
    const int size = uniform_int(r.min_size, r.max_size);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
      const double a = angle(rng);
      const double dist = anchor.size + size + 2 + (attempt % 3);
      const detail::Placement p{r.shape, size,
                                anchor.cy + static_cast<int>(std::lround(dist * std::sin(a))),
                                anchor.cx + static_cast<int>(std::lround(dist * std::cos(a)))};
      if (canvas.free_for(p)) {
        canvas.place(p, static_cast<int>(owners.size()));
        owners.push_back(&r);
        return true;
      }
    }
    failure = "could not place a confounding concept";
    return false;
  };

  std::bernoulli_distribution confound_draw(spec.confound);
  const auto place_all = [&] {
    for (const ObjectRecipe& r : spec.objects) {
      const int count = uniform_int(r.min_count, r.max_count);
      for (int i = 0; i < count; ++i) {
        const auto p = place_random(r);
        if (!p) return false;
        if (r.class_id == spec.confound_class && spec.confound > 0 && confound_draw(rng) &&
            !place_adjacent(*spec.concept_recipe(), *p)) {
          return false;
        }
      }
    }
    return true;
  };
  // A crowded draw is discarded as a whole; the rng stream keeps advancing,
  // so the result is still a pure function of (spec, index).
  bool placed = false;
  for (int restart = 0; restart < kSceneRestarts && !placed; ++restart) {
    canvas = detail::Canvas(spec.height, spec.width);
    owners.clear();
    placed = place_all();
  }
  if (!placed) throw GenerationError(failure + " in scene " + std::to_string(index));

  Scene scene;
  scene.image = RgbImage(spec.height, spec.width);
  scene.mask = GrayImage(spec.height, spec.width);
  std::uniform_int_distribution<int> jitter(-spec.noise, spec.noise);
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const int id = canvas.owner(y, x);
      const Rgb c = id >= 0 ? owners[id]->color : spec.background;
      std::uint8_t* px = scene.image.px(y, x);
      const int base[3] = {c.r, c.g, c.b};
      for (int ch = 0; ch < 3; ++ch) {
        const int v = base[ch] + (spec.noise > 0 ? jitter(rng) : 0);
        px[ch] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
      }
      if (id >= 0 && owners[id]->shape == spec.concept_shape) {
        scene.mask.pixels[y * spec.width + x] = 1;
        scene.concept_label = 1;
      }
    }

  const std::size_t ch = spec.height / spec.grid, cw = spec.width / spec.grid;
  const std::size_t num_classes = spec.num_classes();
  scene.cells.assign(spec.grid * spec.grid, 0);
  for (std::size_t gy = 0; gy < spec.grid; ++gy)
    for (std::size_t gx = 0; gx < spec.grid; ++gx) {
      std::vector<std::size_t> cover(num_classes, 0);
      for (std::size_t y = gy * ch; y < (gy + 1) * ch; ++y)
        for (std::size_t x = gx * cw; x < (gx + 1) * cw; ++x) {
          const int id = canvas.owner(y, x);
          if (id >= 0 && owners[id]->class_id > 0) ++cover[owners[id]->class_id];
        }
      std::size_t best = 0, best_cover = 0;
      for (std::size_t k = 1; k < num_classes; ++k) {
        if (cover[k] > best_cover) {
          best = k;
          best_cover = cover[k];
        }
      }
      if (best > 0 && static_cast<double>(best_cover) > kCellCoverage * ch * cw) {
        scene.cells[gy * spec.grid + gx] = static_cast<int>(best);
      }
    }
  return scene;
}

inline Tensor scene_tensor(const Scene& s) { return to_tensor(s.image); }
inline Tensor scene_mask(const Scene& s) { return to_mask(s.mask); }

inline TrainingExample training_example(const Scene& s) {
  return {scene_tensor(s), s.cells};
}

// ---------------------------------------------------------------------------
// JSON form of the scene recipe, stored next to every generated dataset.

inline nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : spec.objects) {
    objs.push_back({{"shape", to_string(o.shape)},
                    {"color", {o.color.r, o.color.g, o.color.b}},
                    {"size", {o.min_size, o.max_size}},
                    {"count", {o.min_count, o.max_count}},
                    {"class_id", o.class_id}});
  }
  return {{"height", spec.height},
          {"width", spec.width},
          {"grid", spec.grid},
          {"background", {spec.background.r, spec.background.g, spec.background.b}},
          {"noise", spec.noise},
          {"objects", objs},
          {"concept_shape", to_string(spec.concept_shape)},
          {"concept_name", spec.concept_name},
          {"confound", spec.confound},
          {"confound_class", spec.confound_class},
          {"seed", spec.seed},
          {"max_retries", spec.max_retries}};
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  const auto rgb = [](const nlohmann::json& a) {
    return Rgb{a.at(0).get<std::uint8_t>(), a.at(1).get<std::uint8_t>(), a.at(2).get<std::uint8_t>()};
  };
  SceneSpec spec;
  spec.height = j.at("height");
  spec.width = j.at("width");
  spec.grid = j.at("grid");
  spec.background = rgb(j.at("background"));
  spec.noise = j.at("noise");
  for (const auto& o : j.at("objects")) {
    ObjectRecipe r;
    r.shape = parse_shape_kind(o.at("shape"));
    r.color = rgb(o.at("color"));
    r.min_size = o.at("size").at(0);
    r.max_size = o.at("size").at(1);
    r.min_count = o.at("count").at(0);
    r.max_count = o.at("count").at(1);
    r.class_id = o.at("class_id");
    spec.objects.push_back(r);
  }
  spec.concept_shape = parse_shape_kind(j.at("concept_shape"));
  spec.concept_name = j.at("concept_name");
  spec.confound = j.at("confound");
  spec.confound_class = j.at("confound_class");
  spec.seed = j.at("seed");
  spec.max_retries = j.value("max_retries", 500);
  return spec;
}

// ---------------------------------------------------------------------------
// On-disk datasets:
//   images/NNNNN.ppm, masks/<concept>/NNNNN.pgm (0/255), labels.csv, spec.json

struct DatasetEntry {
  std::size_t id = 0;
  int concept_label = 0;
  std::vector<int> cells;
};

struct DatasetHandle {
  std::filesystem::path root;
  SceneSpec spec;
  std::vector<DatasetEntry> entries;

  std::size_t size() const { return entries.size(); }
  const std::string& concept_name() const { return spec.concept_name; }

  static std::string file_stem(std::size_t id) {
    std::ostringstream os;
    os << std::setw(5) << std::setfill('0') << id;
    return os.str();
  }
  std::filesystem::path image_path(std::size_t i) const {
    return root / "images" / (file_stem(entries.at(i).id) + ".ppm");
  }
  std::filesystem::path mask_path(std::size_t i) const {
    return root / "masks" / spec.concept_name / (file_stem(entries.at(i).id) + ".pgm");
  }

  /// [1,3,H,W] image of entry `i`.
  Tensor image(std::size_t i) const { return to_tensor(read_ppm(image_path(i))); }
  /// [H,W] binary concept mask of entry `i`.
  Tensor mask(std::size_t i) const { return to_mask(read_pgm(mask_path(i))); }
};

inline DatasetHandle generate(const SceneSpec& spec, std::size_t n, const std::filesystem::path& root) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks" / spec.concept_name);

  DatasetHandle handle{root, spec, {}};
  std::ofstream labels(root / "labels.csv");
  if (!labels) throw IoError("cannot write " + (root / "labels.csv").string());
  labels << "id,concept_label";
  for (std::size_t r = 0; r < spec.grid; ++r)
    for (std::size_t c = 0; c < spec.grid; ++c) labels << ",cell_" << r << "_" << c;
  labels << '\n';

  handle.entries.resize(n);
  for (std::size_t i = 0; i < n; ++i) handle.entries[i].id = i;
  parallel_for(n, [&](std::size_t i) {
    const Scene s = render_scene(spec, i);
    handle.entries[i].concept_label = s.concept_label;
    handle.entries[i].cells = s.cells;
    write_ppm(handle.image_path(i), s.image);
    GrayImage m = s.mask;
    for (auto& p : m.pixels) p = p ? 255 : 0;
    write_pgm(handle.mask_path(i), m);
  });
  for (const DatasetEntry& e : handle.entries) {
    labels << e.id << ',' << e.concept_label;
    for (int c : e.cells) labels << ',' << c;
    labels << '\n';
  }
  std::ofstream(root / "spec.json") << to_json(spec).dump(2) << '\n';
  return handle;
}

inline DatasetHandle load_dataset(const std::filesystem::path& root) {
  std::ifstream spec_file(root / "spec.json");
  if (!spec_file) throw IoError("dataset " + root.string() + " has no spec.json");
  DatasetHandle handle{root, scene_spec_from_json(nlohmann::json::parse(spec_file)), {}};

  std::ifstream labels(root / "labels.csv");
  if (!labels) throw IoError("dataset " + root.string() + " has no labels.csv");
  std::string line;
  std::getline(labels, line);
  const std::size_t cells = handle.spec.grid * handle.spec.grid;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<long> values;
    while (std::getline(ss, field, ',')) values.push_back(std::stol(field));
    if (values.size() != 2 + cells) throw IoError("malformed labels.csv row: " + line);
    DatasetEntry e{static_cast<std::size_t>(values[0]), static_cast<int>(values[1]), {}};
    if (e.concept_label != 0 && e.concept_label != 1) throw IoError("concept label must be 0 or 1");
    for (std::size_t c = 0; c < cells; ++c) e.cells.push_back(static_cast<int>(values[2 + c]));
    handle.entries.push_back(std::move(e));
    if (!std::filesystem::exists(handle.image_path(handle.size() - 1)) ||
        !std::filesystem::exists(handle.mask_path(handle.size() - 1))) {
      throw IoError("dataset entry " + std::to_string(handle.entries.back().id) + " is missing files");
    }
  }
  return handle;
}

inline std::vector<TrainingExample> training_examples(const DatasetHandle& handle) {
  std::vector<TrainingExample> out;
  out.reserve(handle.size());
  for (std::size_t i = 0; i < handle.size(); ++i) {
    out.push_back({handle.image(i), handle.entries[i].cells});
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Empirical P(concept present | class present), where a class counts as
/// present when at least one grid cell carries its label.
inline double confound_rate(const std::vector<int>& concept_labels,
                            const std::vector<std::vector<int>>& cells, int class_id) {
  std::size_t with_class = 0, with_both = 0;
  for (std::size_t i = 0; i < concept_labels.size(); ++i) {
    const bool present = std::find(cells[i].begin(), cells[i].end(), class_id) != cells[i].end();
    if (!present) continue;
    ++with_class;
    with_both += concept_labels[i] == 1;
  }
  if (with_class == 0) throw UndefinedMetric("class " + std::to_string(class_id) + " never present");
  return static_cast<double>(with_both) / with_class;
}

inline double confound_report(const DatasetHandle& handle) {
  std::vector<int> labels;
  std::vector<std::vector<int>> cells;
  for (const auto& e : handle.entries) {
    labels.push_back(e.concept_label);
    cells.push_back(e.cells);
  }
  return confound_rate(labels, cells, handle.spec.confound_class);
}

}  // namespace cprobe

#include "incdet/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"

namespace incdet {

using nlohmann::json;

Color color_from_hex(const std::string& hex) {
  check(hex.size() == 7 && hex[0] == '#', "color: expected #rrggbb, got " + hex);
  auto byte = [&](int pos) {
    return static_cast<std::uint8_t>(std::stoi(hex.substr(static_cast<std::size_t>(pos), 2), nullptr, 16));
  };
  return {byte(1), byte(3), byte(5)};
}

std::string color_to_hex(Color c) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

void DomainStyle::validate() const {
  check(!palette.empty(), "DomainStyle: palette must be non-empty");
  check(noise >= 0 && noise <= kMaxNoise, "DomainStyle: noise out of range [0, 0.25]");
}

namespace {
constexpr std::array<const char*, kShapeCount> kShapeNames = {
    "circle", "square", "triangle", "cross", "star", "ring", "diamond", "bar"};
}

const char* shape_name(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }

Shape shape_from_name(const std::string& name) {
  for (int i = 0; i < kShapeCount; ++i)
    if (name == kShapeNames[static_cast<std::size_t>(i)]) return static_cast<Shape>(i);
  throw Error("unknown shape category: " + name);
}

std::vector<std::string> CategorySet::names() const {
  std::vector<std::string> out;
  out.reserve(shapes.size());
  for (Shape s : shapes) out.emplace_back(shape_name(s));
  return out;
}

void CategorySet::validate() const {
  check(!shapes.empty(), "CategorySet: must be non-empty");
  std::set<Shape> seen(shapes.begin(), shapes.end());
  check(seen.size() == shapes.size(), "CategorySet: duplicate categories");
}

void ScenarioSpec::validate() const {
  check(tasks.size() >= 2, "ScenarioSpec: at least 2 tasks required");
  check(train_per_task >= 1 && test_per_task >= 1, "ScenarioSpec: empty splits");
  check(image_h >= 64 && image_w >= 64, "ScenarioSpec: image size must be at least 64x64");
  check(min_objects >= 1 && max_objects >= min_objects, "ScenarioSpec: bad object count range");
  std::set<std::string> names;
  for (const auto& t : tasks) {
    t.style.validate();
    t.categories.validate();
    check(!t.name.empty(), "ScenarioSpec: task name empty");
    names.insert(t.name);
  }
  check(names.size() == tasks.size(), "ScenarioSpec: duplicate task names");
}

namespace {

// counter-based uniform in [0,1) for per-pixel effects
inline double hash_uniform(std::uint64_t seed, std::uint64_t idx, std::uint64_t salt) {
  return static_cast<double>(mix64(seed, idx, salt) >> 11) * 0x1.0p-53;
}

struct Rgb {
  double r, g, b;
};
inline Rgb to_rgb(Color c) { return {c.r / 255.0, c.g / 255.0, c.b / 255.0}; }

// Unit-square shape membership; every shape touches all four edges of the
// box so the ground-truth box is tight by construction.
bool point_in_polygon(const std::vector<std::pair<double, double>>& poly, double u, double v) {
  bool inside = false;
  std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if ((yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

const std::vector<std::pair<double, double>>& star_polygon() {
  static const std::vector<std::pair<double, double>> poly = [] {
    std::vector<std::pair<double, double>> pts;
    const double inner = 0.381966;
    for (int k = 0; k < 10; ++k) {
      const double ang = -M_PI / 2 + k * M_PI / 5;
      const double r = (k % 2 == 0) ? 1.0 : inner;
      pts.emplace_back(r * std::cos(ang), r * std::sin(ang));
    }
    double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
    for (auto& [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
    for (auto& [x, y] : pts) {
      x = (x - x0) / (x1 - x0);
      y = (y - y0) / (y1 - y0);
    }
    return pts;
  }();
  return poly;
}

bool shape_inside(Shape s, double u, double v) {
  if (u < 0 || u > 1 || v < 0 || v > 1) return false;
  const double du = u - 0.5, dv = v - 0.5;
  switch (s) {
    case Shape::circle:
      return du * du + dv * dv <= 0.25;
    case Shape::square:
      return true;
    case Shape::triangle: {
      // apex at top middle, base along the bottom edge
      if (v < 0 || v > 1) return false;
      const double half = 0.5 * v;
      return std::abs(du) <= half;
    }
    case Shape::cross:
      return std::abs(du) <= 0.18 || std::abs(dv) <= 0.18;
    case Shape::star:
      return point_in_polygon(star_polygon(), u, v);
    case Shape::ring: {
      const double rr = du * du + dv * dv;
      return rr <= 0.25 && rr >= 0.25 * 0.55 * 0.55;
    }
    case Shape::diamond:
      return std::abs(du) + std::abs(dv) <= 0.5;
    case Shape::bar:
      return true;
  }
  return false;
}

bool shape_hit(Shape s, FillStyle fill, double u, double v) {
  if (!shape_inside(s, u, v)) return false;
  if (fill == FillStyle::solid) return true;
  // outlined: keep a border band by carving out a scaled-down copy
  const double shrink = 0.68;
  const double su = 0.5 + (u - 0.5) / shrink;
  const double sv = 0.5 + (v - 0.5) / shrink;
  return !shape_inside(s, su, sv);
}

Rgb background_color(const DomainStyle& style, int x, int y, std::uint64_t seed, int band) {
  const auto& pal = style.palette;
  const auto pick = [&](std::size_t i) { return to_rgb(pal[i % pal.size()]); };
  switch (style.texture) {
    case TextureKind::flat:
      return pick(static_cast<std::size_t>(mix64(seed, 0xBA5E) % pal.size()));
    case TextureKind::stripes: {
      const std::size_t base = mix64(seed, 0xBA5E) % pal.size();
      const int k = (x + y) / band;
      return pick(base + static_cast<std::size_t>(k % 2));
    }
    case TextureKind::speckle: {
      const std::size_t base = mix64(seed, 0xBA5E) % pal.size();
      if (hash_uniform(seed, static_cast<std::uint64_t>(y) * 100003 + x, 0x5bec) < 0.08)
        return pick(base + 1);
      return pick(base);
    }
  }
  return {0, 0, 0};
}

const std::vector<Color>& object_palette() {
  static const std::vector<Color> pal = {
      color_from_hex("#e6483c"), color_from_hex("#f09628"), color_from_hex("#f0dc3c"),
      color_from_hex("#5ac850"), color_from_hex("#46d2d2"), color_from_hex("#4672e6"),
      color_from_hex("#9650dc"), color_from_hex("#e650b4"), color_from_hex("#f5f5f5"),
      color_from_hex("#8c5a28")};
  return pal;
}

}  // namespace

LabeledImage render_image(const DomainStyle& style, const CategorySet& categories, int n_objects,
                          std::uint64_t seed, int image_h, int image_w, const std::string& id) {
  style.validate();
  categories.validate();
  check(n_objects >= 1, "render_image: n_objects must be >= 1");
  check(image_h >= 64 && image_w >= 64, "render_image: image size must be at least 64x64");

  std::mt19937_64 rng = make_rng(mix64(seed, 0x1337));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int min_side = std::min(image_h, image_w);
  const double size_lo = std::max(12.0, 0.14 * min_side);
  const double size_hi = 0.44 * min_side;

  // place boxes first, rejecting overlaps above 0.3 IoU
  struct Placed {
    BoundingBox box;
    Shape shape;
    Rgb color;
  };
  std::vector<Placed> placed;
  for (int k = 0; k < n_objects; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
      const int ci = static_cast<int>(rng() % static_cast<std::uint64_t>(categories.size()));
      const Shape shape = categories.shapes[static_cast<std::size_t>(ci)];
      double w, h;
      if (shape == Shape::bar) {
        w = size_lo + (size_hi - size_lo) * (0.6 + 0.4 * unit(rng));
        h = std::max(7.0, w / (2.8 + unit(rng)));
        if (rng() % 2 == 0) std::swap(w, h);
      } else {
        const double s = size_lo + (size_hi - size_lo) * unit(rng);
        const double aspect = 0.78 + 0.5 * unit(rng);
        w = std::min(s * std::sqrt(aspect), image_w - 5.0);
        h = std::min(s / std::sqrt(aspect), image_h - 5.0);
      }
      BoundingBox b;
      b.x1 = 2.0 + unit(rng) * (image_w - 4.0 - w);
      b.y1 = 2.0 + unit(rng) * (image_h - 4.0 - h);
      b.x2 = b.x1 + w;
      b.y2 = b.y1 + h;
      b.label = ci;
      bool overlaps = false;
      for (const auto& p : placed)
        if (iou(b, p.box) > 0.3) {
          overlaps = true;
          break;
        }
      if (overlaps) continue;
      const auto& pal = object_palette();
      placed.push_back({b, shape, to_rgb(pal[rng() % pal.size()])});
      ok = true;
    }
    if (!ok)
      throw Error("render_image: could not place object " + std::to_string(k + 1) + " of " +
                  std::to_string(n_objects) + " within the 0.3 IoU budget (image " + id + ")");
  }

  // paint: background, then objects with 2x2 supersampling, then noise
  const int band = 8 + static_cast<int>(mix64(seed, 0xB4D) % 9);
  std::vector<Rgb> canvas(static_cast<std::size_t>(image_h) * image_w);
  for (int y = 0; y < image_h; ++y)
    for (int x = 0; x < image_w; ++x)
      canvas[static_cast<std::size_t>(y) * image_w + x] = background_color(style, x, y, seed, band);

  constexpr double offsets[2] = {0.25, 0.75};
  for (const auto& p : placed) {
    const int x_lo = std::max(0, static_cast<int>(std::floor(p.box.x1)));
    const int x_hi = std::min(image_w - 1, static_cast<int>(std::ceil(p.box.x2)));
    const int y_lo = std::max(0, static_cast<int>(std::floor(p.box.y1)));
    const int y_hi = std::min(image_h - 1, static_cast<int>(std::ceil(p.box.y2)));
    const double bw = p.box.width(), bh = p.box.height();
    for (int y = y_lo; y <= y_hi; ++y) {
      for (int x = x_lo; x <= x_hi; ++x) {
        int hits = 0;
        for (double oy : offsets)
          for (double ox : offsets) {
            const double u = (x + ox - p.box.x1) / bw;
            const double v = (y + oy - p.box.y1) / bh;
            if (u >= 0 && u <= 1 && v >= 0 && v <= 1 && shape_hit(p.shape, style.fill, u, v)) ++hits;
          }
        if (hits == 0) continue;
        const double cov = hits / 4.0;
        Rgb& px = canvas[static_cast<std::size_t>(y) * image_w + x];
        px.r = px.r * (1 - cov) + p.color.r * cov;
        px.g = px.g * (1 - cov) + p.color.g * cov;
        px.b = px.b * (1 - cov) + p.color.b * cov;
      }
    }
  }

  LabeledImage out;
  out.id = id;
  out.image = Image(image_h, image_w);
  for (int y = 0; y < image_h; ++y) {
    for (int x = 0; x < image_w; ++x) {
      const Rgb& px = canvas[static_cast<std::size_t>(y) * image_w + x];
      const double ch[3] = {px.r, px.g, px.b};
      for (int c = 0; c < 3; ++c) {
        double v = ch[c];
        if (style.noise > 0) {
          const std::uint64_t idx = (static_cast<std::uint64_t>(y) * image_w + x) * 3 + c;
          v += style.noise * (2.0 * hash_uniform(seed, idx, 0x4015e) - 1.0);
        }
        v = std::clamp(v, 0.0, 1.0);
        out.image.at(c, y, x) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  for (const auto& p : placed) out.boxes.push_back(p.box);
  return out;
}

std::vector<TaskDataset> make_scenario(const ScenarioSpec& spec) {
  spec.validate();
  std::vector<TaskDataset> out;
  for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
    const TaskSpec& task = spec.tasks[t];
    TaskDataset ds;
    ds.name = task.name;
    ds.category_names = task.categories.names();
    ds.style = task.style;
    ds.image_h = spec.image_h;
    ds.image_w = spec.image_w;
    auto render_split = [&](int count, int split_tag, const char* split_name,
                            std::vector<LabeledImage>& dest) {
      dest.reserve(static_cast<std::size_t>(count));
      for (int i = 0; i < count; ++i) {
        const std::uint64_t img_seed = mix64(spec.seed, t * 2 + static_cast<std::uint64_t>(split_tag), i);
        std::mt19937_64 nrng = make_rng(mix64(img_seed, 0xC0DE));
        const int n_objects =
            spec.min_objects + static_cast<int>(nrng() % static_cast<std::uint64_t>(
                                                    spec.max_objects - spec.min_objects + 1));
        char id[160];
        std::snprintf(id, sizeof(id), "%s_%s_%05d", task.name.c_str(), split_name, i);
        try {
          dest.push_back(render_image(task.style, task.categories, n_objects, img_seed, spec.image_h,
                                      spec.image_w, id));
        } catch (const Error& e) {
          throw Error("make_scenario: task " + task.name + ", image " + id + ": " + e.what());
        }
      }
    };
    render_split(spec.train_per_task, 0, "train", ds.train);
    render_split(spec.test_per_task, 1, "test", ds.test);
    out.push_back(std::move(ds));
  }
  return out;
}

namespace {

json style_to_json(const DomainStyle& s) {
  json j;
  j["palette"] = json::array();
  for (Color c : s.palette) j["palette"].push_back(color_to_hex(c));
  switch (s.texture) {
    case TextureKind::flat: j["texture"] = "flat"; break;
    case TextureKind::stripes: j["texture"] = "stripes"; break;
    case TextureKind::speckle: j["texture"] = "speckle"; break;
  }
  j["noise"] = s.noise;
  j["fill"] = s.fill == FillStyle::solid ? "solid" : "outlined";
  return j;
}

DomainStyle style_from_json(const json& j) {
  DomainStyle s;
  for (const auto& c : j.at("palette")) s.palette.push_back(color_from_hex(c.get<std::string>()));
  const std::string tex = j.at("texture").get<std::string>();
  if (tex == "flat")
    s.texture = TextureKind::flat;
  else if (tex == "stripes")
    s.texture = TextureKind::stripes;
  else if (tex == "speckle")
    s.texture = TextureKind::speckle;
  else
    throw Error("unknown texture kind: " + tex);
  s.noise = j.at("noise").get<double>();
  const std::string fill = j.at("fill").get<std::string>();
  if (fill == "solid")
    s.fill = FillStyle::solid;
  else if (fill == "outlined")
    s.fill = FillStyle::outlined;
  else
    throw Error("unknown fill style: " + fill);
  s.validate();
  return s;
}

json load_json_file(const std::filesystem::path& path, const std::string& what) {
  std::ifstream in(path);
  check(in.good(), what + " not found: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(what + " is not valid JSON (" + path.string() + "): " + e.what());
  }
  return j;
}

void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  check(out.good(), "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

void save_dataset(const TaskDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");

  json manifest;
  manifest["name"] = ds.name;
  manifest["image_height"] = ds.image_h;
  manifest["image_width"] = ds.image_w;
  manifest["categories"] = ds.category_names;
  manifest["style"] = style_to_json(ds.style);
  manifest["train"] = json::array();
  manifest["test"] = json::array();

  auto save_split = [&](const std::vector<LabeledImage>& split, json& ids) {
    for (const auto& li : split) {
      ids.push_back(li.id);
      write_png(dir / "images" / (li.id + ".png"), li.image);
      json ann = json::array();
      for (const auto& b : li.boxes)
        ann.push_back({{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}, {"label", b.label}});
      write_json_file(ann, dir / "annotations" / (li.id + ".json"));
    }
  };
  save_split(ds.train, manifest["train"]);
  save_split(ds.test, manifest["test"]);
  write_json_file(manifest, dir / "manifest.json");
}

TaskDataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  check(fs::exists(dir / "manifest.json"), "no manifest found in " + dir.string());
  json manifest = load_json_file(dir / "manifest.json", "manifest");

  TaskDataset ds;
  ds.name = manifest.at("name").get<std::string>();
  ds.image_h = manifest.at("image_height").get<int>();
  ds.image_w = manifest.at("image_width").get<int>();
  ds.category_names = manifest.at("categories").get<std::vector<std::string>>();
  ds.style = style_from_json(manifest.at("style"));

  auto load_split = [&](const json& ids, std::vector<LabeledImage>& dest) {
    for (const auto& idj : ids) {
      const std::string id = idj.get<std::string>();
      const fs::path img_path = dir / "images" / (id + ".png");
      check(fs::exists(img_path), "manifest references missing image file: " + img_path.string());
      LabeledImage li;
      li.id = id;
      li.image = read_png(img_path);
      check(li.image.height == ds.image_h && li.image.width == ds.image_w,
            "image size mismatch for " + id);
      const fs::path ann_path = dir / "annotations" / (id + ".json");
      check(fs::exists(ann_path), "annotation file missing for image " + id);
      json ann = load_json_file(ann_path, "annotation for image " + id);
      for (const auto& bj : ann) {
        BoundingBox b;
        b.x1 = bj.at("x1").get<double>();
        b.y1 = bj.at("y1").get<double>();
        b.x2 = bj.at("x2").get<double>();
        b.y2 = bj.at("y2").get<double>();
        b.label = bj.at("label").get<int>();
        check(b.valid(), "degenerate box in annotations of image " + id);
        check(b.x1 >= 0 && b.y1 >= 0 && b.x2 <= ds.image_w && b.y2 <= ds.image_h,
              "box out of image bounds in image " + id);
        check(b.label >= 0 && b.label < ds.num_classes(), "label out of range in image " + id);
        li.boxes.push_back(b);
      }
      dest.push_back(std::move(li));
    }
  };
  load_split(manifest.at("train"), ds.train);
  load_split(manifest.at("test"), ds.test);
  return ds;
}

namespace {

DomainStyle style_dark_flat() {
  DomainStyle s;
  s.palette = {color_from_hex("#1b2a38"), color_from_hex("#26333b"), color_from_hex("#203028")};
  s.texture = TextureKind::flat;
  s.noise = 0.02;
  s.fill = FillStyle::solid;
  return s;
}

DomainStyle style_light_stripes() {
  DomainStyle s;
  s.palette = {color_from_hex("#d8d2c4"), color_from_hex("#c9d4dd"), color_from_hex("#d5c9d8")};
  s.texture = TextureKind::stripes;
  s.noise = 0.05;
  s.fill = FillStyle::solid;
  return s;
}

DomainStyle style_speckle_outline() {
  DomainStyle s;
  s.palette = {color_from_hex("#3a2b2b"), color_from_hex("#55404a"), color_from_hex("#413c2e")};
  s.texture = TextureKind::speckle;
  s.noise = 0.08;
  s.fill = FillStyle::outlined;
  return s;
}

CategorySet cats(std::initializer_list<Shape> shapes) { return CategorySet{std::vector<Shape>(shapes)}; }

}  // namespace

std::vector<std::string> scenario_preset_names() {
  return {"diff-both", "diff-domain", "diff-category", "diff-category-super", "seq3"};
}

ScenarioSpec scenario_preset(const std::string& name, std::uint64_t seed) {
  const CategorySet cats_a = cats({Shape::circle, Shape::square, Shape::triangle, Shape::cross});
  const CategorySet cats_b = cats({Shape::star, Shape::ring, Shape::diamond, Shape::bar});

  ScenarioSpec spec;
  spec.seed = seed;
  if (name == "diff-both") {
    spec.tasks = {{"taskA", style_dark_flat(), cats_a}, {"taskB", style_speckle_outline(), cats_b}};
  } else if (name == "diff-domain") {
    spec.tasks = {{"taskA", style_dark_flat(), cats_a}, {"taskB", style_light_stripes(), cats_a}};
  } else if (name == "diff-category") {
    spec.tasks = {{"taskA", style_dark_flat(), cats_a}, {"taskB", style_dark_flat(), cats_b}};
  } else if (name == "diff-category-super") {
    CategorySet all = cats({Shape::circle, Shape::square, Shape::triangle, Shape::cross, Shape::star,
                            Shape::ring, Shape::diamond, Shape::bar});
    spec.tasks = {{"taskA", style_dark_flat(), cats_a}, {"taskB", style_dark_flat(), all}};
  } else if (name == "seq3") {
    spec.tasks = {{"taskA", style_dark_flat(), cats({Shape::circle, Shape::square, Shape::triangle})},
                  {"taskB", style_light_stripes(), cats({Shape::cross, Shape::star, Shape::ring})},
                  {"taskC", style_speckle_outline(), cats({Shape::diamond, Shape::bar})}};
  } else {
    std::string valid;
    for (const auto& n : scenario_preset_names()) valid += " " + n;
    throw Error("unknown scenario preset '" + name + "'; valid presets:" + valid);
  }
  return spec;
}

ScenarioSpec scenario_spec_from_json_file(const std::filesystem::path& path) {
  json j = load_json_file(path, "scenario spec");
  ScenarioSpec spec;
  for (const auto& tj : j.at("tasks")) {
    TaskSpec t;
    t.name = tj.at("name").get<std::string>();
    t.style = style_from_json(tj.at("style"));
    for (const auto& c : tj.at("categories")) t.categories.shapes.push_back(shape_from_name(c.get<std::string>()));
    spec.tasks.push_back(std::move(t));
  }
  spec.train_per_task = j.value("train_per_task", spec.train_per_task);
  spec.test_per_task = j.value("test_per_task", spec.test_per_task);
  spec.image_h = j.value("image_height", spec.image_h);
  spec.image_w = j.value("image_width", spec.image_w);
  spec.min_objects = j.value("min_objects", spec.min_objects);
  spec.max_objects = j.value("max_objects", spec.max_objects);
  spec.seed = j.value("seed", spec.seed);
  spec.validate();
  return spec;
}

void scenario_spec_to_json_file(const ScenarioSpec& spec, const std::filesystem::path& path) {
  json j;
  j["tasks"] = json::array();
  for (const auto& t : spec.tasks) {
    json tj;
    tj["name"] = t.name;
    tj["style"] = style_to_json(t.style);
    tj["categories"] = t.categories.names();
    j["tasks"].push_back(tj);
  }
  j["train_per_task"] = spec.train_per_task;
  j["test_per_task"] = spec.test_per_task;
  j["image_height"] = spec.image_h;
  j["image_width"] = spec.image_w;
  j["min_objects"] = spec.min_objects;
  j["max_objects"] = spec.max_objects;
  j["seed"] = spec.seed;
  write_json_file(j, path);
}

}  // namespace incdet

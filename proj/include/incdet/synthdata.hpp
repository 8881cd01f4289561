#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "incdet/boxes.hpp"
#include "incdet/image.hpp"

namespace incdet {

enum class TextureKind { flat, stripes, speckle };
enum class FillStyle { solid, outlined };

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Color&) const = default;
};

Color color_from_hex(const std::string& hex);  // "#rrggbb"
std::string color_to_hex(Color c);

// Appearance knobs for one task's domain: background palette/texture,
// additive noise amplitude, and how object interiors are filled.
struct DomainStyle {
  std::vector<Color> palette;
  TextureKind texture = TextureKind::flat;
  double noise = 0.0;
  FillStyle fill = FillStyle::solid;

  void validate() const;
  bool operator==(const DomainStyle&) const = default;
};

inline constexpr double kMaxNoise = 0.25;

enum class Shape { circle, square, triangle, cross, star, ring, diamond, bar };
inline constexpr int kShapeCount = 8;

const char* shape_name(Shape s);
Shape shape_from_name(const std::string& name);

// Ordered list of shape categories; label ids are positions in the list.
struct CategorySet {
  std::vector<Shape> shapes;

  int size() const { return static_cast<int>(shapes.size()); }
  std::vector<std::string> names() const;
  void validate() const;  // non-empty, no duplicates
};

struct TaskSpec {
  std::string name;
  DomainStyle style;
  CategorySet categories;
};

struct ScenarioSpec {
  std::vector<TaskSpec> tasks;
  int train_per_task = 500;
  int test_per_task = 200;
  int image_h = 128;
  int image_w = 128;
  int min_objects = 1;
  int max_objects = 6;
  std::uint64_t seed = 1;

  void validate() const;
};

struct LabeledImage {
  std::string id;
  Image image;
  std::vector<BoundingBox> boxes;  // ground truth, no scores
};

struct TaskDataset {
  std::string name;
  std::vector<std::string> category_names;
  DomainStyle style;
  int image_h = 0;
  int image_w = 0;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;

  int num_classes() const { return static_cast<int>(category_names.size()); }
};

// Deterministic given (style, categories, n_objects, seed). Objects are
// placed with pairwise IoU <= 0.3; each carries one box tight to its extent.
LabeledImage render_image(const DomainStyle& style, const CategorySet& categories, int n_objects,
                          std::uint64_t seed, int image_h = 128, int image_w = 128,
                          const std::string& id = "image");

std::vector<TaskDataset> make_scenario(const ScenarioSpec& spec);

void save_dataset(const TaskDataset& ds, const std::filesystem::path& dir);
TaskDataset load_dataset(const std::filesystem::path& dir);

// Scenario presets: diff-both, diff-domain, diff-category, seq3.
std::vector<std::string> scenario_preset_names();
ScenarioSpec scenario_preset(const std::string& name, std::uint64_t seed);

ScenarioSpec scenario_spec_from_json_file(const std::filesystem::path& path);
void scenario_spec_to_json_file(const ScenarioSpec& spec, const std::filesystem::path& path);

}  // namespace incdet

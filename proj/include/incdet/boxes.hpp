#pragma once

#include <optional>

#include "incdet/util.hpp"

namespace incdet {

// Axis-aligned box in continuous image-pixel coordinates, corner encoded.
// Area is (x2-x1)*(y2-y1); there is no +1 pixel convention.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int label = 0;
  std::optional<double> score;  // absent on ground truth

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

inline bool same_box(const BoundingBox& a, const BoundingBox& b) {
  return a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2;
}

// Half-open cell ranges [r1,r2) x [c1,c2) on a feature grid.
struct GridRect {
  int r1 = 0, c1 = 0, r2 = 0, c2 = 0;

  bool empty() const { return r1 == r2 || c1 == c2; }
  int rows() const { return r2 - r1; }
  int cols() const { return c2 - c1; }

  bool contains(const GridRect& other) const {
    if (other.empty()) return true;
    return r1 <= other.r1 && c1 <= other.c1 && r2 >= other.r2 && c2 >= other.c2;
  }
};

// Intersection-over-union of two valid boxes; 0 when disjoint or edge-touching.
double iou(const BoundingBox& a, const BoundingBox& b);

// Intersection rectangle, or nullopt when the overlap has zero area.
std::optional<BoundingBox> intersect(const BoundingBox& a, const BoundingBox& b);

// Cell range covering floor(x1/stride)..ceil(x2/stride), clamped to the grid.
GridRect project_to_grid(const BoundingBox& b, int stride, int grid_h, int grid_w);

}  // namespace incdet

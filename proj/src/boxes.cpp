#include "incdet/boxes.hpp"

#include <algorithm>
#include <cmath>

namespace incdet {

double iou(const BoundingBox& a, const BoundingBox& b) {
  check(a.valid() && b.valid(), "iou: degenerate box");
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

std::optional<BoundingBox> intersect(const BoundingBox& a, const BoundingBox& b) {
  check(a.valid() && b.valid(), "intersect: degenerate box");
  BoundingBox r;
  r.x1 = std::max(a.x1, b.x1);
  r.y1 = std::max(a.y1, b.y1);
  r.x2 = std::min(a.x2, b.x2);
  r.y2 = std::min(a.y2, b.y2);
  if (!r.valid()) return std::nullopt;
  r.label = a.label;
  return r;
}

GridRect project_to_grid(const BoundingBox& b, int stride, int grid_h, int grid_w) {
  check(stride >= 1, "project_to_grid: stride must be >= 1");
  auto clamp_cell = [](double v, int lo, int hi) {
    return static_cast<int>(std::clamp(v, static_cast<double>(lo), static_cast<double>(hi)));
  };
  GridRect g;
  g.r1 = clamp_cell(std::floor(b.y1 / stride), 0, grid_h);
  g.r2 = clamp_cell(std::ceil(b.y2 / stride), g.r1, grid_h);
  g.c1 = clamp_cell(std::floor(b.x1 / stride), 0, grid_w);
  g.c2 = clamp_cell(std::ceil(b.x2 / stride), g.c1, grid_w);
  return g;
}

}  // namespace incdet

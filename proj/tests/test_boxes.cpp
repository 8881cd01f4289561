#include "incdet/boxes.hpp"

#include <random>

#include "doctest.h"

using namespace incdet;

namespace {

BoundingBox box(double x1, double y1, double x2, double y2) { return {x1, y1, x2, y2, 0, {}}; }

BoundingBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.0, 100.0);
  std::uniform_real_distribution<double> size(0.5, 40.0);
  BoundingBox b;
  b.x1 = pos(rng);
  b.y1 = pos(rng);
  b.x2 = b.x1 + size(rng);
  b.y2 = b.y1 + size(rng);
  return b;
}

}  // namespace

TEST_CASE("iou identity, disjoint and hand-computed overlap") {
  BoundingBox a = box(0, 0, 2, 2);
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(box(0, 0, 1, 1), box(2, 2, 3, 3)) == 0.0);
  // inter = 1, union = 4 + 4 - 1
  CHECK(iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("iou rejects degenerate boxes") {
  CHECK_THROWS_AS(iou(box(0, 0, 0, 1), box(0, 0, 1, 1)), Error);
  CHECK_THROWS_AS(iou(box(0, 0, 1, 1), box(2, 3, 2, 4)), Error);
}

TEST_CASE("edge-touching boxes have iou 0 and no intersection") {
  CHECK(iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0);
  CHECK_FALSE(intersect(box(0, 0, 1, 1), box(1, 0, 2, 1)).has_value());
}

TEST_CASE("intersect examples") {
  auto r = intersect(box(0, 0, 2, 2), box(1, 1, 3, 3));
  REQUIRE(r.has_value());
  CHECK(r->x1 == 1.0);
  CHECK(r->y1 == 1.0);
  CHECK(r->x2 == 2.0);
  CHECK(r->y2 == 2.0);

  BoundingBox a = box(3, 4, 7, 9);
  auto self = intersect(a, a);
  REQUIRE(self.has_value());
  CHECK(same_box(*self, a));

  CHECK_FALSE(intersect(box(0, 0, 1, 1), box(5, 5, 6, 6)).has_value());
}

TEST_CASE("project_to_grid examples") {
  GridRect g = project_to_grid(box(0, 0, 8, 8), 8, 4, 4);
  CHECK(g.r1 == 0);
  CHECK(g.r2 == 1);
  CHECK(g.c1 == 0);
  CHECK(g.c2 == 1);

  g = project_to_grid(box(4, 4, 20, 12), 8, 4, 4);
  CHECK(g.r1 == 0);
  CHECK(g.r2 == 2);
  CHECK(g.c1 == 0);
  CHECK(g.c2 == 3);

  // entirely right of the grid
  g = project_to_grid(box(100, 1, 110, 2), 8, 4, 4);
  CHECK(g.empty());
  CHECK(g.c1 <= g.c2);
}

TEST_CASE("iou symmetry, bounds and area identity over random boxes") {
  std::mt19937_64 rng(12345);
  for (int i = 0; i < 2000; ++i) {
    BoundingBox a = random_box(rng);
    BoundingBox b = random_box(rng);
    const double ab = iou(a, b);
    CHECK(ab == iou(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);

    const double inter_area = intersect(a, b) ? intersect(a, b)->area() : 0.0;
    const double union_area = a.area() + b.area() - inter_area;
    CHECK(inter_area == doctest::Approx(ab * union_area).epsilon(1e-9));
  }
}

TEST_CASE("iou is 1 iff boxes coincide") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 500; ++i) {
    BoundingBox a = random_box(rng);
    BoundingBox b = random_box(rng);
    if (iou(a, b) == 1.0) CHECK(same_box(a, b));
    CHECK(iou(a, a) == 1.0);
  }
}

TEST_CASE("projection of intersection is contained in either operand's projection") {
  std::mt19937_64 rng(4242);
  for (int i = 0; i < 1000; ++i) {
    BoundingBox a = random_box(rng);
    BoundingBox b = random_box(rng);
    auto inter = intersect(a, b);
    if (!inter) continue;
    GridRect gi = project_to_grid(*inter, 8, 16, 16);
    CHECK(project_to_grid(a, 8, 16, 16).contains(gi));
    CHECK(project_to_grid(b, 8, 16, 16).contains(gi));
  }
}

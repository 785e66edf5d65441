#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/geometry.hpp"
#include "dipolegrid/io.hpp"
#include "dipolegrid/random.hpp"

using namespace dipolegrid;

namespace {

RoiBox box(double x0, double x1, double y0, double y1, double z0, double z1) {
  RoiBox r;
  r.axes = {Interval{x0, x1}, Interval{y0, y1}, Interval{z0, z1}};
  return r;
}

}  // namespace

TEST_CASE("place_sensors puts 102 sensors on the upper hemisphere at the standoff radius") {
  const HeadModel head;
  const SensorArray s = place_sensors(head, 102, 7);
  REQUIRE(s.size() == 102);
  for (const Vec3& r : s.positions) {
    CHECK(r.z() >= 0.0);
    CHECK(r.norm() == doctest::Approx(10.5).epsilon(1e-12));
  }
  CHECK_NOTHROW(s.validate(head));
}

TEST_CASE("a single sensor lies outside the head") {
  HeadModel head;
  head.center = Vec3(1, -2, 3);
  head.radius = 4;
  const SensorArray s = place_sensors(head, 1, 99);
  REQUIRE(s.size() == 1);
  CHECK((s.positions[0] - head.center).norm() > head.radius);
}

TEST_CASE("sensor placement is deterministic in the seed") {
  const HeadModel head;
  const SensorArray a = place_sensors(head, 30, 5), b = place_sensors(head, 30, 5), c = place_sensors(head, 30, 6);
  CHECK(to_json(a).dump() == to_json(b).dump());
  CHECK(to_json(a).dump() != to_json(c).dump());
}

TEST_CASE("discretize places centers at cell midpoints") {
  const VoxelGrid g = discretize(box(0, 2, 0, 2, 0, 2), {2, 2, 2});
  REQUIRE(g.size() == 8);
  CHECK(g.center(0).isApprox(Vec3(0.5, 0.5, 0.5)));
  CHECK(g.center(7).isApprox(Vec3(1.5, 1.5, 1.5)));
  CHECK(g.center(1).isApprox(Vec3(1.5, 0.5, 0.5)));  // x varies fastest

  const VoxelGrid one = discretize(box(-1, 1, -1, 1, -1, 1), {1, 1, 1});
  REQUIRE(one.size() == 1);
  CHECK(one.center(0).norm() == 0.0);

  const VoxelGrid line = discretize(box(0, 3, 0, 1, 0, 1), {3, 1, 1});
  REQUIRE(line.size() == 3);
  CHECK(line.center(0).x() == doctest::Approx(0.5));
  CHECK(line.center(1).x() == doctest::Approx(1.5));
  CHECK(line.center(2).x() == doctest::Approx(2.5));
}

TEST_CASE("discretize rejects a split degenerate axis") {
  CHECK_THROWS_AS(discretize(box(0, 1, 2, 2, 0, 1), {2, 2, 2}), ValidationError);
  CHECK_THROWS_AS(discretize(box(0, 1, 0, 1, 0, 1), {0, 1, 1}), ValidationError);
  const VoxelGrid flat = discretize(box(0, 1, 2, 2, 0, 1), {2, 1, 2});
  CHECK(flat.size() == 4);
  CHECK(flat.cell_width(1) == 0.0);
  CHECK(flat.cell_volume() == doctest::Approx(0.25));
}

TEST_CASE("voxel_of maps points to half-open cells") {
  const VoxelGrid g = discretize(box(0, 2, 0, 2, 0, 2), {2, 2, 2});
  CHECK(voxel_of(g, Vec3(0.1, 0.1, 0.1)) == std::optional<std::size_t>(0));
  CHECK_FALSE(voxel_of(g, Vec3(5, 5, 5)).has_value());
  CHECK(voxel_of(g, Vec3(2, 2, 2)) == std::optional<std::size_t>(7));
  CHECK(voxel_of(g, Vec3(1, 0, 0)) == std::optional<std::size_t>(1));  // interior face belongs upward
}

TEST_CASE("every center maps back to its own voxel") {
  RandomStream rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    RoiBox r;
    for (auto& a : r.axes) {
      const double lo = -10 + 10 * rng.uniform();
      a = {lo, lo + 0.1 + 9 * rng.uniform()};
    }
    const Mesh m{1 + static_cast<int>(rng.next_u32() % 6), 1 + static_cast<int>(rng.next_u32() % 6),
                 1 + static_cast<int>(rng.next_u32() % 6)};
    const VoxelGrid g(r, m);
    for (std::size_t k = 0; k < g.size(); ++k) {
      REQUIRE(voxel_of(g, g.center(k)) == std::optional<std::size_t>(k));
      const auto ijk = g.unravel(k);
      REQUIRE(g.flat_index(ijk[0], ijk[1], ijk[2]) == k);
    }
    const VoxelGrid refined(r, {m[0] + 1, m[1] + 1, m[2] + 1});
    CHECK(refined.roi() == g.roi());
  }
}

TEST_CASE("clip_to intersects and collapses empty axes to the nearest point") {
  const RoiBox clip = bounding_box(HeadModel{});
  CHECK(clip == box(-10, 10, -10, 10, -10, 10));
  const RoiBox c = clip_to(box(-12, 3, 12, 14, 0, 1), clip);
  CHECK(c.axes[0].lo == -10);
  CHECK(c.axes[0].hi == 3);
  CHECK(c.axes[1].lo == 10);
  CHECK(c.axes[1].hi == 10);
  CHECK(clip.contains(c));
}

TEST_CASE("ROI validation") {
  CHECK_THROWS_AS(box(1, 0, 0, 1, 0, 1).validate(), ValidationError);
  CHECK_THROWS_AS(box(20, 30, 20, 30, 20, 30).validate_against(HeadModel{}), ValidationError);
  CHECK_NOTHROW(box(-1, 1, -1, 1, 0, 1).validate_against(HeadModel{}));
}

TEST_CASE("grids and sensors round-trip through JSON") {
  const VoxelGrid g(box(-1, 2, 0, 1, 3, 3), {3, 2, 1});
  const VoxelGrid back = grid_from_json(to_json(g));
  CHECK(back.roi() == g.roi());
  CHECK(back.mesh() == g.mesh());
  const SensorArray s = place_sensors(HeadModel{}, 5, 1);
  CHECK(to_json(sensors_from_json(to_json(s))).dump() == to_json(s).dump());
}

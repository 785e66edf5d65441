#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dipolegrid/dynamic.hpp"
#include "dipolegrid/errors.hpp"
#include "support.hpp"

using namespace dipolegrid;
using namespace testing;

namespace {

RoiBox box(double x0, double x1, double y0, double y1, double z0, double z1) {
  RoiBox r;
  r.axes = {Interval{x0, x1}, Interval{y0, y1}, Interval{z0, z1}};
  return r;
}

}  // namespace

TEST_CASE("shrink_roi of a one-hot posterior collapses and widens to one cell") {
  const VoxelGrid g(box(0, 4, 0, 4, 0, 4), {4, 4, 4});
  RowMatrix xi = RowMatrix::Zero(3, 64);
  xi(0, 5) = xi(1, 5) = xi(2, 5) = 1.0;
  std::array<bool, 3> widened{};
  const RoiBox r = shrink_roi(xi, g, 3.0, box(-10, 10, -10, 10, -10, 10), &widened);
  const Vec3 c = g.center(5);
  for (int i = 0; i < 3; ++i) {
    CHECK(widened[i]);
    CHECK(r.axes[i].width() == doctest::Approx(g.cell_width(i)));
    CHECK(r.axes[i].contains(c(i)));
  }
}

TEST_CASE("shrink_roi of a uniform posterior is symmetric about the grid center") {
  const VoxelGrid g(box(-2, 2, 0, 6, 1, 3), {4, 3, 2});
  const RowMatrix xi = RowMatrix::Constant(2, 24, 1.0 / 24);
  const RoiBox r = shrink_roi(xi, g, 1.0, box(-10, 10, -10, 10, -10, 10));
  const Vec3 c = g.roi().centroid();
  for (int i = 0; i < 3; ++i) {
    CHECK(r.axes[i].lo + r.axes[i].hi == doctest::Approx(2 * c(i)));
    CHECK(r.axes[i].width() > 0);
  }
  // sd of 4 equally spaced centers at spacing 1 is sqrt(5)/2.
  CHECK(r.axes[0].hi == doctest::Approx(std::sqrt(5.0) / 2));
}

TEST_CASE("shrink_roi respects the clip box") {
  RandomStream rng(1);
  const HeadModel head;
  const RoiBox clip = bounding_box(head);
  const VoxelGrid g(box(-8, 8, -8, 8, 0, 9), {5, 5, 5});
  for (int trial = 0; trial < 20; ++trial) {
    RowMatrix xi(4, 125);
    for (Eigen::Index t = 0; t < 4; ++t) {
      for (Eigen::Index k = 0; k < 125; ++k) xi(t, k) = rng.uniform();
      xi.row(t) /= xi.row(t).sum();
    }
    CHECK(clip.contains(shrink_roi(xi, g, 3.0, clip)));
  }
  CHECK_THROWS_AS(shrink_roi(RowMatrix::Zero(1, 3), g, 3.0, clip), ValidationError);
  CHECK_THROWS_AS(shrink_roi(RowMatrix::Constant(1, 125, 0.008), g, 0.0, clip), ValidationError);
}

TEST_CASE("next_mesh") {
  const RoiBox flat = box(0, 1, 2, 2, 0, 1);
  CHECK(next_mesh({10, 10, 10}, box(0, 1, 0, 1, 0, 1), 1, 25) == Mesh{11, 11, 11});
  CHECK(next_mesh({25, 24, 3}, box(0, 1, 0, 1, 0, 1), 2, 25) == Mesh{25, 25, 5});
  CHECK(next_mesh({4, 4, 4}, flat, 1, 25) == Mesh{5, 1, 5});
  CHECK(next_mesh({30, 4, 4}, box(0, 1, 0, 1, 0, 1), 1, 25) == Mesh{30, 5, 5});
  CHECK(next_mesh({4, 4, 4}, box(0, 1, 0, 1, 0, 1), 0, 25) == Mesh{4, 4, 4});
}

TEST_CASE("coverage_violations counts points outside") {
  Eigen::MatrixXd p(3, 3);
  p << 0.5, 0.5, 0.5, 2, 0.5, 0.5, 1, 1, 1;
  CHECK(coverage_violations(p, box(0, 1, 0, 1, 0, 1)) == 1);
  CHECK(coverage_violations(p, box(0, 2, 0, 1, 0, 1)) == 0);
}

TEST_CASE("dynamic fit without shrinking or refinement equals the fixed-grid fit") {
  RandomStream rng(2);
  const TinyInstance inst = tiny_instance(rng, 10);
  EmConfig cfg;
  cfg.max_iters = 6;
  DynamicConfig d;
  d.initial_roi = inst.grid.roi();
  d.initial_mesh = inst.grid.mesh();
  d.mesh_increment = 0;
  d.shrink = false;
  d.max_outer_iters = 6;
  const FitResult a = fit(inst.Y, inst.sensors, inst.grid, inst.params, cfg);
  const DynamicResult b = dynamic_fit(inst.Y, inst.sensors, inst.params, d, cfg);
  CHECK(a.params.A == b.params.A);
  CHECK(a.params.b == b.params.b);
  CHECK(a.params.sigma == b.params.sigma);
  CHECK(a.posterior.xi == b.posterior.xi);
  CHECK(a.trace.final_loglik == b.trace.final_loglik);
  REQUIRE(a.trace.iterations.size() == b.trace.iterations.size());
  for (std::size_t j = 0; j < a.trace.iterations.size(); ++j) {
    CHECK(a.trace.iterations[j].q == b.trace.iterations[j].q);
  }
}

TEST_CASE("dynamic fit refines the mesh and keeps ROIs inside the head") {
  RandomStream rng(3);
  const SensorArray sensors = ring_sensors(20);
  ModelParams p = small_params(20, Vec3(1, -1, 5), 1.0, 0.3, 1e-4);
  const VoxelGrid truth_grid(box(-1, 3, -3, 1, 3, 7), {8, 8, 8});
  const Eigen::MatrixXd Y = noisy_measurements(rng, p, truth_grid, sensors, 12, 0.01);
  DynamicConfig d;
  d.initial_roi = box(-6, 6, -6, 6, 2, 9);
  d.initial_mesh = {4, 4, 4};
  d.max_outer_iters = 5;
  d.mesh_cap = 7;
  EmConfig cfg;
  cfg.mask = UpdateMask::none();
  cfg.mask.b = true;
  const DynamicResult r = dynamic_fit(Y, sensors, p, d, cfg);
  const RoiBox head_box = bounding_box(d.head);
  Mesh prev{0, 0, 0};
  for (const auto& it : r.trace.iterations) {
    REQUIRE(it.meshes.size() == 1);
    for (int i = 0; i < 3; ++i) {
      if (it.rois[0].axes[i].width() > 0) CHECK(it.meshes[0][i] >= prev[i]);
      CHECK(it.meshes[0][i] <= 7);
    }
    prev = it.meshes[0];
    CHECK(head_box.contains(it.rois[0]));
  }
  for (Eigen::Index t = 0; t < r.posterior.xi.rows(); ++t) {
    CHECK(r.posterior.xi.row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("a nearly stationary source gives non-expanding ROIs") {
  RandomStream rng(4);
  const SensorArray sensors = ring_sensors(30);
  ModelParams p = small_params(30, Vec3(0, 0, 5), 0.5, 0.05, 1e-6);
  Eigen::MatrixXd Y(8, 30);
  const Eigen::VectorXd f = meg_field(DipoleState{Vec3(0.5, -0.5, 5.5), p.q_fixed[0]}, sensors);
  for (Eigen::Index t = 0; t < 8; ++t) Y.row(t) = f.transpose();
  DynamicConfig d;
  d.initial_roi = box(-3, 3, -3, 3, 2, 8);
  d.initial_mesh = {6, 6, 6};
  d.max_outer_iters = 4;
  d.mesh_increment = 0;
  EmConfig cfg;
  cfg.mask = UpdateMask::none();
  cfg.mask.b = true;
  const DynamicResult r = dynamic_fit(Y, sensors, p, d, cfg);
  CHECK(r.trace.iterations.size() >= 2);
  for (std::size_t j = 1; j < r.trace.iterations.size(); ++j) {
    CHECK(r.trace.iterations[j - 1].rois[0].contains(r.trace.iterations[j].rois[0]));
  }
  CHECK(r.grid.roi().contains(Vec3(0.5, -0.5, 5.5)));
}

TEST_CASE("dynamic config validation") {
  DynamicConfig d;
  d.initial_roi = box(0, 1, 0, 1, 0, 1);
  d.max_outer_iters = 0;
  CHECK_THROWS_AS(d.validate(), ValidationError);
  d.max_outer_iters = 1;
  d.sigma_multiplier = -1;
  CHECK_THROWS_AS(d.validate(), ValidationError);
  d.sigma_multiplier = 3;
  d.mesh_increment = -1;
  CHECK_THROWS_AS(d.validate(), ValidationError);
}

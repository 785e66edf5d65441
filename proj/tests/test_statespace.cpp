#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/forward.hpp"
#include "dipolegrid/io.hpp"
#include "dipolegrid/statespace.hpp"

using namespace dipolegrid;

namespace {

SimConfig case1_sim(int steps, std::uint64_t seed) {
  SimConfig c;
  c.sensors = place_sensors(c.head, 102, seed);
  c.params = case1_params(102);
  c.steps = steps;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("ar_mean examples") {
  ModelParams p = case1_params(4);
  Eigen::VectorXd x(6);
  x << -2, 1, 5, 3, 3, 3;
  Eigen::VectorXd expected(6);
  expected << -0.75, 0.3, 4.75, 3, 3, 3;
  CHECK((ar_mean(p, x) - expected).norm() < 1e-14);

  p.A.setIdentity();
  p.b.setZero();
  CHECK(ar_mean(p, x) == x);
  p.A.setZero();
  p.b.setConstant(0.5);
  CHECK(ar_mean(p, x) == p.b);
}

TEST_CASE("noise-free simulation stays at mu0") {
  SimConfig c = case1_sim(5, 1);
  c.params.sigma0.setZero();
  c.params.sigma.setZero();
  c.params.V.setZero();
  c.params.A.setIdentity();
  c.params.b.setZero();
  const Trajectory tr = simulate(c);
  const Eigen::VectorXd field =
      meg_field(DipoleState{c.params.mu0.head<3>(), c.params.mu0.segment<3>(3)}, c.sensors);
  for (int t = 0; t < 5; ++t) {
    CHECK(tr.states[t][0].location == Vec3(c.params.mu0.head<3>()));
    CHECK((tr.measurements.row(t).transpose() - field).norm() == 0.0);
  }
}

TEST_CASE("case 1 simulation shape, reproducibility and fixed point") {
  const Trajectory a = simulate(case1_sim(100, 4)), b = simulate(case1_sim(100, 4));
  CHECK(a.measurements.rows() == 100);
  CHECK(a.measurements.cols() == 102);
  CHECK(a.sources() == 1);
  CHECK(a.measurements == b.measurements);

  // Location block: diag A = (.75,.8,.9), b = (.75,-.5,.25), so the fixed
  // point solves (1 - a_i) x_i = b_i.
  const Vec3 fixed(0.75 / 0.25, -0.5 / 0.2, 0.25 / 0.1);
  const Eigen::MatrixXd loc = a.locations(0);
  const Vec3 late_mean = loc.bottomRows(60).colwise().mean().transpose();
  CHECK((late_mean - fixed).cwiseAbs().maxCoeff() < 1.5);
  for (int t = 0; t < 100; ++t) CHECK(loc.row(t).norm() < 10.0);
}

TEST_CASE("moments stay near their slow dynamics") {
  const Trajectory tr = simulate(case1_sim(100, 9));
  for (std::size_t t = 1; t < tr.steps(); ++t) {
    const Vec3 dq = tr.states[t][0].moment - tr.states[t - 1][0].moment;
    CHECK(dq.cwiseAbs().maxCoeff() < 5 * 0.01);
  }
}

TEST_CASE("measurement noise covariance matches V") {
  SimConfig c;
  c.sensors = place_sensors(c.head, 4, 2);
  c.params = case1_params(4);
  c.params.V << 2.0, 0.5, 0.0, 0.0, 0.5, 1.0, 0.2, 0.0, 0.0, 0.2, 1.5, -0.3, 0.0, 0.0, -0.3, 0.8;
  c.steps = 10000;
  c.seed = 11;
  const Trajectory tr = simulate(c);
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(4, 4);
  for (std::size_t t = 0; t < tr.steps(); ++t) {
    const Eigen::VectorXd u =
        tr.measurements.row(static_cast<Eigen::Index>(t)).transpose() - meg_field(tr.states[t][0], c.sensors);
    S += u * u.transpose();
  }
  S /= static_cast<double>(tr.steps());
  CHECK((S - c.params.V).norm() / c.params.V.norm() < 0.1);
}

TEST_CASE("case 2 has two sources") {
  SimConfig c;
  c.sensors = place_sensors(c.head, 102, 1);
  c.params = case2_params(102);
  c.steps = 10;
  c.seed = 1;
  const Trajectory tr = simulate(c);
  CHECK(tr.sources() == 2);
  CHECK(tr.measurements.rows() == 10);
}

TEST_CASE("invalid parameters are rejected") {
  SimConfig c = case1_sim(3, 1);
  c.params.sigma(0, 0) = -1.0;
  CHECK_THROWS_AS(simulate(c), ValidationError);
  c = case1_sim(0, 1);
  CHECK_THROWS_AS(simulate(c), ValidationError);
  ModelParams p = case1_params(3);
  p.b.resize(5);
  CHECK_THROWS_AS(p.validate(), ValidationError);
  CHECK_THROWS_AS(case1_params(3).validate(4), ValidationError);
}

TEST_CASE("trajectory CSV round trip and Y_ ingestion") {
  const Trajectory tr = simulate(case1_sim(7, 3));
  std::stringstream s;
  write_trajectory_csv(s, tr);
  const Trajectory back = read_trajectory_csv(s);
  CHECK(back.measurements == tr.measurements);
  CHECK(back.locations(0) == tr.locations(0));

  std::stringstream real("t,Y_1,Y_2,Y_3\n1,0.5,-1,2\n2,0.25,0,1e-3\n");
  const Trajectory r = read_trajectory_csv(real);
  CHECK(r.sources() == 0);
  CHECK(r.measurements.rows() == 2);
  CHECK(r.measurements(1, 2) == 1e-3);

  std::stringstream bad("t,Y_2,Y_1\n1,0,0\n");
  CHECK_THROWS_AS(read_trajectory_csv(bad), ValidationError);
}

TEST_CASE("parameters round-trip through JSON") {
  const ModelParams p = case2_params(6);
  const ModelParams q = params_from_json(to_json(p));
  CHECK(q.sources == 2);
  CHECK(q.A == p.A);
  CHECK(q.b == p.b);
  CHECK(q.V == p.V);
  CHECK(q.sigma0 == p.sigma0);
  json j = to_json(p);
  j["extra"] = 1;
  CHECK_THROWS_AS(params_from_json(j), ValidationError);
}

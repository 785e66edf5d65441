#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dipolegrid/errors.hpp"
#include "support.hpp"

using namespace dipolegrid;
using namespace testing;

namespace {

RoiBox cube(double lo, double hi) {
  RoiBox r;
  r.axes = {Interval{lo, hi}, Interval{lo, hi}, Interval{lo, hi}};
  return r;
}

// Case-1-like parameters with the location block replaced.
ModelParams loc_params(const Vec3& mu, double var0, const Eigen::Matrix3d& A, const Vec3& b, double var) {
  ModelParams p = case1_params(3);
  p.mu0.head<3>() = mu;
  p.sigma0.topLeftCorner<3, 3>() = var0 * Eigen::Matrix3d::Identity();
  p.A.topLeftCorner<3, 3>() = A;
  p.A.block<3, 3>(0, 3).setZero();
  p.b.head<3>() = b;
  p.sigma.topLeftCorner<3, 3>() = var * Eigen::Matrix3d::Identity();
  return p;
}

}  // namespace

TEST_CASE("build_initial examples") {
  const VoxelGrid g(cube(0, 3), {3, 3, 3});
  const ModelParams point = loc_params(g.center(13), 1e-12, Eigen::Matrix3d::Identity(), Vec3::Zero(), 1);
  const Eigen::VectorXd w = build_initial(point, g);
  CHECK(w(13) == doctest::Approx(1.0));
  CHECK(w.sum() - w(13) < 1e-300);

  const ModelParams iso = loc_params(Vec3(1.5, 1.5, 1.5), 0.7, Eigen::Matrix3d::Identity(), Vec3::Zero(), 1);
  const Eigen::VectorXd s = build_initial(iso, g);
  CHECK(s.sum() == doctest::Approx(1.0));
  for (std::size_t k = 0; k < g.size(); ++k) CHECK(s(static_cast<Eigen::Index>(k)) == doctest::Approx(s(26 - k)));

  const VoxelGrid one(cube(0, 1), {1, 1, 1});
  CHECK(build_initial(iso, one)(0) == doctest::Approx(1.0));
}

TEST_CASE("build_transition examples") {
  const VoxelGrid g(cube(0, 2), {2, 2, 2});
  const Eigen::MatrixXd frozen =
      build_transition(loc_params(Vec3::Ones(), 1, Eigen::Matrix3d::Identity(), Vec3::Zero(), 1e-12), g);
  CHECK((frozen - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-12);

  const Eigen::MatrixXd any =
      build_transition(loc_params(Vec3::Ones(), 1, 0.7 * Eigen::Matrix3d::Identity(), Vec3(0.2, 0, 0.1), 0.4), g);
  for (Eigen::Index l = 0; l < 8; ++l) CHECK(any.row(l).sum() == doctest::Approx(1.0).epsilon(1e-14));

  // Three cells along x; every step moves one cell width to the right.
  RoiBox line;
  line.axes = {Interval{0, 3}, Interval{0, 0}, Interval{0, 0}};
  const VoxelGrid g3(line, {3, 1, 1});
  const double s = 0.5;
  const Eigen::MatrixXd W =
      build_transition(loc_params(Vec3::Zero(), 1, Eigen::Matrix3d::Identity(), Vec3(1, 0, 0), s), g3);
  for (int l = 0; l < 3; ++l) {
    double hand[3], total = 0;
    for (int k = 0; k < 3; ++k) {
      const double d = (k + 0.5) - (l + 0.5 + 1.0);
      hand[k] = std::exp(-d * d / (2 * s));
      total += hand[k];
    }
    for (int k = 0; k < 3; ++k) CHECK(W(l, k) == doctest::Approx(hand[k] / total).epsilon(1e-13));
  }
  CHECK(W(0, 1) > W(0, 0));
  CHECK(W(1, 2) > W(1, 1));

  const ModelParams far = loc_params(Vec3::Zero(), 1, Eigen::Matrix3d::Identity(), Vec3(500, 0, 0), 1e-4);
  CHECK_THROWS_AS(build_transition(far, g3), NumericError);
}

TEST_CASE("build_emission examples") {
  SensorArray s;
  s.positions = {Vec3(0, 0, 12)};
  ModelParams p = case1_params(1);
  p.V(0, 0) = 0.3;
  RoiBox line;
  line.axes = {Interval{-1, 1}, Interval{0, 0}, Interval{5, 5}};
  const VoxelGrid g(line, {2, 1, 1});
  Eigen::MatrixXd Y(1, 1);
  Y << 0.05;
  const RowMatrix e = build_emission(Y, g, p, s);
  const Eigen::MatrixXd F = predicted_fields(g, s, p.q_fixed[0]);
  for (int k = 0; k < 2; ++k) {
    const double d = Y(0, 0) - F(k, 0);
    CHECK(e(0, k) == doctest::Approx(-0.5 * std::log(2 * std::numbers::pi * 0.3) - d * d / (2 * 0.3)));
  }

  const SensorArray many = ring_sensors(12);
  ModelParams q = case1_params(12);
  const VoxelGrid g8(cube(-2, 2), {2, 2, 2});
  const Eigen::MatrixXd fields = predicted_fields(g8, many, q.q_fixed[0]);
  const Eigen::MatrixXd Yk = fields.row(5);
  const RowMatrix a = build_emission(Yk, g8, q, many);
  Eigen::Index arg;
  a.row(0).maxCoeff(&arg);
  CHECK(arg == 5);
  q.V *= 2;
  const RowMatrix b = build_emission(Yk, g8, q, many);
  Eigen::Index arg2;
  b.row(0).maxCoeff(&arg2);
  CHECK(arg2 == 5);
  q.V(0, 0) = -1;
  CHECK_THROWS_AS(build_emission(Yk, g8, q, many), ValidationError);
}

TEST_CASE("forward-backward matches path enumeration") {
  RandomStream rng(17);
  for (int trial = 0; trial < 60; ++trial) {
    const int K = 1 + static_cast<int>(rng.next_u32() % 5);
    const int T = 1 + static_cast<int>(rng.next_u32() % 4);
    const DiscreteModel m = random_model(rng, K, T);
    const SmoothingResult r = smooth(m);
    const Enumeration e = enumerate_model(m);
    CHECK(max_rel_error(r.xi, e.xi) < 1e-10);
    CHECK(r.log_likelihood == doctest::Approx(e.log_likelihood).epsilon(1e-12));
    const auto eta = pairwise(m, r);
    REQUIRE(eta.size() == static_cast<std::size_t>(T - 1));
    for (int t = 0; t + 1 < T; ++t) CHECK(max_rel_error(eta[t], e.eta[t]) < 1e-10);
  }
}

TEST_CASE("single step and single state") {
  RandomStream rng(3);
  DiscreteModel m = random_model(rng, 4, 1);
  const SmoothingResult r = smooth(m);
  Eigen::VectorXd direct = (m.log_initial + m.log_emission.row(0).transpose()).array().exp();
  direct /= direct.sum();
  CHECK((r.xi.row(0).transpose() - direct).norm() < 1e-14);
  CHECK((r.xi - r.alpha).norm() < 1e-14);

  const DiscreteModel one = random_model(rng, 1, 5);
  const ForwardResult f = forward(one);
  const RowMatrix beta = backward(one, f);
  CHECK((f.alpha.array() - 1.0).abs().maxCoeff() < 1e-15);
  CHECK((beta.array() - 1.0).abs().maxCoeff() < 1e-14);
}

TEST_CASE("backward starts from ones and smoothing normalizes") {
  RandomStream rng(8);
  const DiscreteModel m = random_model(rng, 5, 6);
  const SmoothingResult r = smooth(m);
  CHECK((r.beta.row(5).array() == 1.0).all());
  for (Eigen::Index t = 0; t < 6; ++t) CHECK(r.xi.row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
  const auto eta = pairwise(m, r);
  for (std::size_t t = 0; t < eta.size(); ++t) {
    CHECK(eta[t].sum() == doctest::Approx(1.0).epsilon(1e-8));
    const auto ti = static_cast<Eigen::Index>(t);
    CHECK((eta[t].rowwise().sum().transpose() - r.xi.row(ti)).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((eta[t].colwise().sum() - r.xi.row(ti + 1)).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("uniform model gives uniform posteriors") {
  DiscreteModel m;
  m.log_initial = Eigen::VectorXd::Constant(4, std::log(0.25));
  m.transition = std::make_shared<DenseKernel>(Eigen::MatrixXd::Constant(4, 4, 0.25));
  m.log_emission = RowMatrix::Constant(3, 4, -2.0);
  const SmoothingResult r = smooth(m);
  CHECK((r.xi.array() - 0.25).abs().maxCoeff() < 1e-15);
}

TEST_CASE("total underflow is reported") {
  DiscreteModel m;
  m.log_initial = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd W(2, 2);
  W << 1, 0, 0, 1;
  m.transition = std::make_shared<DenseKernel>(W);
  m.log_emission = RowMatrix(2, 2);
  m.log_emission << 0, -INFINITY, -INFINITY, 0;
  CHECK_THROWS_AS(forward(m), NumericError);
}

TEST_CASE("Gaussian kernel row operations agree with the dense matrix") {
  const VoxelGrid g(RoiBox{{Interval{-2, 2}, Interval{-1, 3}, Interval{0, 2}}}, {4, 3, 2});
  Eigen::Matrix3d A;
  A << 0.8, 0.1, 0, -0.05, 0.9, 0, 0, 0.2, 0.7;
  Eigen::Matrix3d full;
  full << 0.5, 0.1, 0.05, 0.1, 0.4, 0, 0.05, 0, 0.3;
  RandomStream rng(21);
  for (bool diagonal : {true, false}) {
    for (PriorWeighting w : {PriorWeighting::kDensityVolume, PriorWeighting::kNormalized}) {
      LocationDynamics dyn;
      dyn.M = A;
      dyn.offset = Vec3(0.1, 0.2, 0.3);
      dyn.cov = diagonal ? Eigen::Matrix3d(full.diagonal().asDiagonal()) : full;
      const GaussianKernel kernel(g, dyn, w);
      CHECK(kernel.separable() == diagonal);
      const Eigen::MatrixXd D = kernel.dense();
      const auto K = static_cast<Eigen::Index>(g.size());
      if (w == PriorWeighting::kNormalized) {
        for (Eigen::Index l = 0; l < K; ++l) CHECK(D.row(l).sum() == doctest::Approx(1.0).epsilon(1e-13));
      }
      for (Eigen::Index l = 0; l < K; ++l) {
        // Independent evaluation of the weight.
        const Vec3 m = A * g.center(static_cast<std::size_t>(l)) + dyn.offset;
        for (Eigen::Index k = 0; k < K; ++k) {
          const Vec3 d = g.center(static_cast<std::size_t>(k)) - m;
          const double dens = std::exp(-0.5 * d.dot(dyn.cov.inverse() * d)) /
                              std::sqrt(std::pow(2 * std::numbers::pi, 3) * dyn.cov.determinant());
          double norm = 0;
          for (Eigen::Index j = 0; j < K; ++j) {
            const Vec3 e = g.center(static_cast<std::size_t>(j)) - m;
            norm += std::exp(-0.5 * e.dot(dyn.cov.inverse() * e)) /
                    std::sqrt(std::pow(2 * std::numbers::pi, 3) * dyn.cov.determinant());
          }
          const double expected = w == PriorWeighting::kNormalized ? dens / norm : dens * g.cell_volume();
          CHECK(D(l, k) == doctest::Approx(expected).epsilon(1e-12));
          CHECK(kernel.log_weight(static_cast<std::size_t>(l), static_cast<std::size_t>(k)) ==
                doctest::Approx(std::log(expected)).epsilon(1e-12));
        }
      }
      Eigen::VectorXd gvec(K);
      for (Eigen::Index k = 0; k < K; ++k) gvec(k) = rng.uniform();
      for (Eigen::Index l = 0; l < K; ++l) {
        Eigen::VectorXd acc = Eigen::VectorXd::Constant(K, 0.5);
        kernel.add_row(static_cast<std::size_t>(l), 2.0, std::span<double>(acc.data(), acc.size()));
        CHECK((acc - (Eigen::VectorXd::Constant(K, 0.5) + 2.0 * D.row(l).transpose())).norm() < 1e-13);
        double total = 0;
        Vec3 moment;
        const bool ok = kernel.contract(static_cast<std::size_t>(l), std::span<const double>(gvec.data(), gvec.size()), total, &moment);
        CHECK(total == doctest::Approx(D.row(l).dot(gvec)).epsilon(1e-12));
        if (ok) {
          Vec3 expected = Vec3::Zero();
          for (Eigen::Index k = 0; k < K; ++k) expected += D(l, k) * gvec(k) * g.center(static_cast<std::size_t>(k));
          CHECK((moment - expected).norm() < 1e-12 * (1 + expected.norm()));
        }
        std::vector<std::size_t> cols{0, static_cast<std::size_t>(K - 1), 3};
        std::vector<double> out(3);
        kernel.row(static_cast<std::size_t>(l), cols, out);
        for (int j = 0; j < 3; ++j) CHECK(out[j] == doctest::Approx(D(l, static_cast<Eigen::Index>(cols[j]))));
      }
    }
  }
}

TEST_CASE("grid model smoothing paths agree") {
  const SensorArray sensors = ring_sensors(10);
  const VoxelGrid g(cube(-2, 2), {3, 3, 3});
  const ModelParams p = small_params(10, Vec3::Zero(), 1.0, 0.8, 0.05);
  RandomStream rng(4);
  const Eigen::MatrixXd Y = noisy_measurements(rng, p, g, sensors, 6, 0.2);
  const DiscreteModel m = build_model(p, g, Y, sensors, PriorWeighting::kDensityVolume);

  Eigen::MatrixXd features(static_cast<Eigen::Index>(g.size()), 3);
  for (std::size_t k = 0; k < g.size(); ++k) features.row(static_cast<Eigen::Index>(k)) = g.center(k).transpose();
  SmoothOptions base;
  base.pair_features = &features;
  base.expected_log_transition = true;
  const SmoothingResult full = smooth(m, base);
  SmoothOptions fast = base;
  fast.features_are_centers = true;
  fast.expected_log_transition = false;
  fast.full_beta = false;
  const SmoothingResult quick = smooth(m, fast);
  CHECK((full.xi - quick.xi).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((full.pair_moment - quick.pair_moment).cwiseAbs().maxCoeff() < 1e-10);

  const auto eta = pairwise(m, full);
  Eigen::MatrixXd pm = Eigen::MatrixXd::Zero(3, 3);
  double elog = 0;
  const Eigen::MatrixXd W = m.transition->dense();
  for (const auto& e : eta) {
    pm += features.transpose() * e.transpose() * features;
    elog += (e.array() * W.array().log()).sum();
  }
  CHECK((full.pair_moment - pm).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(full.expected_log_transition == doctest::Approx(elog).epsilon(1e-12));

  const Enumeration en = enumerate_model(
      build_model(p, VoxelGrid(cube(-2, 2), {2, 2, 1 + 0}), Y.topRows(3), sensors, PriorWeighting::kNormalized));
  const SmoothingResult small =
      smooth(build_model(p, VoxelGrid(cube(-2, 2), {2, 2, 1}), Y.topRows(3), sensors, PriorWeighting::kNormalized));
  CHECK(max_rel_error(small.xi, en.xi) < 1e-10);
}

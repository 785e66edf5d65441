#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dipolegrid/em.hpp"
#include "dipolegrid/forward.hpp"
#include "dipolegrid/geometry.hpp"
#include "dipolegrid/hmm.hpp"
#include "dipolegrid/random.hpp"
#include "dipolegrid/statespace.hpp"

namespace testing {

using namespace dipolegrid;

// Exhaustive enumeration over all K^T paths of a discrete model. Posteriors
// are path weights summed and normalized, independent of the scaled
// recursions.
struct Enumeration {
  RowMatrix xi;
  std::vector<Eigen::MatrixXd> eta;  // eta[t-1] for t = 2..T
  double log_likelihood = 0.0;
  // Expected log-weight of the path under the posterior, per term.
  double e_log_initial = 0.0;
  double e_log_transition = 0.0;
  double e_log_emission = 0.0;
};

inline Enumeration enumerate_paths(const Eigen::VectorXd& log_initial, const Eigen::MatrixXd& log_W,
                                   const RowMatrix& log_emission) {
  const auto K = static_cast<int>(log_initial.size());
  const auto T = static_cast<int>(log_emission.rows());
  std::size_t paths = 1;
  for (int t = 0; t < T; ++t) paths *= static_cast<std::size_t>(K);

  std::vector<int> path(static_cast<std::size_t>(T));
  std::vector<double> logw(paths);
  double top = -INFINITY;
  for (std::size_t p = 0; p < paths; ++p) {
    std::size_t r = p;
    for (int t = 0; t < T; ++t) {
      path[t] = static_cast<int>(r % K);
      r /= K;
    }
    double lw = log_initial(path[0]) + log_emission(0, path[0]);
    for (int t = 1; t < T; ++t) lw += log_W(path[t - 1], path[t]) + log_emission(t, path[t]);
    logw[p] = lw;
    top = std::max(top, lw);
  }
  double total = 0.0;
  for (double lw : logw) total += std::exp(lw - top);

  Enumeration e;
  e.log_likelihood = top + std::log(total);
  e.xi = RowMatrix::Zero(T, K);
  for (int t = 1; t < T; ++t) e.eta.push_back(Eigen::MatrixXd::Zero(K, K));
  for (std::size_t p = 0; p < paths; ++p) {
    std::size_t r = p;
    for (int t = 0; t < T; ++t) {
      path[t] = static_cast<int>(r % K);
      r /= K;
    }
    const double w = std::exp(logw[p] - top) / total;
    if (w == 0.0) continue;
    e.e_log_initial += w * log_initial(path[0]);
    for (int t = 0; t < T; ++t) {
      e.xi(t, path[t]) += w;
      e.e_log_emission += w * log_emission(t, path[t]);
    }
    for (int t = 1; t < T; ++t) {
      e.eta[t - 1](path[t - 1], path[t]) += w;
      e.e_log_transition += w * log_W(path[t - 1], path[t]);
    }
  }
  return e;
}

inline Enumeration enumerate_model(const DiscreteModel& model) {
  const Eigen::MatrixXd W = model.transition->dense();
  return enumerate_paths(model.log_initial, W.array().log().matrix(), model.log_emission);
}

// Random model with strictly positive weights; `spread` scales the log range
// of the emissions.
inline DiscreteModel random_model(RandomStream& rng, int K, int T, double spread = 3.0) {
  DiscreteModel m;
  m.log_initial.resize(K);
  for (int k = 0; k < K; ++k) m.log_initial(k) = std::log(0.05 + rng.uniform());
  Eigen::MatrixXd W(K, K);
  for (int l = 0; l < K; ++l) {
    for (int k = 0; k < K; ++k) W(l, k) = 0.02 + rng.uniform();
  }
  m.transition = std::make_shared<DenseKernel>(W);
  m.log_emission.resize(T, K);
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < K; ++k) m.log_emission(t, k) = spread * (rng.uniform() - 0.5) - 40.0;
  }
  return m;
}

// Largest |a - b| / max(|b|, floor) over all entries.
template <class A, class B>
double max_rel_error(const A& a, const B& b, double floor = 1e-300) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double d = std::abs(a(i, j) - b(i, j));
      worst = std::max(worst, d / std::max(std::abs(b(i, j)), floor));
    }
  }
  return worst;
}

// A few sensors on a sphere of radius 11 around the origin.
inline SensorArray ring_sensors(int count) {
  HeadModel head;
  return place_sensors(head, count, 11);
}

// Single-source parameters with a location prior centered at `center`.
inline ModelParams small_params(int sensors, const Vec3& center, double loc_var, double step_var,
                                double noise_var) {
  ModelParams p = case1_params(sensors);
  p.mu0.head<3>() = center;
  p.sigma0.topLeftCorner<3, 3>() = loc_var * Eigen::Matrix3d::Identity();
  p.A.topLeftCorner<3, 3>() = 0.9 * Eigen::Matrix3d::Identity();
  p.A.block<3, 3>(0, 3).setZero();
  p.b.head<3>() = 0.1 * center;
  p.sigma.topLeftCorner<3, 3>() = step_var * Eigen::Matrix3d::Identity();
  p.V = noise_var * Eigen::MatrixXd::Identity(sensors, sensors);
  return p;
}

// Measurements of a dipole path through `grid` centers with Gaussian noise.
inline Eigen::MatrixXd noisy_measurements(RandomStream& rng, const ModelParams& p, const VoxelGrid& grid,
                                          const SensorArray& sensors, int T, double noise_sd) {
  Eigen::MatrixXd Y(T, static_cast<Eigen::Index>(sensors.size()));
  const Eigen::MatrixXd fields = predicted_fields(grid, sensors, p.q_fixed[0]);
  for (int t = 0; t < T; ++t) {
    const auto k = static_cast<Eigen::Index>(rng.next_u32() % grid.size());
    for (Eigen::Index l = 0; l < Y.cols(); ++l) Y(t, l) = fields(k, l) + noise_sd * rng.normal();
  }
  return Y;
}

struct TinyInstance {
  VoxelGrid grid;
  SensorArray sensors;
  ModelParams params;
  Eigen::MatrixXd Y;
};

// 2x2x2 grid inside the head with diffuse posteriors, so every closed-form
// update (including both covariances) is well posed.
inline TinyInstance tiny_instance(RandomStream& rng, int T) {
  RoiBox roi;
  roi.axes = {Interval{-2, 2}, Interval{-2, 2}, Interval{2, 6}};
  const VoxelGrid grid(roi, {2, 2, 2});
  const SensorArray sensors = ring_sensors(6);
  ModelParams p = small_params(6, Vec3(0, 0, 4), 1.5 + rng.uniform(), 1.0 + rng.uniform(), 4e-3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) p.A(i, j) += 0.1 * (rng.uniform() - 0.5);
  }
  const Eigen::MatrixXd Y = noisy_measurements(rng, p, grid, sensors, T, 0.06);
  return {grid, sensors, p, Y};
}

// Largest increase of Q (at the E-step's fixed xi, eta) from moving one
// updated location-block parameter of the M-step result by +-h. Symmetric
// matrices move entry pairs together; V moves as sigma^2 I by a relative h.
inline double best_perturbation_gain(const TinyInstance& inst, const UpdateMask& mask, double h, int* tried) {
  const PriorWeighting w = PriorWeighting::kDensityVolume;
  const EStepResult e = e_step(inst.params, inst.grid, inst.Y, inst.sensors, w);
  const ModelParams best = m_step(e.posterior.xi, e.eta, inst.grid, inst.Y, inst.sensors, inst.params, mask);
  auto Q = [&](const ModelParams& p) {
    return expected_complete_loglik(p, e.posterior.xi, e.eta, inst.grid, inst.Y, inst.sensors, w);
  };
  const double q0 = Q(best);
  double worst = -INFINITY;
  int n = 0;
  auto probe = [&](auto&& apply) {
    for (double sgn : {-1.0, 1.0}) {
      ModelParams p = best;
      apply(p, sgn * h);
      worst = std::max(worst, Q(p) - q0);
      ++n;
    }
  };
  for (int i = 0; i < 3; ++i) {
    if (mask.mu0) probe([&](ModelParams& p, double d) { p.mu0(i) += d; });
    if (mask.b) probe([&](ModelParams& p, double d) { p.b(i) += d; });
    for (int j = 0; j < 3; ++j) {
      if (mask.A) probe([&](ModelParams& p, double d) { p.A(i, j) += d; });
      if (j < i) continue;
      if (mask.sigma0) probe([&](ModelParams& p, double d) {
        p.sigma0(i, j) += d;
        if (i != j) p.sigma0(j, i) += d;
      });
      if (mask.sigma) probe([&](ModelParams& p, double d) {
        p.sigma(i, j) += d;
        if (i != j) p.sigma(j, i) += d;
      });
    }
  }
  if (mask.V) probe([&](ModelParams& p, double d) { p.V.diagonal().array() += d * p.V(0, 0); });
  if (tried) *tried = n;
  return worst;
}

struct TwoSourceInstance {
  std::vector<VoxelGrid> grids;
  SensorArray sensors;
  ModelParams params;
  Eigen::MatrixXd Y;
  std::vector<Eigen::MatrixXd> truth;  // T x 3 per source
};

// Two sources in separate boxes left and right of the midline; each moves
// along a random path of its voxel centers.
inline TwoSourceInstance two_source_instance(RandomStream& rng, const Mesh& mesh, int T, double noise_sd,
                                             int sensor_count = 12) {
  TwoSourceInstance inst;
  RoiBox left, right;
  left.axes = {Interval{-5, -1}, Interval{-2, 2}, Interval{3, 6}};
  right.axes = {Interval{1, 5}, Interval{-2, 2}, Interval{3, 6}};
  inst.grids = {VoxelGrid(left, mesh), VoxelGrid(right, mesh)};
  inst.sensors = ring_sensors(sensor_count);
  ModelParams p = case2_params(sensor_count);
  for (int n = 0; n < 2; ++n) {
    const int o = ModelParams::offset(n);
    const Vec3 c = inst.grids[static_cast<std::size_t>(n)].roi().centroid();
    p.mu0.segment<3>(o) = c;
    p.sigma0.block<3, 3>(o, o) = (1.5 + rng.uniform()) * Eigen::Matrix3d::Identity();
    p.A.block<3, 3>(o, o) = 0.9 * Eigen::Matrix3d::Identity();
    for (int i = 0; i < 3; ++i) p.A(o + i, o + i) += 0.1 * (rng.uniform() - 0.5);
    p.A.block<3, 3>(o, o + 3).setZero();
    p.b.segment<3>(o) = 0.1 * c;
    p.sigma.block<3, 3>(o, o) = (1.0 + rng.uniform()) * Eigen::Matrix3d::Identity();
  }
  p.V = noise_sd * noise_sd * Eigen::MatrixXd::Identity(sensor_count, sensor_count);
  inst.params = p;
  inst.Y.resize(T, sensor_count);
  inst.truth.assign(2, Eigen::MatrixXd(T, 3));
  for (int t = 0; t < T; ++t) {
    std::vector<DipoleState> states;
    for (int n = 0; n < 2; ++n) {
      const VoxelGrid& g = inst.grids[static_cast<std::size_t>(n)];
      const Vec3 c = g.center(rng.next_u32() % g.size());
      inst.truth[static_cast<std::size_t>(n)].row(t) = c.transpose();
      states.push_back({c, p.q_fixed[static_cast<std::size_t>(n)]});
    }
    const Eigen::VectorXd f = multi_source_field(states, inst.sensors);
    for (int l = 0; l < sensor_count; ++l) inst.Y(t, l) = f(l) + noise_sd * rng.normal();
  }
  return inst;
}

}  // namespace testing

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dipolegrid/forward.hpp"
#include "dipolegrid/geometry.hpp"

namespace dipolegrid {

/// Coordinates per source in the full state: location (3) then moment (3).
inline constexpr int kSourceDim = 6;

/// Model parameters for N uncorrelated sources. The state vector stacks
/// (p_1, q_1, ..., p_N, q_N); Sigma0, A and Sigma are block diagonal by source.
struct ModelParams {
  int sources = 1;
  Eigen::VectorXd mu0;
  Eigen::MatrixXd sigma0;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::MatrixXd sigma;
  /// Measurement noise covariance, L x L.
  Eigen::MatrixXd V;
  /// Moment used for inference, one per source.
  std::vector<Vec3> q_fixed;

  int state_dim() const { return kSourceDim * sources; }
  /// First state coordinate of source n.
  static int offset(int n) { return kSourceDim * n; }

  /// Dimension and symmetry checks; `sensor_count` < 0 skips the V size check.
  void validate(long sensor_count = -1) const;

  /// Parameters of source n alone (V shared).
  ModelParams source_block(int n) const;
  /// Overwrite the blocks of source n from a single-source parameter set.
  void set_source_block(int n, const ModelParams& single);

  /// Location mean / covariance blocks of the initial distribution.
  Vec3 initial_location_mean(int n) const;
  Eigen::Matrix3d initial_location_cov(int n) const;
  Eigen::Matrix3d transition_location_cov(int n) const;
};

/// Single-source benchmark ("case 1"), V = 6.25e-5 I_L.
ModelParams case1_params(int sensor_count);
/// Two-source benchmark ("case 2").
ModelParams case2_params(int sensor_count);

/// A * state + b.
Eigen::VectorXd ar_mean(const ModelParams& params, const Eigen::VectorXd& state);

/// Split a stacked state vector into per-source dipoles.
std::vector<DipoleState> unpack_state(const Eigen::VectorXd& state, int sources);
Eigen::VectorXd pack_state(const std::vector<DipoleState>& dipoles);

struct Trajectory {
  /// states[t][n]
  std::vector<std::vector<DipoleState>> states;
  /// T x L
  Eigen::MatrixXd measurements;

  std::size_t steps() const { return static_cast<std::size_t>(measurements.rows()); }
  int sources() const { return states.empty() ? 0 : static_cast<int>(states.front().size()); }
  /// T x 3 true locations of source n (only when states are present).
  Eigen::MatrixXd locations(int n) const;
};

struct SimConfig {
  ModelParams params;
  HeadModel head;
  SensorArray sensors;
  int steps = 100;
  std::uint64_t seed = 0;
  FieldConstants consts;
  /// Rejection attempts per step before giving up on keeping sources in the head.
  int max_resample = 1000;
};

/// Draw a trajectory of the AR(1) source model and its noisy measurements.
/// Source locations are kept inside the head by redrawing the evolution noise.
Trajectory simulate(const SimConfig& config);

/// Trajectory CSV: header `t,p1_x,p1_y,p1_z,q1_x,q1_y,q1_z,...,y_1,...,y_L`,
/// t counted from 1. Without states only `t,y_1..y_L` is written. The reader
/// also accepts Y_1..Y_L.
void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory);
void write_trajectory_csv(const std::string& path, const Trajectory& trajectory);
Trajectory read_trajectory_csv(std::istream& in);
Trajectory read_trajectory_csv(const std::string& path);

}  // namespace dipolegrid

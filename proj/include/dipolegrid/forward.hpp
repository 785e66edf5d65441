#pragma once

#include <span>

#include <Eigen/Dense>

#include "dipolegrid/geometry.hpp"

namespace dipolegrid {

/// Current dipole: location p (cm) and moment q.
struct DipoleState {
  Vec3 location = Vec3::Zero();
  Vec3 moment = Vec3::Zero();
};

/// Prefactor of the magnetic field (mu_0 / 4 pi). Normalized units by
/// default; 1e-7 gives SI.
struct FieldConstants {
  double kappa = 1.0;
};

/// Sensors closer than this to a dipole are rejected as singular, cm.
inline constexpr double kSingularDistance = 1e-6;

/// B_l = kappa (q x (r_l - p)) . e_z / |r_l - p|^3 for every sensor.
Eigen::VectorXd meg_field(const DipoleState& state, const SensorArray& sensors,
                          const FieldConstants& consts = {});

/// H_l = q . (r_l - p) / (4 pi sigma |r_l - p|^3), sigma = sensors.conductivity.
Eigen::VectorXd eeg_potential(const DipoleState& state, const SensorArray& sensors);

/// Forward model matching the sensor modality.
Eigen::VectorXd sensor_response(const DipoleState& state, const SensorArray& sensors,
                                const FieldConstants& consts = {});

/// Superposition of the per-source responses.
Eigen::VectorXd multi_source_field(std::span<const DipoleState> states, const SensorArray& sensors,
                                   const FieldConstants& consts = {});

}  // namespace dipolegrid

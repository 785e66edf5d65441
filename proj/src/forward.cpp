#include "dipolegrid/forward.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dipolegrid/errors.hpp"

namespace dipolegrid {

namespace {

Vec3 checked_offset(const Vec3& sensor, const Vec3& location, std::size_t l) {
  const Vec3 d = sensor - location;
  if (d.norm() < kSingularDistance) {
    throw NumericError("sensor " + std::to_string(l) + " coincides with the dipole location");
  }
  return d;
}

}  // namespace

Eigen::VectorXd meg_field(const DipoleState& state, const SensorArray& sensors,
                          const FieldConstants& consts) {
  if (!(consts.kappa > 0.0)) throw ValidationError("kappa must be positive");
  Eigen::VectorXd field(sensors.size());
  for (std::size_t l = 0; l < sensors.size(); ++l) {
    const Vec3 d = checked_offset(sensors.positions[l], state.location, l);
    const double r = d.norm();
    // z-component of q x d
    const double tangential = state.moment(0) * d(1) - state.moment(1) * d(0);
    field(static_cast<Eigen::Index>(l)) = consts.kappa * tangential / (r * r * r);
  }
  return field;
}

Eigen::VectorXd eeg_potential(const DipoleState& state, const SensorArray& sensors) {
  if (!(sensors.conductivity > 0.0)) throw ValidationError("EEG conductivity must be positive");
  const double prefactor = 1.0 / (4.0 * std::numbers::pi * sensors.conductivity);
  Eigen::VectorXd potential(sensors.size());
  for (std::size_t l = 0; l < sensors.size(); ++l) {
    const Vec3 d = checked_offset(sensors.positions[l], state.location, l);
    const double r = d.norm();
    potential(static_cast<Eigen::Index>(l)) = prefactor * state.moment.dot(d) / (r * r * r);
  }
  return potential;
}

Eigen::VectorXd sensor_response(const DipoleState& state, const SensorArray& sensors,
                                const FieldConstants& consts) {
  return sensors.modality == Modality::kMeg ? meg_field(state, sensors, consts)
                                            : eeg_potential(state, sensors);
}

Eigen::VectorXd multi_source_field(std::span<const DipoleState> states, const SensorArray& sensors,
                                   const FieldConstants& consts) {
  if (states.empty()) throw ValidationError("multi_source_field needs at least one source");
  Eigen::VectorXd total = sensor_response(states.front(), sensors, consts);
  for (std::size_t n = 1; n < states.size(); ++n) total += sensor_response(states[n], sensors, consts);
  return total;
}

}  // namespace dipolegrid

#pragma once

#include <array>
#include <optional>

#include "dipolegrid/em.hpp"
#include "dipolegrid/geometry.hpp"
#include "dipolegrid/hmm.hpp"
#include "dipolegrid/statespace.hpp"

namespace dipolegrid {

struct DynamicConfig {
  RoiBox initial_roi;
  Mesh initial_mesh{10, 10, 10};
  int mesh_increment = 1;
  /// Intervals are posterior mean -/+ this many posterior sds.
  double sigma_multiplier = 3.0;
  int max_outer_iters = 15;
  /// Upper bound on every K_i.
  int mesh_cap = 25;
  /// false keeps the initial ROI (mesh refinement only).
  bool shrink = true;
  /// Run EM to convergence on each grid before shrinking, instead of
  /// shrinking after every iteration.
  bool shrink_after_convergence = false;
  /// Shrunken boxes are clipped to this head's bounding box.
  HeadModel head;

  void validate() const;
};

/// Per axis i: mu_ti = sum_k xi_tk c_ki, sd_ti likewise, and the interval
/// [min_t (mu - m sd), max_t (mu + m sd)], clipped to `clip`. A zero-width
/// result is widened to one cell width of `grid`; `widened` reports which.
RoiBox shrink_roi(const RowMatrix& xi, const VoxelGrid& grid, double multiplier, const RoiBox& clip,
                  std::array<bool, 3>* widened = nullptr);

/// Next mesh: K_i + increment up to the cap; degenerate axes stay at 1.
Mesh next_mesh(const Mesh& mesh, const RoiBox& roi, int increment, int cap);

/// Number of (t, location) pairs of the true trajectory outside `roi`.
int coverage_violations(const Eigen::MatrixXd& true_locations, const RoiBox& roi);

struct DynamicResult {
  ModelParams params;
  /// Grid of the final posterior (the last shrunken ROI).
  VoxelGrid grid;
  EmTrace trace;
  SmoothingResult posterior;
};

/// EM with ROI shrinking and mesh refinement between iterations. With
/// `true_locations` (T x 3) the trace counts coverage violations.
DynamicResult dynamic_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                          const ModelParams& init, const DynamicConfig& dconfig, const EmConfig& config,
                          const Eigen::MatrixXd* true_locations = nullptr);

}  // namespace dipolegrid

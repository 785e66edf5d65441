#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dipolegrid/dynamic.hpp"
#include "dipolegrid/em.hpp"
#include "dipolegrid/geometry.hpp"
#include "dipolegrid/hmm.hpp"
#include "dipolegrid/statespace.hpp"

namespace dipolegrid {

/// Product of per-source grids. Flat index k = k_1 + K_1 (k_2 + K_2 (...)),
/// so the first source varies fastest.
class JointGrid {
 public:
  explicit JointGrid(std::vector<VoxelGrid> grids);

  std::size_t size() const { return size_; }
  int sources() const { return static_cast<int>(grids_.size()); }
  const std::vector<VoxelGrid>& grids() const { return grids_; }
  const VoxelGrid& grid(int n) const { return grids_.at(static_cast<std::size_t>(n)); }

  std::size_t flat_index(std::span<const std::size_t> idx) const;
  std::vector<std::size_t> unravel(std::size_t k) const;

 private:
  std::vector<VoxelGrid> grids_;
  std::size_t size_ = 1;
};

inline constexpr std::size_t kDefaultJointCap = 4096;

struct JointFit {
  ModelParams params;
  EmTrace trace;
  /// Posterior over the joint states.
  SmoothingResult posterior;
  /// Per-source marginals of posterior.xi.
  std::vector<RowMatrix> marginals;
};

/// EM on the joint chain of all sources (independent per-source dynamics,
/// summed fields).
JointFit joint_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors, const JointGrid& joint,
                   const ModelParams& init, const EmConfig& config, std::size_t cap = kDefaultJointCap);

/// Dense joint transition matrix (for inspection and tests).
Eigen::MatrixXd joint_transition(const ModelParams& params, const JointGrid& joint, PriorWeighting weighting);

/// Marginal of source n: sums the joint posterior over the other indices.
RowMatrix marginalize(const RowMatrix& joint_xi, const JointGrid& joint, int n);

/// T x 3 posterior mean locations sum_k xi_tk c_k.
Eigen::MatrixXd posterior_means(const RowMatrix& xi, const VoxelGrid& grid);

struct SwitchState {
  /// zeta: T x K_n marginal posterior of each source.
  std::vector<RowMatrix> marginals;
  /// T x 3 zeta-weighted mean location of each source, used to condition the
  /// other sources' chains.
  std::vector<Eigen::MatrixXd> conditioning;
  std::vector<VoxelGrid> grids;
  /// log p(Y_eff | params) of each source's final conditional chain.
  std::vector<double> log_likelihoods;
};

struct SwitchFit {
  ModelParams params;
  EmTrace trace;
  SwitchState state;
};

/// EM with one conditional chain per source. In every iteration the sources
/// are visited in ascending order; source n sees the measurements minus the
/// fields of the other sources at their current conditioning locations
/// (already updated for sources before n, previous sweep for sources after
/// n). Conditioning starts from the discretized prior. Each chain's E-step
/// is followed by the closed-form update of its own block.
SwitchFit switch_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                     const std::vector<VoxelGrid>& grids, const ModelParams& init, const EmConfig& config);

/// switch_fit with per-source ROI shrinking and mesh refinement after every
/// sweep. `true_locations` (one T x 3 matrix per source) enables coverage
/// counting.
SwitchFit dynamic_switch_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                             const ModelParams& init, const DynamicConfig& dconfig, const EmConfig& config,
                             const std::vector<Eigen::MatrixXd>* true_locations = nullptr);

/// Long format: source,t,k,x,y,z,xi (source and t from 1, k from 0); zero
/// entries are skipped.
void write_marginals_csv(std::ostream& out, const std::vector<VoxelGrid>& grids,
                         const std::vector<RowMatrix>& marginals);

}  // namespace dipolegrid

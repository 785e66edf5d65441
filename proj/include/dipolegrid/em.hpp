#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dipolegrid/forward.hpp"
#include "dipolegrid/geometry.hpp"
#include "dipolegrid/hmm.hpp"
#include "dipolegrid/statespace.hpp"

namespace dipolegrid {

/// Which parameter groups the M-step may change.
struct UpdateMask {
  bool mu0 = false;
  bool sigma0 = false;
  bool A = true;
  bool b = true;
  bool sigma = false;
  bool V = false;

  static UpdateMask none() { return {false, false, false, false, false, false}; }
  static UpdateMask all() { return {true, true, true, true, true, true}; }
  /// Names: mu0, Sigma0, A, b, Sigma, V.
  static UpdateMask parse(const std::vector<std::string>& names);
  std::vector<std::string> names() const;
  bool any() const { return mu0 || sigma0 || A || b || sigma || V; }
};

struct Constraints {
  /// Keep only the diagonal of the Sigma update.
  bool diagonal_sigma = false;
  /// Project the V update onto sigma^2 I with sigma^2 = trace / L.
  bool scalar_V = true;
  /// Estimate only the location block of A; moment rows and columns are set
  /// to zero (the moment is fixed, so they are not identifiable).
  bool location_block_only_A = true;
  /// Added to the regressor covariance in the A update; 0 means none.
  double ridge = 0.0;
};

enum class StoppingRule {
  /// Stop when the M-step gain Q(new|old) - Q(old|old) <= tol |Q(new|old)|.
  kQGain,
  /// Stop when successive log-likelihoods differ by <= tol |loglik|.
  kLogLikelihood,
};

struct EmConfig {
  UpdateMask mask;
  int max_iters = 100;
  double tol = 1e-6;
  StoppingRule stopping = StoppingRule::kQGain;
  Constraints constraints;
  PriorWeighting weighting = PriorWeighting::kDensityVolume;
  /// Throw MonotonicityViolation instead of only counting it.
  bool strict_monotonicity = true;
  double monotonicity_tol = 1e-9;
  FieldConstants consts;

  void validate() const;
};

/// Largest absolute entry change per parameter group between two iterates.
struct ParamChange {
  double mu0 = 0.0, sigma0 = 0.0, A = 0.0, b = 0.0, sigma = 0.0, V = 0.0;
};
ParamChange param_change(const ModelParams& before, const ModelParams& after);

struct EmIteration {
  int iteration = 0;
  /// Q(theta_j | theta_{j-1}) and Q(theta_{j-1} | theta_{j-1}).
  double q = 0.0;
  double q_prev = 0.0;
  /// log p(Y | theta_{j-1}) on the grid used in this iteration.
  double loglik = 0.0;
  ParamChange change;
  /// One entry per source: ROI and mesh used in this iteration's E-step.
  std::vector<RoiBox> rois;
  std::vector<Mesh> meshes;
  /// Simulated true locations outside the ROI (dynamic runs with truth only).
  int coverage_violations = 0;
};

struct EmTrace {
  std::vector<EmIteration> iterations;
  bool converged = false;
  int monotonicity_violations = 0;
  /// log p(Y | final params) on the final grid.
  double final_loglik = 0.0;
};

void write_trace_csv(std::ostream& out, const EmTrace& trace);

/// Sums of posterior-weighted voxel features x_k (location coordinates of the
/// sources in the chain, 3 per source). With them Q and the closed-form
/// updates need no further pass over the posterior.
struct SufficientStats {
  int steps = 0;
  Eigen::VectorXd first_mean;      // sum_k xi_1k x_k
  Eigen::MatrixXd first_moment;    // sum_k xi_1k x_k x_k^T
  Eigen::VectorXd next_sum;        // sum_{t>=2} sum_k xi_tk x_k
  Eigen::VectorXd prev_sum;        // sum_{t<=T-1} sum_k xi_tk x_k
  Eigen::MatrixXd next_moment;     // sum_{t>=2} sum_k xi_tk x_k x_k^T
  Eigen::MatrixXd prev_moment;     // sum_{t<=T-1} sum_k xi_tk x_k x_k^T
  Eigen::MatrixXd cross_moment;    // sum_{t>=2} sum_{l,k} eta_t(l,k) x_k x_l^T
  /// sum_t sum_k xi_tk log N(Y_t; B(d_k), V) at the V of the E-step.
  double emission_term = 0.0;
  Eigen::MatrixXd emission_V;
  /// sum_t sum_k xi_tk (Y_t - B(d_k))(Y_t - B(d_k))^T, when requested.
  std::optional<Eigen::MatrixXd> residual_scatter;
};

/// A hidden chain over one source's grid or the joint grid of several
/// sources (first source varying fastest in the flat index).
class LatentChain {
 public:
  LatentChain(const VoxelGrid& grid, int source, const Eigen::MatrixXd& measurements,
              const SensorArray& sensors, const Vec3& moment, const FieldConstants& consts = {});
  LatentChain(std::vector<VoxelGrid> grids, std::vector<int> sources, const Eigen::MatrixXd& measurements,
              const SensorArray& sensors, const std::vector<Vec3>& moments,
              const FieldConstants& consts = {});

  std::size_t states() const { return static_cast<std::size_t>(features_.rows()); }
  const std::vector<VoxelGrid>& grids() const { return grids_; }
  const std::vector<int>& sources() const { return sources_; }
  const Eigen::MatrixXd& features() const { return features_; }
  const Eigen::MatrixXd& fields() const { return fields_; }
  const Eigen::MatrixXd& measurements() const { return measurements_; }
  /// Replace the (effective) measurements, e.g. after removing other sources.
  void set_measurements(const Eigen::MatrixXd& measurements);

  /// Per-source index of joint state k.
  std::vector<std::size_t> unravel(std::size_t k) const;

  DiscreteModel model(const ModelParams& params, PriorWeighting weighting) const;

  struct EStep {
    SmoothingResult posterior;
    SufficientStats stats;
    /// Per-source marginals (T x K_n), kept for the normalized-weighting Q.
    std::vector<RowMatrix> marginals;
  };
  EStep e_step(const ModelParams& params, PriorWeighting weighting, bool residual_scatter,
               bool full_beta = false) const;

  /// Q(params | E-step posterior) from the sufficient statistics.
  double q_value(const ModelParams& params, const EStep& e, PriorWeighting weighting) const;

  /// Closed-form updates for the sources of this chain (and V).
  ModelParams m_step(const ModelParams& params, const SufficientStats& stats, const UpdateMask& mask,
                     const Constraints& constraints) const;

  SufficientStats stats_from(const RowMatrix& xi, const std::vector<Eigen::MatrixXd>& eta,
                             const ModelParams& params, bool residual_scatter) const;

 private:
  void finish_stats(const RowMatrix& xi, const ModelParams& params, bool residual_scatter,
                    const RowMatrix& log_emission, SufficientStats& s) const;

  std::vector<VoxelGrid> grids_;
  std::vector<int> sources_;
  std::vector<std::size_t> sizes_;
  Eigen::MatrixXd features_;
  Eigen::MatrixXd fields_;
  Eigen::MatrixXd measurements_;
};

/// Starting point when the caller has none: prior centered on the ROI
/// centroid with sd = width/4, A = 0.8 I and b = 0.2 centroid on the location
/// block (fixed point at the centroid), Sigma = squared voxel widths.
/// Moment blocks: mean q, A = I, b = 0, variances 1e-4.
ModelParams default_initial_params(const RoiBox& roi, const Mesh& mesh, const std::vector<Vec3>& moments,
                                   long sensor_count, double noise_variance);

struct EStepResult {
  SmoothingResult posterior;
  std::vector<Eigen::MatrixXd> eta;
};

/// Posterior and dense pairwise posteriors under params (single source).
EStepResult e_step(const ModelParams& params, const VoxelGrid& grid, const Eigen::MatrixXd& measurements,
                   const SensorArray& sensors, PriorWeighting weighting = PriorWeighting::kDensityVolume,
                   const FieldConstants& consts = {});

/// Closed-form updates from explicit xi and eta. Parameters outside `mask`
/// are copied from `params`.
ModelParams m_step(const RowMatrix& xi, const std::vector<Eigen::MatrixXd>& eta, const VoxelGrid& grid,
                   const Eigen::MatrixXd& measurements, const SensorArray& sensors, const ModelParams& params,
                   const UpdateMask& mask, const Constraints& constraints = {},
                   const FieldConstants& consts = {});

/// The three-term Q evaluated term by term from xi, eta and the voxel
/// log-weights of `params`.
double expected_complete_loglik(const ModelParams& params, const RowMatrix& xi,
                                const std::vector<Eigen::MatrixXd>& eta, const VoxelGrid& grid,
                                const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                                PriorWeighting weighting = PriorWeighting::kDensityVolume,
                                const FieldConstants& consts = {});

struct FitResult {
  ModelParams params;
  EmTrace trace;
  /// Posterior under the final parameters.
  SmoothingResult posterior;
  VoxelGrid grid;
};

/// EM on a fixed chain. `posterior` is computed under the final parameters.
struct ChainFit {
  ModelParams params;
  EmTrace trace;
  SmoothingResult posterior;
};
ChainFit fit_chain(const LatentChain& chain, const ModelParams& init, const EmConfig& config);

/// EM on a fixed grid (single source).
FitResult fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors, const VoxelGrid& grid,
              const ModelParams& init, const EmConfig& config);

/// Helper shared by the EM drivers: checks the M-step gain and the
/// likelihood sequence, throwing or counting per the config.
void check_monotone(const EmConfig& config, EmTrace& trace, double before, double after, const char* what,
                    int iteration);

/// Max-abs error of the location blocks of A and b against the truth.
double location_A_error(const ModelParams& estimate, const ModelParams& truth);
double location_b_error(const ModelParams& estimate, const ModelParams& truth);

}  // namespace dipolegrid

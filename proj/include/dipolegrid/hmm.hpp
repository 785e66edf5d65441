#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dipolegrid/forward.hpp"
#include "dipolegrid/geometry.hpp"
#include "dipolegrid/io.hpp"
#include "dipolegrid/statespace.hpp"

namespace dipolegrid {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// How Gaussian densities become voxel weights.
///
/// kDensityVolume: w_k = N(c_k; m, S) * |V_k|, the midpoint rule for the
/// probability of cell k. Rows sum to one only approximately, but every
/// log-weight is a log-Gaussian plus a constant, so the closed-form M-step is
/// the exact maximizer of Q and EM is monotone.
///
/// kNormalized: w_k = N(c_k; m, S) / sum_j N(c_j; m, S). Proper probabilities
/// on the grid; the M-step then ignores the normalizer's parameter dependence.
enum class PriorWeighting { kDensityVolume, kNormalized };

/// Location part of one source's AR(1) step: p_t ~ N(M p_{t-1} + offset, cov).
/// offset folds in the moment columns of A applied to the fixed moment.
struct LocationDynamics {
  Eigen::Matrix3d M = Eigen::Matrix3d::Identity();
  Vec3 offset = Vec3::Zero();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Identity();
};

LocationDynamics location_dynamics(const ModelParams& params, int source);

/// Row-access interface to a K x K transition weight matrix W(l, k).
class TransitionKernel {
 public:
  virtual ~TransitionKernel() = default;
  virtual std::size_t size() const = 0;
  /// out[j] = W(l, cols[j]).
  virtual void row(std::size_t l, std::span<const std::size_t> cols, std::span<double> out) const = 0;
  /// out[k] = W(l, k) for every k.
  virtual void full_row(std::size_t l, std::span<double> out) const = 0;
  virtual double log_weight(std::size_t l, std::size_t k) const = 0;
  /// out[k] += a W(l, k) for every k.
  virtual void add_row(std::size_t l, double a, std::span<double> out) const;
  /// Returns sum_k W(l, k) g[k] over all K entries of g. With `moment`, also
  /// sets *moment = sum_k W(l, k) g[k] c_k for kernels that know voxel
  /// centers c_k; returns false there if they do not.
  virtual bool contract(std::size_t l, std::span<const double> g, double& total, Vec3* moment) const;

  Eigen::MatrixXd dense() const;
};

/// Explicit matrix.
class DenseKernel final : public TransitionKernel {
 public:
  explicit DenseKernel(Eigen::MatrixXd weights);
  std::size_t size() const override { return static_cast<std::size_t>(w_.rows()); }
  void row(std::size_t l, std::span<const std::size_t> cols, std::span<double> out) const override;
  void full_row(std::size_t l, std::span<double> out) const override;
  double log_weight(std::size_t l, std::size_t k) const override;
  const Eigen::MatrixXd& matrix() const { return w_; }

 private:
  Eigen::MatrixXd w_;
};

/// Gaussian AR step evaluated on a voxel grid, computed on demand. A diagonal
/// covariance factorizes the density over axes, so a row costs K_1+K_2+K_3
/// exponentials plus two products per entry.
class GaussianKernel final : public TransitionKernel {
 public:
  GaussianKernel(const VoxelGrid& grid, const LocationDynamics& dynamics, PriorWeighting weighting);

  std::size_t size() const override { return grid_.size(); }
  void row(std::size_t l, std::span<const std::size_t> cols, std::span<double> out) const override;
  void full_row(std::size_t l, std::span<double> out) const override;
  double log_weight(std::size_t l, std::size_t k) const override;
  void add_row(std::size_t l, double a, std::span<double> out) const override;
  bool contract(std::size_t l, std::span<const double> g, double& total, Vec3* moment) const override;

  /// log sum_k N(c_k; mean_l, cov), whatever the weighting.
  double log_normalizer(std::size_t l) const;
  bool separable() const { return separable_; }

 private:
  struct RowFactors {
    std::array<std::vector<double>, 3> axis;
    double scale = 1.0;
  };
  Vec3 mean_of(std::size_t l) const;
  void factors(std::size_t l, RowFactors& f) const;
  double log_density(const Vec3& x, const Vec3& mean) const;

  VoxelGrid grid_;
  LocationDynamics dyn_;
  PriorWeighting weighting_;
  bool separable_ = false;
  Eigen::Matrix3d precision_;
  double log_det_ = 0.0;
  double log_volume_ = 0.0;
  std::vector<std::array<int, 3>> ijk_;
  std::array<std::vector<double>, 3> axis_centers_;
};

/// W((l_1..l_N), (k_1..k_N)) = prod_n W_n(l_n, k_n) over a joint index with
/// the first source varying fastest.
class ProductKernel final : public TransitionKernel {
 public:
  explicit ProductKernel(std::vector<Eigen::MatrixXd> factors);

  std::size_t size() const override { return size_; }
  void row(std::size_t l, std::span<const std::size_t> cols, std::span<double> out) const override;
  void full_row(std::size_t l, std::span<double> out) const override;
  double log_weight(std::size_t l, std::size_t k) const override;

 private:
  std::vector<Eigen::MatrixXd> factors_;
  std::vector<std::size_t> sizes_;
  std::size_t size_ = 1;
};

struct DiscreteModel {
  Eigen::VectorXd log_initial;
  std::shared_ptr<const TransitionKernel> transition;
  /// T x K, log P(Y_t | v_tk = 1).
  RowMatrix log_emission;

  std::size_t states() const { return static_cast<std::size_t>(log_initial.size()); }
  std::size_t steps() const { return static_cast<std::size_t>(log_emission.rows()); }
  void validate() const;
};

/// Initial voxel weights of source `source` (probabilities for kNormalized).
Eigen::VectorXd build_initial(const ModelParams& params, const VoxelGrid& grid,
                              PriorWeighting weighting = PriorWeighting::kNormalized, int source = 0);
Eigen::VectorXd initial_log_weights(const ModelParams& params, const VoxelGrid& grid,
                                    PriorWeighting weighting, int source = 0);

std::shared_ptr<const GaussianKernel> make_transition(const ModelParams& params, const VoxelGrid& grid,
                                                      PriorWeighting weighting, int source = 0);
/// Dense K x K matrix, row l -> column k.
Eigen::MatrixXd build_transition(const ModelParams& params, const VoxelGrid& grid,
                                 PriorWeighting weighting = PriorWeighting::kNormalized,
                                 int source = 0);

/// K x L predicted fields B(d_k), d_k = (c_k, q_fixed[source]).
Eigen::MatrixXd predicted_fields(const VoxelGrid& grid, const SensorArray& sensors, const Vec3& moment,
                                 const FieldConstants& consts = {});

/// T x K log N(Y_t; fields_k, V).
RowMatrix log_emission(const Eigen::MatrixXd& measurements, const Eigen::MatrixXd& fields,
                       const Eigen::MatrixXd& V);
RowMatrix build_emission(const Eigen::MatrixXd& measurements, const VoxelGrid& grid,
                         const ModelParams& params, const SensorArray& sensors,
                         const FieldConstants& consts = {});

DiscreteModel build_model(const ModelParams& params, const VoxelGrid& grid,
                          const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                          PriorWeighting weighting, const FieldConstants& consts = {});

struct ForwardResult {
  RowMatrix alpha;
  /// log c_t; c_t itself may leave the double range.
  Eigen::VectorXd log_scale;
};

struct SmoothingResult {
  RowMatrix alpha;
  RowMatrix beta;
  Eigen::VectorXd log_scale;
  RowMatrix xi;
  double log_likelihood = 0.0;

  /// sum_t sum_{l,k} eta_t(l,k) x_k x_l^T for the features passed to smooth().
  Eigen::MatrixXd pair_moment;
  /// sum_t sum_{l,k} eta_t(l,k) log W(l,k), when requested.
  double expected_log_transition = 0.0;

  Eigen::VectorXd scale() const { return log_scale.array().exp(); }
};

struct SmoothOptions {
  /// K x D features for the fused pair-moment accumulation (nullptr: skip).
  const Eigen::MatrixXd* pair_features = nullptr;
  /// The pair features are the voxel centers of the transition kernel, which
  /// lets separable kernels contract rows axis by axis.
  bool features_are_centers = false;
  /// Compute beta on every voxel; otherwise only where alpha > 0, which is
  /// all that xi and eta depend on.
  bool full_beta = true;
  /// Accumulate expected_log_transition (one log per pair; off by default).
  bool expected_log_transition = false;
};

ForwardResult forward(const DiscreteModel& model);
RowMatrix backward(const DiscreteModel& model, const ForwardResult& fwd);
SmoothingResult smooth(const DiscreteModel& model, const SmoothOptions& options = {});

/// eta_t for t = 2..T as dense K x K matrices (entry (l, k)).
std::vector<Eigen::MatrixXd> pairwise(const DiscreteModel& model, const SmoothingResult& result);

/// Long format: t,k,x,y,z,xi (t from 1, k from 0).
void write_posterior_csv(std::ostream& out, const VoxelGrid& grid, const RowMatrix& xi);
json smoothing_to_json(const SmoothingResult& result);

}  // namespace dipolegrid

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/hmm.hpp"

namespace dipolegrid {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
// exp() of anything below this is zero in double precision.
constexpr double kUnderflowExponent = -745.0;

double log_sum_exp(std::span<const double> values) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : values) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

Eigen::Matrix3d checked_precision(const Eigen::Matrix3d& cov, const char* what, double& log_det) {
  Eigen::LLT<Eigen::Matrix3d> llt(cov);
  if (llt.info() != Eigen::Success || !cov.allFinite()) {
    throw ValidationError(std::string("location block of ") + what + " must be positive definite");
  }
  const Eigen::Matrix3d L = llt.matrixL();
  log_det = 2.0 * L.diagonal().array().log().sum();
  if (!std::isfinite(log_det)) {
    throw ValidationError(std::string("location block of ") + what + " must be positive definite");
  }
  return llt.solve(Eigen::Matrix3d::Identity());
}

bool is_diagonal(const Eigen::Matrix3d& m) {
  return m(0, 1) == 0.0 && m(0, 2) == 0.0 && m(1, 0) == 0.0 && m(1, 2) == 0.0 && m(2, 0) == 0.0 &&
         m(2, 1) == 0.0;
}

}  // namespace

LocationDynamics location_dynamics(const ModelParams& params, int source) {
  const int o = ModelParams::offset(source);
  LocationDynamics d;
  d.M = params.A.block<3, 3>(o, o);
  d.offset = params.A.block<3, 3>(o, o + 3) * params.q_fixed.at(source) + params.b.segment<3>(o);
  d.cov = params.sigma.block<3, 3>(o, o);
  return d;
}

Eigen::MatrixXd TransitionKernel::dense() const {
  const std::size_t K = size();
  Eigen::MatrixXd out(K, K);
  std::vector<double> buf(K);
  for (std::size_t l = 0; l < K; ++l) {
    full_row(l, buf);
    for (std::size_t k = 0; k < K; ++k) out(l, k) = buf[k];
  }
  return out;
}

void TransitionKernel::add_row(std::size_t l, double a, std::span<double> out) const {
  thread_local std::vector<double> w;
  w.resize(size());
  full_row(l, w);
  for (std::size_t k = 0; k < w.size(); ++k) out[k] += a * w[k];
}

bool TransitionKernel::contract(std::size_t l, std::span<const double> g, double& total, Vec3* moment) const {
  if (moment) return false;
  thread_local std::vector<double> w;
  w.resize(size());
  full_row(l, w);
  total = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) total += w[k] * g[k];
  return true;
}

DenseKernel::DenseKernel(Eigen::MatrixXd weights) : w_(std::move(weights)) {
  if (w_.rows() != w_.cols() || w_.rows() == 0) throw ValidationError("transition matrix must be square");
  if ((w_.array() < 0.0).any() || !w_.allFinite()) {
    throw ValidationError("transition weights must be finite and non-negative");
  }
}

void DenseKernel::row(std::size_t l, std::span<const std::size_t> cols, std::span<double> out) const {
  for (std::size_t j = 0; j < cols.size(); ++j) out[j] = w_(l, cols[j]);
}

void DenseKernel::full_row(std::size_t l, std::span<double> out) const {
  for (Eigen::Index k = 0; k < w_.cols(); ++k) out[k] = w_(l, k);
}

double DenseKernel::log_weight(std::size_t l, std::size_t k) const { return std::log(w_(l, k)); }

GaussianKernel::GaussianKernel(const VoxelGrid& grid, const LocationDynamics& dynamics,
                               PriorWeighting weighting)
    : grid_(grid), dyn_(dynamics), weighting_(weighting) {
  if (!dyn_.M.allFinite() || !dyn_.offset.allFinite()) {
    throw ValidationError("transition mean parameters must be finite");
  }
  precision_ = checked_precision(dyn_.cov, "Sigma", log_det_);
  separable_ = is_diagonal(dyn_.cov);
  log_volume_ = std::log(grid_.cell_volume());
  ijk_.resize(grid_.size());
  for (std::size_t k = 0; k < grid_.size(); ++k) ijk_[k] = grid_.unravel(k);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < grid_.mesh()[i]; ++j) axis_centers_[i].push_back(grid_.axis_center(i, j));
  }
}

Vec3 GaussianKernel::mean_of(std::size_t l) const { return dyn_.M * grid_.center(l) + dyn_.offset; }

double GaussianKernel::log_density(const Vec3& x, const Vec3& mean) const {
  const Vec3 d = x - mean;
  return -0.5 * (d.dot(precision_ * d) + 3.0 * kLog2Pi + log_det_);
}

void GaussianKernel::factors(std::size_t l, RowFactors& f) const {
  const Vec3 m = mean_of(l);
  double log_scale = 0.0;
  for (int i = 0; i < 3; ++i) {
    const int n = grid_.mesh()[i];
    auto& axis = f.axis[i];
    axis.resize(n);
    const double p = precision_(i, i);
    double peak = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      const double d = grid_.axis_center(i, j) - m(i);
      axis[j] = -0.5 * p * d * d;
      peak = std::max(peak, axis[j]);
    }
    if (weighting_ == PriorWeighting::kNormalized) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += (axis[j] = std::exp(axis[j] - peak));
      for (int j = 0; j < n; ++j) axis[j] /= s;
    } else {
      for (int j = 0; j < n; ++j) axis[j] = std::exp(axis[j]);
    }
  }
  if (weighting_ == PriorWeighting::kDensityVolume) {
    log_scale = log_volume_ - 0.5 * (3.0 * kLog2Pi + log_det_);
  }
  f.scale = std::exp(log_scale);
}

void GaussianKernel::row(std::size_t l, std::span<const std::size_t> cols, std::span<double> out) const {
  if (separable_) {
    thread_local RowFactors f;
    factors(l, f);
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const auto& c = ijk_[cols[j]];
      out[j] = f.scale * f.axis[0][c[0]] * f.axis[1][c[1]] * f.axis[2][c[2]];
    }
    return;
  }
  const Vec3 m = mean_of(l);
  const double shift = weighting_ == PriorWeighting::kNormalized ? -log_normalizer(l) : log_volume_;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    out[j] = std::exp(log_density(grid_.center(cols[j]), m) + shift);
  }
}

void GaussianKernel::full_row(std::size_t l, std::span<double> out) const {
  if (separable_) {
    thread_local RowFactors f;
    factors(l, f);
    const Mesh& mesh = grid_.mesh();
    std::size_t k = 0;
    for (int c2 = 0; c2 < mesh[2]; ++c2) {
      const double a2 = f.scale * f.axis[2][c2];
      for (int c1 = 0; c1 < mesh[1]; ++c1) {
        const double a12 = a2 * f.axis[1][c1];
        const double* a0 = f.axis[0].data();
        for (int c0 = 0; c0 < mesh[0]; ++c0) out[k++] = a12 * a0[c0];
      }
    }
    return;
  }
  const Vec3 m = mean_of(l);
  const std::size_t K = grid_.size();
  for (std::size_t k = 0; k < K; ++k) out[k] = log_density(grid_.center(k), m);
  const double shift =
      weighting_ == PriorWeighting::kNormalized ? -log_sum_exp(out.first(K)) : log_volume_;
  for (std::size_t k = 0; k < K; ++k) out[k] = std::exp(out[k] + shift);
}

void GaussianKernel::add_row(std::size_t l, double a, std::span<double> out) const {
  if (!separable_) {
    TransitionKernel::add_row(l, a, out);
    return;
  }
  thread_local RowFactors f;
  factors(l, f);
  const Mesh& mesh = grid_.mesh();
  const double* a0 = f.axis[0].data();
  const std::size_t n0 = static_cast<std::size_t>(mesh[0]);
  for (int c2 = 0; c2 < mesh[2]; ++c2) {
    const double w2 = a * f.scale * f.axis[2][c2];
    if (w2 == 0.0) continue;
    for (int c1 = 0; c1 < mesh[1]; ++c1) {
      const double w12 = w2 * f.axis[1][c1];
      if (w12 == 0.0) continue;
      double* o = out.data() + (static_cast<std::size_t>(c2) * mesh[1] + c1) * n0;
      for (std::size_t c0 = 0; c0 < n0; ++c0) o[c0] += w12 * a0[c0];
    }
  }
}

bool GaussianKernel::contract(std::size_t l, std::span<const double> g, double& total, Vec3* moment) const {
  if (!separable_) {
    if (moment) {
      thread_local std::vector<double> w;
      w.resize(size());
      full_row(l, w);
      total = 0.0;
      Vec3 m = Vec3::Zero();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double v = w[k] * g[k];
        total += v;
        m += v * grid_.center(k);
      }
      *moment = m;
      return true;
    }
    return TransitionKernel::contract(l, g, total, moment);
  }
  // Contract the z and y axes into length-K_1 vectors with axpy updates
  // (these vectorize, unlike a running dot product), then finish along x.
  thread_local RowFactors f;
  thread_local std::vector<double> h, hy, hz, r, ry;
  factors(l, f);
  const Mesh& mesh = grid_.mesh();
  const std::size_t n0 = static_cast<std::size_t>(mesh[0]);
  const bool want = moment != nullptr;
  h.assign(n0, 0.0);
  r.resize(n0);
  if (want) {
    hy.assign(n0, 0.0);
    hz.assign(n0, 0.0);
    ry.resize(n0);
  }
  for (int c2 = 0; c2 < mesh[2]; ++c2) {
    const double w2 = f.axis[2][c2];
    if (w2 == 0.0) continue;
    std::fill(r.begin(), r.end(), 0.0);
    if (want) std::fill(ry.begin(), ry.end(), 0.0);
    bool any = false;
    for (int c1 = 0; c1 < mesh[1]; ++c1) {
      const double w1 = f.axis[1][c1];
      if (w1 == 0.0) continue;
      any = true;
      const double* gg = g.data() + (static_cast<std::size_t>(c2) * mesh[1] + c1) * n0;
      double* rp = r.data();
      for (std::size_t c0 = 0; c0 < n0; ++c0) rp[c0] += w1 * gg[c0];
      if (want) {
        const double w1y = w1 * axis_centers_[1][c1];
        double* ryp = ry.data();
        for (std::size_t c0 = 0; c0 < n0; ++c0) ryp[c0] += w1y * gg[c0];
      }
    }
    if (!any) continue;
    for (std::size_t c0 = 0; c0 < n0; ++c0) h[c0] += w2 * r[c0];
    if (want) {
      const double w2z = w2 * axis_centers_[2][c2];
      for (std::size_t c0 = 0; c0 < n0; ++c0) {
        hy[c0] += w2 * ry[c0];
        hz[c0] += w2z * r[c0];
      }
    }
  }
  const double* a0 = f.axis[0].data();
  const double* x0 = axis_centers_[0].data();
  double s = 0.0, sx = 0.0, sy = 0.0, sz = 0.0;
  for (std::size_t c0 = 0; c0 < n0; ++c0) {
    s += a0[c0] * h[c0];
    if (want) {
      sx += a0[c0] * x0[c0] * h[c0];
      sy += a0[c0] * hy[c0];
      sz += a0[c0] * hz[c0];
    }
  }
  total = f.scale * s;
  if (want) *moment = f.scale * Vec3(sx, sy, sz);
  return true;
}

double GaussianKernel::log_normalizer(std::size_t l) const {
  const Vec3 m = mean_of(l);
  if (separable_) {
    double total = -0.5 * (3.0 * kLog2Pi + log_det_);
    std::vector<double> e;
    for (int i = 0; i < 3; ++i) {
      const int n = grid_.mesh()[i];
      e.resize(n);
      for (int j = 0; j < n; ++j) {
        const double d = grid_.axis_center(i, j) - m(i);
        e[j] = -0.5 * precision_(i, i) * d * d;
      }
      total += log_sum_exp(e);
    }
    return total;
  }
  std::vector<double> e(grid_.size());
  for (std::size_t k = 0; k < e.size(); ++k) e[k] = log_density(grid_.center(k), m);
  return log_sum_exp(e);
}

double GaussianKernel::log_weight(std::size_t l, std::size_t k) const {
  const double ld = log_density(grid_.center(k), mean_of(l));
  return weighting_ == PriorWeighting::kNormalized ? ld - log_normalizer(l) : ld + log_volume_;
}

ProductKernel::ProductKernel(std::vector<Eigen::MatrixXd> factors) : factors_(std::move(factors)) {
  if (factors_.empty()) throw ValidationError("product kernel needs at least one factor");
  for (const auto& f : factors_) {
    if (f.rows() != f.cols() || f.rows() == 0) throw ValidationError("kernel factors must be square");
    sizes_.push_back(static_cast<std::size_t>(f.rows()));
    size_ *= sizes_.back();
  }
}

void ProductKernel::row(std::size_t l, std::span<const std::size_t> cols, std::span<double> out) const {
  std::vector<std::size_t> li(sizes_.size());
  for (std::size_t n = 0, rest = l; n < sizes_.size(); ++n) {
    li[n] = rest % sizes_[n];
    rest /= sizes_[n];
  }
  for (std::size_t j = 0; j < cols.size(); ++j) {
    double w = 1.0;
    std::size_t rest = cols[j];
    for (std::size_t n = 0; n < sizes_.size(); ++n) {
      w *= factors_[n](li[n], rest % sizes_[n]);
      rest /= sizes_[n];
    }
    out[j] = w;
  }
}

void ProductKernel::full_row(std::size_t l, std::span<double> out) const {
  std::vector<std::size_t> li(sizes_.size());
  for (std::size_t n = 0, rest = l; n < sizes_.size(); ++n) {
    li[n] = rest % sizes_[n];
    rest /= sizes_[n];
  }
  out[0] = 1.0;
  std::size_t filled = 1;
  // Expand one factor at a time; earlier factors vary fastest.
  for (std::size_t n = 0; n < sizes_.size(); ++n) {
    for (std::size_t k = sizes_[n]; k-- > 0;) {
      const double w = factors_[n](li[n], k);
      for (std::size_t j = 0; j < filled; ++j) out[k * filled + j] = out[j] * w;
    }
    filled *= sizes_[n];
  }
}

double ProductKernel::log_weight(std::size_t l, std::size_t k) const {
  double total = 0.0;
  for (std::size_t n = 0; n < sizes_.size(); ++n) {
    total += std::log(factors_[n](l % sizes_[n], k % sizes_[n]));
    l /= sizes_[n];
    k /= sizes_[n];
  }
  return total;
}

Eigen::VectorXd initial_log_weights(const ModelParams& params, const VoxelGrid& grid,
                                    PriorWeighting weighting, int source) {
  const Vec3 mean = params.initial_location_mean(source);
  double log_det = 0.0;
  const Eigen::Matrix3d precision = checked_precision(params.initial_location_cov(source), "Sigma0", log_det);
  const std::size_t K = grid.size();
  Eigen::VectorXd out(K);
  double best_quad = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    const Vec3 d = grid.center(k) - mean;
    const double quad = d.dot(precision * d);
    best_quad = std::min(best_quad, quad);
    out(k) = -0.5 * (quad + 3.0 * kLog2Pi + log_det);
  }
  if (-0.5 * best_quad < kUnderflowExponent) {
    throw ValidationError("ROI does not cover prior mass: the initial density underflows at every voxel");
  }
  if (weighting == PriorWeighting::kNormalized) {
    out.array() -= log_sum_exp(std::span<const double>(out.data(), K));
  } else {
    out.array() += std::log(grid.cell_volume());
  }
  return out;
}

Eigen::VectorXd build_initial(const ModelParams& params, const VoxelGrid& grid, PriorWeighting weighting,
                              int source) {
  return initial_log_weights(params, grid, weighting, source).array().exp();
}

std::shared_ptr<const GaussianKernel> make_transition(const ModelParams& params, const VoxelGrid& grid,
                                                      PriorWeighting weighting, int source) {
  return std::make_shared<const GaussianKernel>(grid, location_dynamics(params, source), weighting);
}

Eigen::MatrixXd build_transition(const ModelParams& params, const VoxelGrid& grid,
                                 PriorWeighting weighting, int source) {
  const LocationDynamics dyn = location_dynamics(params, source);
  const GaussianKernel kernel(grid, dyn, weighting);
  double log_det = 0.0;
  const Eigen::Matrix3d precision = checked_precision(dyn.cov, "Sigma", log_det);
  for (std::size_t l = 0; l < grid.size(); ++l) {
    const Vec3 m = dyn.M * grid.center(l) + dyn.offset;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const Vec3 d = grid.center(k) - m;
      best = std::min(best, d.dot(precision * d));
    }
    if (-0.5 * best < kUnderflowExponent) {
      throw NumericError("transition row of voxel " + std::to_string(l) +
                         " underflows: the predicted location leaves the ROI");
    }
  }
  return kernel.dense();
}

}  // namespace dipolegrid

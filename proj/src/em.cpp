#include "dipolegrid/em.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/io.hpp"

namespace dipolegrid {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log det and precision of a covariance; false if not positive definite.
bool precision_of(const Eigen::MatrixXd& cov, Eigen::MatrixXd& precision, double& log_det) {
  if (!cov.allFinite()) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return false;
  const Eigen::MatrixXd L = llt.matrixL();
  log_det = 2.0 * L.diagonal().array().log().sum();
  if (!std::isfinite(log_det)) return false;
  precision = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
  return true;
}

double max_abs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

// X Y^{-1} for symmetric Y, refusing numerically singular systems.
Eigen::MatrixXd right_solve(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const char* what) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Y, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const double smax = s.size() ? s(0) : 0.0;
  const double smin = s.size() ? s(s.size() - 1) : 0.0;
  if (!(smax > 0.0) || smin <= 1e-12 * smax) {
    std::ostringstream msg;
    msg << what << " update is singular: regressor matrix has singular values [" << smin << ", " << smax
        << "], condition number " << (smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity())
        << "; the posterior path does not vary along every estimated direction (a ridge may help)";
    throw NumericError(msg.str());
  }
  return svd.solve(X.transpose()).transpose();
}

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

// Statistics of one source block lifted to the 6-D d_k = (c_k, q).
struct BlockStats {
  Eigen::VectorXd F1, S1, S0;
  Eigen::MatrixXd G1, P11, P00, P10;
  double n = 0.0;
};

BlockStats lift(const SufficientStats& s, int o, const Vec3& q) {
  const double n = s.steps - 1;
  auto vec = [&](const Eigen::VectorXd& v, double w) {
    Eigen::VectorXd out(6);
    out << v.segment<3>(o), w * q;
    return out;
  };
  auto mat = [&](const Eigen::MatrixXd& m, const Eigen::VectorXd& left, const Eigen::VectorXd& right,
                 double w) {
    Eigen::MatrixXd out(6, 6);
    out.topLeftCorner<3, 3>() = m.block<3, 3>(o, o);
    out.topRightCorner<3, 3>() = left.segment<3>(o) * q.transpose();
    out.bottomLeftCorner<3, 3>() = q * right.segment<3>(o).transpose();
    out.bottomRightCorner<3, 3>() = w * q * q.transpose();
    return out;
  };
  BlockStats b;
  b.n = n;
  b.F1 = vec(s.first_mean, 1.0);
  b.S1 = vec(s.next_sum, n);
  b.S0 = vec(s.prev_sum, n);
  b.G1 = mat(s.first_moment, s.first_mean, s.first_mean, 1.0);
  b.P11 = mat(s.next_moment, s.next_sum, s.next_sum, n);
  b.P00 = mat(s.prev_moment, s.prev_sum, s.prev_sum, n);
  b.P10 = mat(s.cross_moment, s.next_sum, s.prev_sum, n);
  return b;
}

// sum eta (x_k - M x_l - o)(x_k - M x_l - o)^T from second moments.
Eigen::MatrixXd residual_scatter(const Eigen::MatrixXd& P11, const Eigen::MatrixXd& P10,
                                 const Eigen::MatrixXd& P00, const Eigen::VectorXd& S1,
                                 const Eigen::VectorXd& S0, double n, const Eigen::MatrixXd& M,
                                 const Eigen::VectorXd& o) {
  const Eigen::VectorXd r = S1 - M * S0;
  Eigen::MatrixXd out = P11 - M * P10.transpose() - P10 * M.transpose() + M * P00 * M.transpose() -
                        o * r.transpose() - r * o.transpose() + n * o * o.transpose();
  return symmetrize(out);
}

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

UpdateMask UpdateMask::parse(const std::vector<std::string>& names) {
  UpdateMask m = none();
  for (const std::string& n : names) {
    if (n == "mu0") {
      m.mu0 = true;
    } else if (n == "Sigma0") {
      m.sigma0 = true;
    } else if (n == "A") {
      m.A = true;
    } else if (n == "b") {
      m.b = true;
    } else if (n == "Sigma") {
      m.sigma = true;
    } else if (n == "V") {
      m.V = true;
    } else {
      throw ValidationError("unknown parameter '" + n + "' in update mask (use mu0, Sigma0, A, b, Sigma, V)");
    }
  }
  return m;
}

std::vector<std::string> UpdateMask::names() const {
  std::vector<std::string> out;
  if (mu0) out.push_back("mu0");
  if (sigma0) out.push_back("Sigma0");
  if (A) out.push_back("A");
  if (b) out.push_back("b");
  if (sigma) out.push_back("Sigma");
  if (V) out.push_back("V");
  return out;
}

void EmConfig::validate() const {
  if (max_iters < 1) throw ValidationError("max_iters must be >= 1");
  if (!(tol > 0.0)) throw ValidationError("tol must be > 0");
  if (!(monotonicity_tol >= 0.0)) throw ValidationError("monotonicity_tol must be >= 0");
  if (!(constraints.ridge >= 0.0)) throw ValidationError("ridge must be >= 0");
  if (!(consts.kappa > 0.0)) throw ValidationError("kappa must be positive");
}

ParamChange param_change(const ModelParams& before, const ModelParams& after) {
  ParamChange c;
  c.mu0 = max_abs(before.mu0, after.mu0);
  c.sigma0 = max_abs(before.sigma0, after.sigma0);
  c.A = max_abs(before.A, after.A);
  c.b = max_abs(before.b, after.b);
  c.sigma = max_abs(before.sigma, after.sigma);
  c.V = max_abs(before.V, after.V);
  return c;
}

void write_trace_csv(std::ostream& out, const EmTrace& trace) {
  std::size_t sources = 0;
  for (const auto& it : trace.iterations) sources = std::max(sources, it.rois.size());
  std::vector<std::string> header{"iteration", "Q", "Q_prev", "loglik", "d_mu0", "d_Sigma0",
                                  "d_A",       "d_b", "d_Sigma", "d_V"};
  static const char* axis[] = {"x", "y", "z"};
  for (std::size_t n = 1; n <= sources; ++n) {
    const std::string s = sources > 1 ? std::to_string(n) + "_" : "";
    for (const char* a : axis) {
      header.push_back("roi" + s + a + "_lo");
      header.push_back("roi" + s + a + "_hi");
    }
    for (const char* a : axis) header.push_back("K" + s + a);
  }
  header.push_back("coverage_violations");
  write_csv_row(out, header);
  for (const auto& it : trace.iterations) {
    std::vector<std::string> row{std::to_string(it.iteration), format_double(it.q),
                                 format_double(it.q_prev),     format_double(it.loglik),
                                 format_double(it.change.mu0), format_double(it.change.sigma0),
                                 format_double(it.change.A),   format_double(it.change.b),
                                 format_double(it.change.sigma), format_double(it.change.V)};
    for (std::size_t n = 0; n < sources; ++n) {
      if (n < it.rois.size()) {
        for (const auto& iv : it.rois[n].axes) {
          row.push_back(format_double(iv.lo));
          row.push_back(format_double(iv.hi));
        }
        for (int m : it.meshes[n]) row.push_back(std::to_string(m));
      } else {
        row.insert(row.end(), 9, "");
      }
    }
    row.push_back(std::to_string(it.coverage_violations));
    write_csv_row(out, row);
  }
}

LatentChain::LatentChain(const VoxelGrid& grid, int source, const Eigen::MatrixXd& measurements,
                         const SensorArray& sensors, const Vec3& moment, const FieldConstants& consts)
    : grids_{grid}, sources_{source}, sizes_{grid.size()} {
  const Eigen::Index K = static_cast<Eigen::Index>(grid.size());
  features_.resize(K, 3);
  for (Eigen::Index k = 0; k < K; ++k) features_.row(k) = grid.center(k).transpose();
  fields_ = predicted_fields(grid, sensors, moment, consts);
  set_measurements(measurements);
}

LatentChain::LatentChain(std::vector<VoxelGrid> grids, std::vector<int> sources,
                         const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                         const std::vector<Vec3>& moments, const FieldConstants& consts)
    : grids_(std::move(grids)), sources_(std::move(sources)) {
  if (grids_.empty() || grids_.size() != sources_.size() || moments.size() != sources_.size()) {
    throw ValidationError("joint chain needs one grid and one moment per source");
  }
  std::size_t K = 1;
  for (const auto& g : grids_) {
    sizes_.push_back(g.size());
    K *= g.size();
  }
  const Eigen::Index N = static_cast<Eigen::Index>(grids_.size());
  const Eigen::Index L = static_cast<Eigen::Index>(sensors.size());
  std::vector<Eigen::MatrixXd> per_source;
  for (std::size_t n = 0; n < grids_.size(); ++n) {
    per_source.push_back(predicted_fields(grids_[n], sensors, moments[n], consts));
  }
  features_.resize(static_cast<Eigen::Index>(K), 3 * N);
  fields_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), L);
  for (std::size_t k = 0; k < K; ++k) {
    const auto idx = unravel(k);
    for (Eigen::Index n = 0; n < N; ++n) {
      features_.block<1, 3>(static_cast<Eigen::Index>(k), 3 * n) = grids_[n].center(idx[n]).transpose();
      fields_.row(static_cast<Eigen::Index>(k)) += per_source[n].row(static_cast<Eigen::Index>(idx[n]));
    }
  }
  set_measurements(measurements);
}

void LatentChain::set_measurements(const Eigen::MatrixXd& measurements) {
  if (measurements.rows() < 1) throw ValidationError("need at least one time step");
  if (measurements.cols() != fields_.cols()) {
    throw ValidationError("measurements have " + std::to_string(measurements.cols()) + " columns, sensors " +
                          std::to_string(fields_.cols()));
  }
  measurements_ = measurements;
}

std::vector<std::size_t> LatentChain::unravel(std::size_t k) const {
  std::vector<std::size_t> idx(sizes_.size());
  for (std::size_t n = 0; n < sizes_.size(); ++n) {
    idx[n] = k % sizes_[n];
    k /= sizes_[n];
  }
  return idx;
}

DiscreteModel LatentChain::model(const ModelParams& params, PriorWeighting weighting) const {
  DiscreteModel m;
  if (grids_.size() == 1) {
    m.log_initial = initial_log_weights(params, grids_[0], weighting, sources_[0]);
    m.transition = make_transition(params, grids_[0], weighting, sources_[0]);
  } else {
    std::vector<Eigen::VectorXd> init;
    std::vector<Eigen::MatrixXd> factors;
    for (std::size_t n = 0; n < grids_.size(); ++n) {
      init.push_back(initial_log_weights(params, grids_[n], weighting, sources_[n]));
      factors.push_back(make_transition(params, grids_[n], weighting, sources_[n])->dense());
    }
    m.log_initial.resize(static_cast<Eigen::Index>(states()));
    for (std::size_t k = 0; k < states(); ++k) {
      const auto idx = unravel(k);
      double s = 0.0;
      for (std::size_t n = 0; n < idx.size(); ++n) s += init[n](static_cast<Eigen::Index>(idx[n]));
      m.log_initial(static_cast<Eigen::Index>(k)) = s;
    }
    m.transition = std::make_shared<ProductKernel>(std::move(factors));
  }
  m.log_emission = log_emission(measurements_, fields_, params.V);
  return m;
}

namespace {

RowMatrix marginal_of(const RowMatrix& xi, const std::vector<std::size_t>& sizes, std::size_t n) {
  std::size_t stride = 1;
  for (std::size_t i = 0; i < n; ++i) stride *= sizes[i];
  RowMatrix out = RowMatrix::Zero(xi.rows(), static_cast<Eigen::Index>(sizes[n]));
  for (Eigen::Index k = 0; k < xi.cols(); ++k) {
    const Eigen::Index kn = static_cast<Eigen::Index>((static_cast<std::size_t>(k) / stride) % sizes[n]);
    out.col(kn) += xi.col(k);
  }
  return out;
}

}  // namespace

void LatentChain::finish_stats(const RowMatrix& xi, const ModelParams& params, bool residual,
                               const RowMatrix& log_e, SufficientStats& s) const {
  const Eigen::Index T = xi.rows();
  const Eigen::Index K = xi.cols();
  const Eigen::Index D = features_.cols();
  s.steps = static_cast<int>(T);
  s.first_mean = Eigen::VectorXd::Zero(D);
  s.first_moment = Eigen::MatrixXd::Zero(D, D);
  s.next_sum = Eigen::VectorXd::Zero(D);
  s.prev_sum = Eigen::VectorXd::Zero(D);
  s.next_moment = Eigen::MatrixXd::Zero(D, D);
  s.prev_moment = Eigen::MatrixXd::Zero(D, D);
  s.emission_term = 0.0;
  Eigen::VectorXd mean(D);
  Eigen::MatrixXd moment(D, D);
  for (Eigen::Index t = 0; t < T; ++t) {
    mean.setZero();
    moment.setZero();
    for (Eigen::Index k = 0; k < K; ++k) {
      const double w = xi(t, k);
      if (w == 0.0) continue;
      const auto x = features_.row(k).transpose();
      mean.noalias() += w * x;
      moment.noalias() += w * x * x.transpose();
      s.emission_term += w * log_e(t, k);
    }
    if (t == 0) {
      s.first_mean = mean;
      s.first_moment = moment;
    }
    if (t >= 1) {
      s.next_sum += mean;
      s.next_moment += moment;
    }
    if (t <= T - 2) {
      s.prev_sum += mean;
      s.prev_moment += moment;
    }
  }
  s.emission_V = params.V;
  s.residual_scatter.reset();
  if (residual) {
    const Eigen::Index L = fields_.cols();
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(L, L);
    Eigen::VectorXd weight = Eigen::VectorXd::Zero(K);
    Eigen::MatrixXd bar_sum = Eigen::MatrixXd::Zero(L, L);
    for (Eigen::Index t = 0; t < T; ++t) {
      Eigen::VectorXd bar = Eigen::VectorXd::Zero(L);
      for (Eigen::Index k = 0; k < K; ++k) {
        const double w = xi(t, k);
        if (w == 0.0) continue;
        bar.noalias() += w * fields_.row(k).transpose();
        weight(k) += w;
      }
      const Eigen::VectorXd r = measurements_.row(t).transpose() - bar;
      R.noalias() += r * r.transpose();
      bar_sum.noalias() += bar * bar.transpose();
    }
    Eigen::MatrixXd spread = -bar_sum;
    for (Eigen::Index k = 0; k < K; ++k) {
      if (weight(k) == 0.0) continue;
      spread.noalias() += weight(k) * fields_.row(k).transpose() * fields_.row(k);
    }
    s.residual_scatter = symmetrize(R + spread);
  }
}

LatentChain::EStep LatentChain::e_step(const ModelParams& params, PriorWeighting weighting, bool residual,
                                       bool full_beta) const {
  const DiscreteModel m = model(params, weighting);
  SmoothOptions opt;
  opt.pair_features = &features_;
  opt.features_are_centers = grids_.size() == 1;
  opt.full_beta = full_beta;
  EStep e;
  e.posterior = smooth(m, opt);
  e.stats.cross_moment = e.posterior.pair_moment;
  finish_stats(e.posterior.xi, params, residual, m.log_emission, e.stats);
  if (weighting == PriorWeighting::kNormalized) {
    for (std::size_t n = 0; n < grids_.size(); ++n) {
      e.marginals.push_back(grids_.size() == 1 ? e.posterior.xi : marginal_of(e.posterior.xi, sizes_, n));
    }
  }
  return e;
}

SufficientStats LatentChain::stats_from(const RowMatrix& xi, const std::vector<Eigen::MatrixXd>& eta,
                                        const ModelParams& params, bool residual) const {
  if (xi.cols() != static_cast<Eigen::Index>(states())) throw ValidationError("xi has the wrong state count");
  if (eta.size() + 1 != static_cast<std::size_t>(xi.rows())) {
    throw ValidationError("need T-1 pairwise matrices for T posterior rows");
  }
  SufficientStats s;
  const Eigen::Index D = features_.cols();
  s.cross_moment = Eigen::MatrixXd::Zero(D, D);
  for (const auto& e : eta) {
    if (e.rows() != xi.cols() || e.cols() != xi.cols()) throw ValidationError("eta must be K x K");
    s.cross_moment.noalias() += features_.transpose() * e.transpose() * features_;
  }
  const RowMatrix log_e = log_emission(measurements_, fields_, params.V);
  finish_stats(xi, params, residual, log_e, s);
  return s;
}

double LatentChain::q_value(const ModelParams& params, const EStep& e, PriorWeighting weighting) const {
  const SufficientStats& s = e.stats;
  const double n = s.steps - 1;
  double q = 0.0;

  // Emission term: only V enters.
  if (params.V.rows() == s.emission_V.rows() && params.V == s.emission_V) {
    q += s.emission_term;
  } else {
    if (!s.residual_scatter) {
      throw std::logic_error("Q at a new V needs the residual scatter from the E-step");
    }
    Eigen::MatrixXd P;
    double log_det = 0.0;
    if (!precision_of(params.V, P, log_det)) return kNegInf;
    const double L = static_cast<double>(params.V.rows());
    q += -0.5 * (s.steps * (L * kLog2Pi + log_det) + (P * *s.residual_scatter).trace());
  }

  for (std::size_t blk = 0; blk < grids_.size(); ++blk) {
    const int src = sources_[blk];
    const int o = static_cast<int>(3 * blk);
    const VoxelGrid& grid = grids_[blk];
    const double log_vol = std::log(grid.cell_volume());

    // Initial term.
    const Eigen::Vector3d mu = params.initial_location_mean(src);
    Eigen::MatrixXd P0;
    double ld0 = 0.0;
    if (!precision_of(params.initial_location_cov(src), P0, ld0)) return kNegInf;
    const Eigen::Vector3d m1 = s.first_mean.segment<3>(o);
    const Eigen::Matrix3d C0 = s.first_moment.block<3, 3>(o, o) - mu * m1.transpose() -
                               m1 * mu.transpose() + mu * mu.transpose();
    q += -0.5 * (3.0 * kLog2Pi + ld0) - 0.5 * (P0 * C0).trace();
    if (weighting == PriorWeighting::kDensityVolume) {
      q += log_vol;
    } else {
      Eigen::VectorXd ld(static_cast<Eigen::Index>(grid.size()));
      for (std::size_t k = 0; k < grid.size(); ++k) {
        const Vec3 d = grid.center(k) - mu;
        ld(static_cast<Eigen::Index>(k)) = -0.5 * (d.dot(P0 * d) + 3.0 * kLog2Pi + ld0);
      }
      q -= log_sum_exp(ld);
    }

    if (s.steps < 2) continue;
    // Transition term.
    const LocationDynamics dyn = location_dynamics(params, src);
    Eigen::MatrixXd P;
    double ld = 0.0;
    if (!precision_of(dyn.cov, P, ld)) return kNegInf;
    const Eigen::MatrixXd scatter = residual_scatter(
        s.next_moment.block<3, 3>(o, o), s.cross_moment.block<3, 3>(o, o), s.prev_moment.block<3, 3>(o, o),
        s.next_sum.segment<3>(o), s.prev_sum.segment<3>(o), n, dyn.M, dyn.offset);
    q += -0.5 * n * (3.0 * kLog2Pi + ld) - 0.5 * (P * scatter).trace();
    if (weighting == PriorWeighting::kDensityVolume) {
      q += n * log_vol;
    } else {
      if (e.marginals.size() != grids_.size()) {
        throw std::logic_error("normalized-weighting Q needs the per-source marginals");
      }
      const GaussianKernel kernel(grid, dyn, PriorWeighting::kNormalized);
      const RowMatrix& xi = e.marginals[blk];
      for (Eigen::Index l = 0; l < xi.cols(); ++l) {
        const double w = xi.col(l).head(xi.rows() - 1).sum();
        if (w > 0.0) q -= w * kernel.log_normalizer(static_cast<std::size_t>(l));
      }
    }
  }
  return q;
}

ModelParams LatentChain::m_step(const ModelParams& params, const SufficientStats& stats, const UpdateMask& mask,
                                const Constraints& constraints) const {
  ModelParams out = params;
  const bool dynamics = mask.A || mask.b || mask.sigma;
  if (dynamics && stats.steps < 2) {
    throw ValidationError("updating A, b or Sigma needs at least two time steps");
  }
  for (std::size_t blk = 0; blk < grids_.size(); ++blk) {
    const int src = sources_[blk];
    const int P = ModelParams::offset(src);
    const Vec3 q = params.q_fixed.at(src);
    const BlockStats s = lift(stats, static_cast<int>(3 * blk), q);
    const double n = s.n;

    Eigen::VectorXd mu0 = params.mu0.segment<6>(P);
    if (mask.mu0) {
      mu0 = s.F1;
      out.mu0.segment<6>(P) = mu0;
    }
    if (mask.sigma0) {
      out.sigma0.block<6, 6>(P, P) =
          symmetrize(s.G1 - mu0 * s.F1.transpose() - s.F1 * mu0.transpose() + mu0 * mu0.transpose());
    }

    Eigen::MatrixXd A = params.A.block<6, 6>(P, P);
    Eigen::VectorXd b = params.b.segment<6>(P);
    const bool loc_only = constraints.location_block_only_A;
    const double ridge = constraints.ridge;
    if (mask.A && mask.b) {
      if (loc_only) {
        const Eigen::Matrix3d X = s.S1.head<3>() * s.S0.head<3>().transpose() - n * s.P10.topLeftCorner<3, 3>();
        const Eigen::Matrix3d Y = s.S0.head<3>() * s.S0.head<3>().transpose() - n * s.P00.topLeftCorner<3, 3>() -
                                  n * ridge * Eigen::Matrix3d::Identity();
        A.setZero();
        A.topLeftCorner<3, 3>() = right_solve(X, Y, "A");
      } else {
        const Eigen::MatrixXd X = s.S1 * s.S0.transpose() - n * s.P10;
        const Eigen::MatrixXd Y = s.S0 * s.S0.transpose() - n * s.P00 - n * ridge * Eigen::MatrixXd::Identity(6, 6);
        A = right_solve(X, Y, "A");
      }
      b = (s.S1 - A * s.S0) / n;
    } else if (mask.A) {
      if (loc_only) {
        const Eigen::Vector3d o = b.head<3>();
        const Eigen::Matrix3d X = s.P10.topLeftCorner<3, 3>() - o * s.S0.head<3>().transpose();
        const Eigen::Matrix3d Y = s.P00.topLeftCorner<3, 3>() + ridge * Eigen::Matrix3d::Identity();
        A.setZero();
        A.topLeftCorner<3, 3>() = right_solve(X, Y, "A");
      } else {
        const Eigen::MatrixXd X = s.P10 - b * s.S0.transpose();
        const Eigen::MatrixXd Y = s.P00 + ridge * Eigen::MatrixXd::Identity(6, 6);
        A = right_solve(X, Y, "A");
      }
    } else if (mask.b) {
      b = (s.S1 - A * s.S0) / n;
    }
    out.A.block<6, 6>(P, P) = A;
    out.b.segment<6>(P) = b;

    if (mask.sigma) {
      Eigen::MatrixXd S = residual_scatter(s.P11, s.P10, s.P00, s.S1, s.S0, n, A, b) / n;
      if (constraints.diagonal_sigma) S = Eigen::MatrixXd(S.diagonal().asDiagonal());
      out.sigma.block<6, 6>(P, P) = S;
    }
  }

  if (mask.V) {
    if (!stats.residual_scatter) throw std::logic_error("V update needs the residual scatter");
    const Eigen::MatrixXd& R = *stats.residual_scatter;
    const double T = stats.steps;
    if (constraints.scalar_V) {
      const Eigen::Index L = R.rows();
      out.V = (R.trace() / (T * static_cast<double>(L))) * Eigen::MatrixXd::Identity(L, L);
    } else {
      out.V = R / T;
    }
  }
  return out;
}

ModelParams default_initial_params(const RoiBox& roi, const Mesh& mesh, const std::vector<Vec3>& moments,
                                   long sensor_count, double noise_variance) {
  if (moments.empty()) throw ValidationError("need at least one source moment");
  if (sensor_count < 1) throw ValidationError("need at least one sensor");
  if (!(noise_variance > 0.0)) throw ValidationError("noise variance must be positive");
  const int N = static_cast<int>(moments.size());
  const int D = kSourceDim * N;
  const VoxelGrid grid(roi, mesh);
  const Vec3 centroid = roi.centroid();
  ModelParams p;
  p.sources = N;
  p.mu0 = Eigen::VectorXd::Zero(D);
  p.sigma0 = Eigen::MatrixXd::Zero(D, D);
  p.A = Eigen::MatrixXd::Zero(D, D);
  p.b = Eigen::VectorXd::Zero(D);
  p.sigma = Eigen::MatrixXd::Zero(D, D);
  p.q_fixed = moments;
  for (int n = 0; n < N; ++n) {
    const int o = ModelParams::offset(n);
    for (int i = 0; i < 3; ++i) {
      const double width = roi.axes[i].width();
      // Degenerate axes still need a proper density.
      const double spread = width > 0.0 ? width / 4.0 : 1.0;
      const double cell = grid.cell_width(i) > 0.0 ? grid.cell_width(i) : 1.0;
      p.mu0(o + i) = centroid(i);
      p.sigma0(o + i, o + i) = spread * spread;
      p.A(o + i, o + i) = 0.8;
      p.b(o + i) = 0.2 * centroid(i);
      p.sigma(o + i, o + i) = cell * cell;
      p.mu0(o + 3 + i) = moments[n](i);
      p.sigma0(o + 3 + i, o + 3 + i) = 1e-4;
      p.A(o + 3 + i, o + 3 + i) = 1.0;
      p.sigma(o + 3 + i, o + 3 + i) = 1e-4;
    }
  }
  p.V = noise_variance * Eigen::MatrixXd::Identity(sensor_count, sensor_count);
  return p;
}

EStepResult e_step(const ModelParams& params, const VoxelGrid& grid, const Eigen::MatrixXd& measurements,
                   const SensorArray& sensors, PriorWeighting weighting, const FieldConstants& consts) {
  params.validate(static_cast<long>(sensors.size()));
  const DiscreteModel m = build_model(params, grid, measurements, sensors, weighting, consts);
  EStepResult r;
  r.posterior = smooth(m);
  r.eta = pairwise(m, r.posterior);
  return r;
}

ModelParams m_step(const RowMatrix& xi, const std::vector<Eigen::MatrixXd>& eta, const VoxelGrid& grid,
                   const Eigen::MatrixXd& measurements, const SensorArray& sensors, const ModelParams& params,
                   const UpdateMask& mask, const Constraints& constraints, const FieldConstants& consts) {
  params.validate(static_cast<long>(sensors.size()));
  const LatentChain chain(grid, 0, measurements, sensors, params.q_fixed.at(0), consts);
  const SufficientStats s = chain.stats_from(xi, eta, params, mask.V);
  return chain.m_step(params, s, mask, constraints);
}

double expected_complete_loglik(const ModelParams& params, const RowMatrix& xi,
                                const std::vector<Eigen::MatrixXd>& eta, const VoxelGrid& grid,
                                const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                                PriorWeighting weighting, const FieldConstants& consts) {
  const Eigen::VectorXd log_init = initial_log_weights(params, grid, weighting);
  const Eigen::MatrixXd W = make_transition(params, grid, weighting)->dense();
  const RowMatrix log_e = build_emission(measurements, grid, params, sensors, consts);
  if (xi.rows() != log_e.rows() || xi.cols() != log_e.cols()) {
    throw ValidationError("xi must be T x K for these measurements and grid");
  }
  auto term = [](double weight, double log_value) {
    // 0 log 0 = 0; positive weight on a zero-probability state gives -inf.
    return weight == 0.0 ? 0.0 : weight * log_value;
  };
  double q = 0.0;
  for (Eigen::Index k = 0; k < xi.cols(); ++k) q += term(xi(0, k), log_init(k));
  for (const auto& e : eta) {
    for (Eigen::Index l = 0; l < e.rows(); ++l) {
      for (Eigen::Index k = 0; k < e.cols(); ++k) q += term(e(l, k), std::log(W(l, k)));
    }
  }
  for (Eigen::Index t = 0; t < xi.rows(); ++t) {
    for (Eigen::Index k = 0; k < xi.cols(); ++k) q += term(xi(t, k), log_e(t, k));
  }
  return q;
}

void check_monotone(const EmConfig& config, EmTrace& trace, double before, double after, const char* what,
                    int iteration) {
  if (after >= before - config.monotonicity_tol * std::abs(before)) return;
  ++trace.monotonicity_violations;
  if (config.strict_monotonicity) {
    std::ostringstream msg;
    msg.precision(17);
    msg << what << " decreased at iteration " << iteration << ": " << before << " -> " << after;
    throw MonotonicityViolation(msg.str());
  }
}

ChainFit fit_chain(const LatentChain& chain, const ModelParams& init, const EmConfig& config) {
  config.validate();
  ChainFit out{init, {}, {}};
  ModelParams params = init;
  double prev_ll = kNegInf;
  std::vector<RoiBox> rois;
  std::vector<Mesh> meshes;
  for (const auto& g : chain.grids()) {
    rois.push_back(g.roi());
    meshes.push_back(g.mesh());
  }
  for (int j = 1; j <= config.max_iters; ++j) {
    const LatentChain::EStep e = chain.e_step(params, config.weighting, config.mask.V);
    const double ll = e.posterior.log_likelihood;
    if (j > 1) check_monotone(config, out.trace, prev_ll, ll, "log-likelihood", j);
    const double q_old = chain.q_value(params, e, config.weighting);
    const ModelParams next = chain.m_step(params, e.stats, config.mask, config.constraints);
    const double q_new = chain.q_value(next, e, config.weighting);
    check_monotone(config, out.trace, q_old, q_new, "Q", j);

    EmIteration it;
    it.iteration = j;
    it.q = q_new;
    it.q_prev = q_old;
    it.loglik = ll;
    it.change = param_change(params, next);
    it.rois = rois;
    it.meshes = meshes;
    out.trace.iterations.push_back(std::move(it));

    const bool done = config.stopping == StoppingRule::kQGain
                          ? q_new - q_old <= config.tol * std::abs(q_new)
                          : (j > 1 && std::abs(ll - prev_ll) <= config.tol * std::abs(ll));
    params = next;
    prev_ll = ll;
    if (done) {
      out.trace.converged = true;
      break;
    }
  }
  LatentChain::EStep last = chain.e_step(params, config.weighting, false, true);
  check_monotone(config, out.trace, prev_ll, last.posterior.log_likelihood, "log-likelihood",
                 static_cast<int>(out.trace.iterations.size()) + 1);
  out.trace.final_loglik = last.posterior.log_likelihood;
  out.params = params;
  out.posterior = std::move(last.posterior);
  return out;
}

FitResult fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors, const VoxelGrid& grid,
              const ModelParams& init, const EmConfig& config) {
  config.validate();
  init.validate(static_cast<long>(sensors.size()));
  if (init.sources != 1) throw ValidationError("fit handles one source; use joint_fit or switch_fit");
  const LatentChain chain(grid, 0, measurements, sensors, init.q_fixed.at(0), config.consts);
  ChainFit r = fit_chain(chain, init, config);
  return FitResult{std::move(r.params), std::move(r.trace), std::move(r.posterior), grid};
}

double location_A_error(const ModelParams& estimate, const ModelParams& truth) {
  double err = 0.0;
  for (int n = 0; n < truth.sources; ++n) {
    for (int m = 0; m < truth.sources; ++m) {
      const int r = ModelParams::offset(n);
      const int c = ModelParams::offset(m);
      err = std::max(err, (estimate.A.block<3, 3>(r, c) - truth.A.block<3, 3>(r, c)).cwiseAbs().maxCoeff());
    }
  }
  return err;
}

double location_b_error(const ModelParams& estimate, const ModelParams& truth) {
  double err = 0.0;
  for (int n = 0; n < truth.sources; ++n) {
    const int o = ModelParams::offset(n);
    err = std::max(err, (estimate.b.segment<3>(o) - truth.b.segment<3>(o)).cwiseAbs().maxCoeff());
  }
  return err;
}

}  // namespace dipolegrid

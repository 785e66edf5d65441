#include "dipolegrid/hmm.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <string>

#include "dipolegrid/errors.hpp"

#if defined(__SSE2__) || defined(_M_X64)
#include <pmmintrin.h>
#include <xmmintrin.h>
#define DIPOLEGRID_HAVE_FTZ 1
#endif

namespace dipolegrid {

namespace {

// Gaussian tails drive products into the subnormal range, where x86
// arithmetic is two orders of magnitude slower. Values below 2.2e-308 carry
// nothing for per-step normalized probabilities, so the recursions flush them.
class FlushSubnormals {
 public:
#ifdef DIPOLEGRID_HAVE_FTZ
  FlushSubnormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushSubnormals() { _mm_setcsr(saved_); }

 private:
  unsigned int saved_;
#endif
};

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

std::vector<std::size_t> support(const RowMatrix& m, Eigen::Index t) {
  std::vector<std::size_t> out;
  for (Eigen::Index k = 0; k < m.cols(); ++k) {
    if (m(t, k) > 0.0) out.push_back(static_cast<std::size_t>(k));
  }
  return out;
}

// Normalize exp(u) into `row`; returns log of the normalizer.
double normalize_log(const Eigen::VectorXd& u, RowMatrix& alpha, Eigen::Index t) {
  double peak = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < u.size(); ++k) {
    if (u(k) > peak) peak = u(k);
  }
  if (!std::isfinite(peak)) {
    throw NumericError("forward recursion underflowed at t = " + std::to_string(t + 1) +
                       ": no voxel is reachable and consistent with the measurement");
  }
  double total = 0.0;
  for (Eigen::Index k = 0; k < u.size(); ++k) {
    const double a = std::exp(u(k) - peak);
    alpha(t, k) = a;
    total += a;
  }
  alpha.row(t) /= total;
  return peak + std::log(total);
}

void backward_pass(const DiscreteModel& model, const RowMatrix& alpha, const Eigen::VectorXd& log_scale,
                   const SmoothOptions& options, RowMatrix& beta, Eigen::MatrixXd* pair_moment,
                   double* expected_log) {
  const FlushSubnormals ftz;
  const Eigen::Index T = static_cast<Eigen::Index>(model.steps());
  const std::size_t K = model.states();
  const TransitionKernel& W = *model.transition;
  const Eigen::MatrixXd* x = options.pair_features;
  // Row contraction against a dense g covers beta and, for center features,
  // the pair moment; the explicit per-pair loop is kept for the rest.
  const bool contracted = !expected_log && (!x || (options.features_are_centers && x->cols() == 3));

  beta.setZero(T, static_cast<Eigen::Index>(K));
  if (options.full_beta) {
    beta.row(T - 1).setOnes();
  } else {
    for (std::size_t k : support(alpha, T - 1)) beta(T - 1, k) = 1.0;
  }

  std::vector<std::size_t> cols, rows;
  std::vector<double> g, dense_g(K), w(K);
  Eigen::VectorXd acc;
  if (x) acc.resize(x->cols());

  for (Eigen::Index t = T - 1; t >= 1; --t) {
    cols.clear();
    g.clear();
    std::fill(dense_g.begin(), dense_g.end(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const bool use = options.full_beta ? std::isfinite(model.log_emission(t, k)) : alpha(t, k) > 0.0;
      if (!use) continue;
      const double v = std::exp(model.log_emission(t, k) - log_scale(t)) * beta(t, k);
      if (v == 0.0) continue;
      if (!std::isfinite(v)) throw NumericError("backward recursion overflowed at t = " + std::to_string(t + 1));
      cols.push_back(k);
      g.push_back(v);
      dense_g[k] = v;
    }
    rows.clear();
    if (options.full_beta) {
      for (std::size_t l = 0; l < K; ++l) rows.push_back(l);
    } else {
      rows = support(alpha, t - 1);
    }
    for (std::size_t l : rows) {
      const double a = alpha(t - 1, l);
      if (contracted) {
        double b = 0.0;
        Vec3 m;
        const bool want = x && a > 0.0;
        if (W.contract(l, dense_g, b, want ? &m : nullptr)) {
          beta(t - 1, l) = b;
          if (want) pair_moment->noalias() += (a * m) * x->row(l);
          continue;
        }
      }
      W.row(l, cols, std::span<double>(w.data(), cols.size()));
      double b = 0.0;
      for (std::size_t j = 0; j < cols.size(); ++j) b += w[j] * g[j];
      beta(t - 1, l) = b;

      if (a <= 0.0 || (!x && !expected_log)) continue;
      if (x) acc.setZero();
      for (std::size_t j = 0; j < cols.size(); ++j) {
        const double eta = a * w[j] * g[j];
        if (eta == 0.0) continue;
        if (x) acc.noalias() += eta * x->row(cols[j]).transpose();
        if (expected_log) *expected_log += eta * std::log(w[j]);
      }
      if (x) pair_moment->noalias() += acc * x->row(l);
    }
  }
}

}  // namespace

void DiscreteModel::validate() const {
  const Eigen::Index K = log_initial.size();
  if (K == 0) throw ValidationError("discrete model has no states");
  if (!transition || transition->size() != static_cast<std::size_t>(K)) {
    throw ValidationError("transition kernel size does not match the state count");
  }
  if (log_emission.rows() < 1 || log_emission.cols() != K) {
    throw ValidationError("emission matrix must be T x K with T >= 1");
  }
  if (log_emission.array().isNaN().any() || (log_emission.array() == std::numeric_limits<double>::infinity()).any()) {
    throw ValidationError("log emissions must not be NaN or +inf");
  }
  if (log_initial.array().isNaN().any()) throw ValidationError("initial log weights must not be NaN");
}

Eigen::MatrixXd predicted_fields(const VoxelGrid& grid, const SensorArray& sensors, const Vec3& moment,
                                 const FieldConstants& consts) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(grid.size()), static_cast<Eigen::Index>(sensors.size()));
  DipoleState d;
  d.moment = moment;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    d.location = grid.center(k);
    out.row(static_cast<Eigen::Index>(k)) = sensor_response(d, sensors, consts).transpose();
  }
  return out;
}

RowMatrix log_emission(const Eigen::MatrixXd& measurements, const Eigen::MatrixXd& fields,
                       const Eigen::MatrixXd& V) {
  const Eigen::Index T = measurements.rows();
  const Eigen::Index L = measurements.cols();
  const Eigen::Index K = fields.rows();
  if (fields.cols() != L) throw ValidationError("predicted fields and measurements disagree on sensor count");
  if (V.rows() != L || V.cols() != L) throw ValidationError("V must be L x L");
  if (!measurements.allFinite()) throw ValidationError("measurements must be finite");

  RowMatrix out(T, K);
  const bool scalar = V.isApprox(V(0, 0) * Eigen::MatrixXd::Identity(L, L), 0.0) && V(0, 0) > 0.0;
  if (scalar) {
    const double s2 = V(0, 0);
    const double c = -0.5 * L * (kLog2Pi + std::log(s2));
    for (Eigen::Index k = 0; k < K; ++k) {
      const Eigen::RowVectorXd f = fields.row(k);
      for (Eigen::Index t = 0; t < T; ++t) {
        out(t, k) = c - 0.5 * (measurements.row(t) - f).squaredNorm() / s2;
      }
    }
    return out;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success) throw ValidationError("V must be positive definite");
  const Eigen::MatrixXd Lw = llt.matrixL();
  const double log_det = 2.0 * Lw.diagonal().array().log().sum();
  if (!std::isfinite(log_det)) throw ValidationError("V must be positive definite");
  const Eigen::MatrixXd yw = llt.matrixL().solve(measurements.transpose());
  const Eigen::MatrixXd fw = llt.matrixL().solve(fields.transpose());
  const double c = -0.5 * (L * kLog2Pi + log_det);
  for (Eigen::Index k = 0; k < K; ++k) {
    for (Eigen::Index t = 0; t < T; ++t) out(t, k) = c - 0.5 * (yw.col(t) - fw.col(k)).squaredNorm();
  }
  return out;
}

RowMatrix build_emission(const Eigen::MatrixXd& measurements, const VoxelGrid& grid,
                         const ModelParams& params, const SensorArray& sensors,
                         const FieldConstants& consts) {
  return log_emission(measurements, predicted_fields(grid, sensors, params.q_fixed.at(0), consts), params.V);
}

DiscreteModel build_model(const ModelParams& params, const VoxelGrid& grid,
                          const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                          PriorWeighting weighting, const FieldConstants& consts) {
  DiscreteModel m;
  m.log_initial = initial_log_weights(params, grid, weighting);
  m.transition = make_transition(params, grid, weighting);
  m.log_emission = build_emission(measurements, grid, params, sensors, consts);
  return m;
}

ForwardResult forward(const DiscreteModel& model) {
  model.validate();
  const FlushSubnormals ftz;
  const Eigen::Index T = static_cast<Eigen::Index>(model.steps());
  const std::size_t K = model.states();
  ForwardResult out;
  out.alpha.resize(T, static_cast<Eigen::Index>(K));
  out.log_scale.resize(T);

  Eigen::VectorXd u = model.log_initial + model.log_emission.row(0).transpose();
  out.log_scale(0) = normalize_log(u, out.alpha, 0);

  Eigen::VectorXd pred(K);
  for (Eigen::Index t = 1; t < T; ++t) {
    pred.setZero();
    for (std::size_t l : support(out.alpha, t - 1)) {
      model.transition->add_row(l, out.alpha(t - 1, l), std::span<double>(pred.data(), K));
    }
    for (std::size_t k = 0; k < K; ++k) {
      u(k) = pred(k) > 0.0 ? std::log(pred(k)) + model.log_emission(t, k)
                           : -std::numeric_limits<double>::infinity();
    }
    out.log_scale(t) = normalize_log(u, out.alpha, t);
  }
  return out;
}

RowMatrix backward(const DiscreteModel& model, const ForwardResult& fwd) {
  RowMatrix beta;
  backward_pass(model, fwd.alpha, fwd.log_scale, SmoothOptions{}, beta, nullptr, nullptr);
  return beta;
}

SmoothingResult smooth(const DiscreteModel& model, const SmoothOptions& options) {
  ForwardResult fwd = forward(model);
  SmoothingResult r;
  const Eigen::Index D = options.pair_features ? options.pair_features->cols() : 0;
  if (options.pair_features &&
      options.pair_features->rows() != static_cast<Eigen::Index>(model.states())) {
    throw ValidationError("pair features must have one row per state");
  }
  r.pair_moment = Eigen::MatrixXd::Zero(D, D);
  backward_pass(model, fwd.alpha, fwd.log_scale, options, r.beta,
                options.pair_features ? &r.pair_moment : nullptr,
                options.expected_log_transition ? &r.expected_log_transition : nullptr);
  r.alpha = std::move(fwd.alpha);
  r.log_scale = std::move(fwd.log_scale);
  r.xi = r.alpha.cwiseProduct(r.beta);
  r.log_likelihood = r.log_scale.sum();
  return r;
}

std::vector<Eigen::MatrixXd> pairwise(const DiscreteModel& model, const SmoothingResult& result) {
  const Eigen::Index T = static_cast<Eigen::Index>(model.steps());
  const std::size_t K = model.states();
  std::vector<Eigen::MatrixXd> eta;
  std::vector<double> w(K);
  Eigen::VectorXd g(K);
  for (Eigen::Index t = 1; t < T; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      g(k) = std::exp(model.log_emission(t, k) - result.log_scale(t)) * result.beta(t, k);
    }
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(K, K);
    for (std::size_t l = 0; l < K; ++l) {
      const double a = result.alpha(t - 1, l);
      if (a == 0.0) continue;
      model.transition->full_row(l, w);
      for (std::size_t k = 0; k < K; ++k) e(l, k) = a * w[k] * g(k);
    }
    eta.push_back(std::move(e));
  }
  return eta;
}

void write_posterior_csv(std::ostream& out, const VoxelGrid& grid, const RowMatrix& xi) {
  write_csv_row(out, {"t", "k", "x", "y", "z", "xi"});
  for (Eigen::Index t = 0; t < xi.rows(); ++t) {
    for (Eigen::Index k = 0; k < xi.cols(); ++k) {
      const double p = xi(t, k);
      if (p == 0.0) continue;
      const Vec3& c = grid.center(static_cast<std::size_t>(k));
      write_csv_row(out, {std::to_string(t + 1), std::to_string(k), format_double(c(0)),
                          format_double(c(1)), format_double(c(2)), format_double(p)});
    }
  }
}

json smoothing_to_json(const SmoothingResult& result) {
  auto rows = [](const RowMatrix& m) {
    json out = json::array();
    for (Eigen::Index t = 0; t < m.rows(); ++t) {
      json row = json::array();
      for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(t, k));
      out.push_back(std::move(row));
    }
    return out;
  };
  return {{"steps", result.xi.rows()},
          {"states", result.xi.cols()},
          {"log_likelihood", result.log_likelihood},
          {"log_scale", vector_to_json(result.log_scale)},
          {"alpha", rows(result.alpha)},
          {"beta", rows(result.beta)},
          {"xi", rows(result.xi)}};
}

}  // namespace dipolegrid

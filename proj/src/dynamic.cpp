#include "dipolegrid/dynamic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dipolegrid/errors.hpp"

namespace dipolegrid {

void DynamicConfig::validate() const {
  initial_roi.validate();
  head.validate();
  for (int k : initial_mesh) {
    if (k < 1) throw ValidationError("initial mesh counts must be >= 1");
  }
  if (mesh_increment < 0) throw ValidationError("mesh_increment must be >= 0");
  if (!(sigma_multiplier > 0.0)) throw ValidationError("sigma_multiplier must be > 0");
  if (max_outer_iters < 1) throw ValidationError("max_outer_iters must be >= 1");
  if (mesh_cap < 1) throw ValidationError("mesh_cap must be >= 1");
}

RoiBox shrink_roi(const RowMatrix& xi, const VoxelGrid& grid, double multiplier, const RoiBox& clip,
                  std::array<bool, 3>* widened) {
  if (xi.cols() != static_cast<Eigen::Index>(grid.size()) || xi.rows() < 1) {
    throw ValidationError("xi must be T x K for the grid");
  }
  if (!(multiplier > 0.0)) throw ValidationError("sigma multiplier must be > 0");
  RoiBox box;
  for (int i = 0; i < 3; ++i) {
    box.axes[i] = {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  }
  for (Eigen::Index t = 0; t < xi.rows(); ++t) {
    Vec3 mean = Vec3::Zero();
    for (Eigen::Index k = 0; k < xi.cols(); ++k) {
      if (xi(t, k) != 0.0) mean += xi(t, k) * grid.center(static_cast<std::size_t>(k));
    }
    Vec3 var = Vec3::Zero();
    for (Eigen::Index k = 0; k < xi.cols(); ++k) {
      if (xi(t, k) == 0.0) continue;
      const Vec3 d = grid.center(static_cast<std::size_t>(k)) - mean;
      var += xi(t, k) * d.cwiseProduct(d);
    }
    for (int i = 0; i < 3; ++i) {
      const double sd = std::sqrt(var(i));
      box.axes[i].lo = std::min(box.axes[i].lo, mean(i) - multiplier * sd);
      box.axes[i].hi = std::max(box.axes[i].hi, mean(i) + multiplier * sd);
    }
  }
  box = clip_to(box, clip);
  if (widened) widened->fill(false);
  for (int i = 0; i < 3; ++i) {
    if (box.axes[i].width() > 0.0) continue;
    const double w = grid.cell_width(i);
    if (w <= 0.0) continue;
    const double p = box.axes[i].lo;
    box.axes[i] = {std::max(p - 0.5 * w, clip.axes[i].lo), std::min(p + 0.5 * w, clip.axes[i].hi)};
    if (widened) (*widened)[i] = true;
  }
  return box;
}

Mesh next_mesh(const Mesh& mesh, const RoiBox& roi, int increment, int cap) {
  Mesh out{};
  for (int i = 0; i < 3; ++i) {
    if (roi.axes[i].width() <= 0.0) {
      out[i] = 1;
    } else {
      out[i] = std::max(mesh[i], std::min(mesh[i] + increment, cap));
    }
  }
  return out;
}

int coverage_violations(const Eigen::MatrixXd& true_locations, const RoiBox& roi) {
  int count = 0;
  for (Eigen::Index t = 0; t < true_locations.rows(); ++t) {
    if (!roi.contains(Vec3(true_locations.row(t).transpose()))) ++count;
  }
  return count;
}

DynamicResult dynamic_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                          const ModelParams& init, const DynamicConfig& dconfig, const EmConfig& config,
                          const Eigen::MatrixXd* true_locations) {
  dconfig.validate();
  config.validate();
  init.validate(static_cast<long>(sensors.size()));
  if (init.sources != 1) throw ValidationError("dynamic_fit handles one source; use switch_fit");
  if (true_locations && (true_locations->rows() != measurements.rows() || true_locations->cols() != 3)) {
    throw ValidationError("true locations must be T x 3");
  }
  const RoiBox clip = bounding_box(dconfig.head);
  const Vec3& moment = init.q_fixed.at(0);

  VoxelGrid grid(dconfig.initial_roi, dconfig.initial_mesh);
  ModelParams params = init;
  EmTrace trace;
  double prev_ll = -std::numeric_limits<double>::infinity();
  std::optional<VoxelGrid> prev_grid;
  auto same_grid = [](const VoxelGrid& a, const VoxelGrid& b) { return a.roi() == b.roi() && a.mesh() == b.mesh(); };

  for (int j = 1; j <= dconfig.max_outer_iters; ++j) {
    const LatentChain chain(grid, 0, measurements, sensors, moment, config.consts);
    const int violations = true_locations ? coverage_violations(*true_locations, grid.roi()) : 0;
    RowMatrix xi;
    bool done = false;
    if (dconfig.shrink_after_convergence) {
      ChainFit inner = fit_chain(chain, params, config);
      trace.monotonicity_violations += inner.trace.monotonicity_violations;
      const int first = static_cast<int>(trace.iterations.size());
      for (EmIteration it : inner.trace.iterations) {
        it.iteration += first;
        it.coverage_violations = violations;
        trace.iterations.push_back(std::move(it));
      }
      const EmIteration& head = inner.trace.iterations.front();
      done = head.q - head.q_prev <= config.tol * std::abs(head.q);
      params = inner.params;
      prev_ll = inner.trace.final_loglik;
      xi = std::move(inner.posterior.xi);
    } else {
      LatentChain::EStep e = chain.e_step(params, config.weighting, config.mask.V);
      const double ll = e.posterior.log_likelihood;
      // Likelihoods on different grids are not comparable.
      if (prev_grid && same_grid(*prev_grid, grid)) check_monotone(config, trace, prev_ll, ll, "log-likelihood", j);
      const double q_old = chain.q_value(params, e, config.weighting);
      const ModelParams next = chain.m_step(params, e.stats, config.mask, config.constraints);
      const double q_new = chain.q_value(next, e, config.weighting);
      check_monotone(config, trace, q_old, q_new, "Q", j);

      EmIteration it;
      it.iteration = j;
      it.q = q_new;
      it.q_prev = q_old;
      it.loglik = ll;
      it.change = param_change(params, next);
      it.rois = {grid.roi()};
      it.meshes = {grid.mesh()};
      it.coverage_violations = violations;
      trace.iterations.push_back(std::move(it));

      done = config.stopping == StoppingRule::kQGain
                 ? q_new - q_old <= config.tol * std::abs(q_new)
                 : (j > 1 && std::abs(ll - prev_ll) <= config.tol * std::abs(ll));
      params = next;
      prev_ll = ll;
      xi = std::move(e.posterior.xi);
    }

    prev_grid = grid;
    const RoiBox roi = dconfig.shrink ? shrink_roi(xi, grid, dconfig.sigma_multiplier, clip) : grid.roi();
    grid = VoxelGrid(roi, next_mesh(grid.mesh(), roi, dconfig.mesh_increment, dconfig.mesh_cap));
    if (done) {
      trace.converged = true;
      break;
    }
  }

  const LatentChain chain(grid, 0, measurements, sensors, moment, config.consts);
  LatentChain::EStep last = chain.e_step(params, config.weighting, false, true);
  if (prev_grid && same_grid(*prev_grid, grid)) {
    check_monotone(config, trace, prev_ll, last.posterior.log_likelihood, "log-likelihood",
                   static_cast<int>(trace.iterations.size()) + 1);
  }
  trace.final_loglik = last.posterior.log_likelihood;
  return DynamicResult{params, grid, std::move(trace), std::move(last.posterior)};
}

}  // namespace dipolegrid

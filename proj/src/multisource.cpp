#include "dipolegrid/multisource.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/forward.hpp"
#include "dipolegrid/io.hpp"

namespace dipolegrid {

JointGrid::JointGrid(std::vector<VoxelGrid> grids) : grids_(std::move(grids)) {
  if (grids_.empty()) throw ValidationError("joint grid needs at least one source grid");
  for (const auto& g : grids_) {
    if (size_ > std::numeric_limits<std::size_t>::max() / g.size()) {
      throw ValidationError("joint state count overflows");
    }
    size_ *= g.size();
  }
}

std::size_t JointGrid::flat_index(std::span<const std::size_t> idx) const {
  if (idx.size() != grids_.size()) throw ValidationError("joint index needs one entry per source");
  std::size_t k = 0;
  for (std::size_t n = grids_.size(); n-- > 0;) {
    if (idx[n] >= grids_[n].size()) throw ValidationError("joint index out of range");
    k = k * grids_[n].size() + idx[n];
  }
  return k;
}

std::vector<std::size_t> JointGrid::unravel(std::size_t k) const {
  if (k >= size_) throw ValidationError("joint flat index out of range");
  std::vector<std::size_t> idx(grids_.size());
  for (std::size_t n = 0; n < grids_.size(); ++n) {
    idx[n] = k % grids_[n].size();
    k /= grids_[n].size();
  }
  return idx;
}

namespace {

std::vector<int> iota_sources(int n) {
  std::vector<int> s(static_cast<std::size_t>(n));
  std::iota(s.begin(), s.end(), 0);
  return s;
}

}  // namespace

JointFit joint_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors, const JointGrid& joint,
                   const ModelParams& init, const EmConfig& config, std::size_t cap) {
  config.validate();
  init.validate(static_cast<long>(sensors.size()));
  if (init.sources != joint.sources()) throw ValidationError("joint grid and parameters disagree on N");
  if (joint.size() > cap) {
    throw ValidationError("joint chain has " + std::to_string(joint.size()) + " states, above the cap of " +
                          std::to_string(cap) + "; use the switch procedure");
  }
  const LatentChain chain(joint.grids(), iota_sources(joint.sources()), measurements, sensors, init.q_fixed,
                          config.consts);
  ChainFit r = fit_chain(chain, init, config);
  JointFit out{std::move(r.params), std::move(r.trace), std::move(r.posterior), {}};
  for (int n = 0; n < joint.sources(); ++n) out.marginals.push_back(marginalize(out.posterior.xi, joint, n));
  return out;
}

Eigen::MatrixXd joint_transition(const ModelParams& params, const JointGrid& joint, PriorWeighting weighting) {
  params.validate();
  if (params.sources != joint.sources()) throw ValidationError("joint grid and parameters disagree on N");
  std::vector<Eigen::MatrixXd> factors;
  for (int n = 0; n < joint.sources(); ++n) {
    factors.push_back(build_transition(params, joint.grid(n), weighting, n));
  }
  return ProductKernel(std::move(factors)).dense();
}

RowMatrix marginalize(const RowMatrix& joint_xi, const JointGrid& joint, int n) {
  if (n < 0 || n >= joint.sources()) throw ValidationError("source index out of range");
  if (joint_xi.cols() != static_cast<Eigen::Index>(joint.size())) {
    throw ValidationError("joint posterior has the wrong state count");
  }
  std::size_t stride = 1;
  for (int i = 0; i < n; ++i) stride *= joint.grid(i).size();
  const std::size_t Kn = joint.grid(n).size();
  RowMatrix out = RowMatrix::Zero(joint_xi.rows(), static_cast<Eigen::Index>(Kn));
  for (Eigen::Index k = 0; k < joint_xi.cols(); ++k) {
    const auto kn = static_cast<Eigen::Index>((static_cast<std::size_t>(k) / stride) % Kn);
    out.col(kn) += joint_xi.col(k);
  }
  return out;
}

Eigen::MatrixXd posterior_means(const RowMatrix& xi, const VoxelGrid& grid) {
  if (xi.cols() != static_cast<Eigen::Index>(grid.size())) throw ValidationError("xi must be T x K");
  Eigen::MatrixXd centers(xi.cols(), 3);
  for (Eigen::Index k = 0; k < xi.cols(); ++k) centers.row(k) = grid.center(static_cast<std::size_t>(k)).transpose();
  return xi * centers;
}

namespace {

// T x L fields of one source placed at each row of `locations`.
Eigen::MatrixXd conditioning_fields(const Eigen::MatrixXd& locations, const Vec3& moment,
                                    const SensorArray& sensors, const FieldConstants& consts) {
  Eigen::MatrixXd out(locations.rows(), static_cast<Eigen::Index>(sensors.size()));
  for (Eigen::Index t = 0; t < locations.rows(); ++t) {
    const DipoleState d{Vec3(locations.row(t).transpose()), moment};
    out.row(t) = sensor_response(d, sensors, consts).transpose();
  }
  return out;
}

struct SwitchRun {
  const DynamicConfig* dynamic = nullptr;
  const std::vector<Eigen::MatrixXd>* truth = nullptr;
  int max_iters = 0;
};

SwitchFit run_switch(const Eigen::MatrixXd& Y, const SensorArray& sensors, std::vector<VoxelGrid> grids,
                     const ModelParams& init, const EmConfig& config, const SwitchRun& run) {
  const int N = init.sources;
  const Eigen::Index T = Y.rows();
  if (static_cast<int>(grids.size()) != N) throw ValidationError("need one grid per source");
  if (run.truth) {
    if (static_cast<int>(run.truth->size()) != N) throw ValidationError("need one true trajectory per source");
    for (const auto& m : *run.truth) {
      if (m.rows() != T || m.cols() != 3) throw ValidationError("true locations must be T x 3");
    }
  }
  const RoiBox clip = run.dynamic ? bounding_box(run.dynamic->head) : RoiBox{};

  SwitchFit out;
  out.state.grids = grids;
  std::vector<Eigen::MatrixXd> fields(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    const Eigen::VectorXd prior = build_initial(init, grids[n], PriorWeighting::kNormalized, n);
    out.state.marginals.push_back(prior.transpose().replicate(T, 1));
    out.state.conditioning.push_back(posterior_means(out.state.marginals.back(), grids[n]));
    fields[n] = conditioning_fields(out.state.conditioning[n], init.q_fixed[n], sensors, config.consts);
  }
  out.state.log_likelihoods.assign(static_cast<std::size_t>(N), 0.0);

  auto effective = [&](int n) {
    Eigen::MatrixXd Y_eff = Y;
    for (int m = 0; m < N; ++m) {
      if (m != n) Y_eff -= fields[m];
    }
    return Y_eff;
  };
  auto condition_on = [&](int n, const RowMatrix& xi) {
    out.state.marginals[n] = xi;
    out.state.conditioning[n] = posterior_means(xi, out.state.grids[n]);
    fields[n] = conditioning_fields(out.state.conditioning[n], init.q_fixed[n], sensors, config.consts);
  };
  auto violations = [&]() {
    int v = 0;
    if (run.truth) {
      for (int n = 0; n < N; ++n) v += coverage_violations((*run.truth)[n], out.state.grids[n].roi());
    }
    return v;
  };

  ModelParams params = init;
  double prev_ll = -std::numeric_limits<double>::infinity();
  bool grid_changed = false;
  for (int j = 1; j <= run.max_iters; ++j) {
    const ModelParams start = params;
    double q_sum = 0.0;
    double q_prev_sum = 0.0;
    double ll = 0.0;
    EmIteration it;
    it.iteration = j;
    for (int n = 0; n < N; ++n) {
      const VoxelGrid& grid = out.state.grids[n];
      it.rois.push_back(grid.roi());
      it.meshes.push_back(grid.mesh());
      const LatentChain chain(grid, n, effective(n), sensors, init.q_fixed[n], config.consts);
      LatentChain::EStep e = chain.e_step(params, config.weighting, config.mask.V);
      ll = e.posterior.log_likelihood;
      // With several sources the effective data move between sweeps, so only
      // the single-chain likelihood sequence is comparable.
      if (N == 1 && j > 1 && !grid_changed) check_monotone(config, out.trace, prev_ll, ll, "log-likelihood", j);
      const double q_old = chain.q_value(params, e, config.weighting);
      const ModelParams next = chain.m_step(params, e.stats, config.mask, config.constraints);
      const double q_new = chain.q_value(next, e, config.weighting);
      check_monotone(config, out.trace, q_old, q_new, "Q", j);
      q_sum += q_new;
      q_prev_sum += q_old;
      params = next;
      out.state.log_likelihoods[n] = ll;
      condition_on(n, e.posterior.xi);
    }
    it.q = q_sum;
    it.q_prev = q_prev_sum;
    it.loglik = ll;
    it.change = param_change(start, params);
    it.coverage_violations = violations();
    out.trace.iterations.push_back(std::move(it));

    const bool done = config.stopping == StoppingRule::kQGain
                          ? q_sum - q_prev_sum <= config.tol * std::abs(q_sum)
                          : (j > 1 && std::abs(ll - prev_ll) <= config.tol * std::abs(ll));
    prev_ll = ll;
    grid_changed = false;
    if (run.dynamic && run.dynamic->shrink) {
      for (int n = 0; n < N; ++n) {
        const VoxelGrid& grid = out.state.grids[n];
        const RoiBox roi = shrink_roi(out.state.marginals[n], grid, run.dynamic->sigma_multiplier, clip);
        const Mesh mesh = next_mesh(grid.mesh(), roi, run.dynamic->mesh_increment, run.dynamic->mesh_cap);
        if (!(roi == grid.roi()) || mesh != grid.mesh()) grid_changed = true;
        out.state.grids[n] = VoxelGrid(roi, mesh);
      }
    } else if (run.dynamic) {
      for (int n = 0; n < N; ++n) {
        const VoxelGrid& grid = out.state.grids[n];
        const Mesh mesh = next_mesh(grid.mesh(), grid.roi(), run.dynamic->mesh_increment, run.dynamic->mesh_cap);
        if (mesh != grid.mesh()) grid_changed = true;
        out.state.grids[n] = VoxelGrid(grid.roi(), mesh);
      }
    }
    if (done) {
      out.trace.converged = true;
      break;
    }
  }

  // Final sweep: posteriors under the final parameters, no update.
  double ll = 0.0;
  for (int n = 0; n < N; ++n) {
    const LatentChain chain(out.state.grids[n], n, effective(n), sensors, init.q_fixed[n], config.consts);
    LatentChain::EStep e = chain.e_step(params, config.weighting, false, true);
    ll = e.posterior.log_likelihood;
    out.state.log_likelihoods[n] = ll;
    condition_on(n, e.posterior.xi);
  }
  if (N == 1 && !grid_changed) {
    check_monotone(config, out.trace, prev_ll, ll, "log-likelihood",
                   static_cast<int>(out.trace.iterations.size()) + 1);
  }
  out.trace.final_loglik = ll;
  out.params = params;
  return out;
}

}  // namespace

SwitchFit switch_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                     const std::vector<VoxelGrid>& grids, const ModelParams& init, const EmConfig& config) {
  config.validate();
  init.validate(static_cast<long>(sensors.size()));
  SwitchRun run;
  run.max_iters = config.max_iters;
  return run_switch(measurements, sensors, grids, init, config, run);
}

SwitchFit dynamic_switch_fit(const Eigen::MatrixXd& measurements, const SensorArray& sensors,
                             const ModelParams& init, const DynamicConfig& dconfig, const EmConfig& config,
                             const std::vector<Eigen::MatrixXd>* true_locations) {
  dconfig.validate();
  config.validate();
  init.validate(static_cast<long>(sensors.size()));
  if (dconfig.shrink_after_convergence) {
    throw ValidationError("shrink_after_convergence is not supported with the switch procedure");
  }
  SwitchRun run;
  run.dynamic = &dconfig;
  run.truth = true_locations;
  run.max_iters = dconfig.max_outer_iters;
  const std::vector<VoxelGrid> grids(static_cast<std::size_t>(init.sources),
                                     VoxelGrid(dconfig.initial_roi, dconfig.initial_mesh));
  return run_switch(measurements, sensors, grids, init, config, run);
}

void write_marginals_csv(std::ostream& out, const std::vector<VoxelGrid>& grids,
                         const std::vector<RowMatrix>& marginals) {
  if (grids.size() != marginals.size()) throw ValidationError("need one grid per marginal");
  write_csv_row(out, {"source", "t", "k", "x", "y", "z", "xi"});
  for (std::size_t n = 0; n < grids.size(); ++n) {
    const RowMatrix& xi = marginals[n];
    for (Eigen::Index t = 0; t < xi.rows(); ++t) {
      for (Eigen::Index k = 0; k < xi.cols(); ++k) {
        const double p = xi(t, k);
        if (p == 0.0) continue;
        const Vec3& c = grids[n].center(static_cast<std::size_t>(k));
        write_csv_row(out, {std::to_string(n + 1), std::to_string(t + 1), std::to_string(k), format_double(c(0)),
                            format_double(c(1)), format_double(c(2)), format_double(p)});
      }
    }
  }
}

}  // namespace dipolegrid

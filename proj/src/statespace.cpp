#include "dipolegrid/statespace.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/io.hpp"
#include "dipolegrid/random.hpp"

namespace dipolegrid {

namespace {

void require_square(const Eigen::MatrixXd& m, long n, const char* name) {
  if (m.rows() != n || m.cols() != n) {
    throw ValidationError(std::string(name) + " must be " + std::to_string(n) + "x" +
                          std::to_string(n));
  }
}

void require_symmetric(const Eigen::MatrixXd& m, const char* name) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ValidationError(std::string(name) + " must be symmetric");
  }
}

Eigen::MatrixXd diag(std::initializer_list<double> values) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return v.asDiagonal();
}

Eigen::VectorXd vec(std::initializer_list<double> values) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return v;
}

Eigen::MatrixXd block_diag(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(a.rows() + b.rows(), a.cols() + b.cols());
  out.topLeftCorner(a.rows(), a.cols()) = a;
  out.bottomRightCorner(b.rows(), b.cols()) = b;
  return out;
}

Eigen::VectorXd stack(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd out(a.size() + b.size());
  out << a, b;
  return out;
}

}  // namespace

void ModelParams::validate(long sensor_count) const {
  if (sources < 1) throw ValidationError("source count must be >= 1");
  const long d = state_dim();
  if (mu0.size() != d) throw ValidationError("mu0 must have length " + std::to_string(d));
  if (b.size() != d) throw ValidationError("b must have length " + std::to_string(d));
  require_square(sigma0, d, "Sigma0");
  require_square(A, d, "A");
  require_square(sigma, d, "Sigma");
  require_symmetric(sigma0, "Sigma0");
  require_symmetric(sigma, "Sigma");
  if (V.rows() != V.cols() || V.rows() == 0) throw ValidationError("V must be square");
  if (sensor_count >= 0 && V.rows() != sensor_count) {
    throw ValidationError("V must be " + std::to_string(sensor_count) + "x" +
                          std::to_string(sensor_count));
  }
  require_symmetric(V, "V");
  if (static_cast<int>(q_fixed.size()) != sources) {
    throw ValidationError("q_fixed needs one moment per source");
  }
  if (!mu0.allFinite() || !b.allFinite() || !A.allFinite() || !sigma0.allFinite() ||
      !sigma.allFinite() || !V.allFinite()) {
    throw ValidationError("parameters must be finite");
  }
}

ModelParams ModelParams::source_block(int n) const {
  const int o = offset(n);
  ModelParams single;
  single.sources = 1;
  single.mu0 = mu0.segment(o, kSourceDim);
  single.sigma0 = sigma0.block(o, o, kSourceDim, kSourceDim);
  single.A = A.block(o, o, kSourceDim, kSourceDim);
  single.b = b.segment(o, kSourceDim);
  single.sigma = sigma.block(o, o, kSourceDim, kSourceDim);
  single.V = V;
  single.q_fixed = {q_fixed.at(n)};
  return single;
}

void ModelParams::set_source_block(int n, const ModelParams& single) {
  const int o = offset(n);
  mu0.segment(o, kSourceDim) = single.mu0;
  sigma0.block(o, o, kSourceDim, kSourceDim) = single.sigma0;
  A.block(o, o, kSourceDim, kSourceDim) = single.A;
  b.segment(o, kSourceDim) = single.b;
  sigma.block(o, o, kSourceDim, kSourceDim) = single.sigma;
  q_fixed.at(n) = single.q_fixed.front();
}

Vec3 ModelParams::initial_location_mean(int n) const { return mu0.segment<3>(offset(n)); }

Eigen::Matrix3d ModelParams::initial_location_cov(int n) const {
  return sigma0.block<3, 3>(offset(n), offset(n));
}

Eigen::Matrix3d ModelParams::transition_location_cov(int n) const {
  return sigma.block<3, 3>(offset(n), offset(n));
}

ModelParams case1_params(int sensor_count) {
  ModelParams p;
  p.sources = 1;
  p.mu0 = vec({-2, 1, 5, 3, 3, 3});
  p.sigma0 = diag({0.0225, 0.0225, 0.0225, 1e-4, 1e-4, 1e-4});
  p.A = diag({0.75, 0.8, 0.9, 1, 1, 1});
  p.b = vec({0.75, -0.5, 0.25, 0, 0, 0});
  p.sigma = diag({0.25, 0.25, 0.25, 1e-4, 1e-4, 1e-4});
  p.V = 6.25e-5 * Eigen::MatrixXd::Identity(sensor_count, sensor_count);
  p.q_fixed = {Vec3(3, 3, 3)};
  return p;
}

ModelParams case2_params(int sensor_count) {
  ModelParams p;
  p.sources = 2;
  p.mu0 = stack(vec({1, 1, 5, 3, 3, 3}), vec({-1, 2, 4, 3, 3, 3}));
  const Eigen::MatrixXd s0 = diag({0.01, 0.01, 0.01, 1e-4, 1e-4, 1e-4});
  p.sigma0 = block_diag(s0, s0);
  p.A = block_diag(diag({0.5, 0.8, 0.9, 1, 1, 1}), diag({0.45, 0.75, 0.85, 1, 1, 1}));
  p.b = stack(vec({2, -1, 0.25, 0, 0, 0}), vec({1.8, -0.8, 0.5, 0, 0, 0}));
  const Eigen::MatrixXd s = diag({0.25, 0.25, 0.09, 1e-4, 1e-4, 1e-4});
  p.sigma = block_diag(s, s);
  p.V = 6.25e-5 * Eigen::MatrixXd::Identity(sensor_count, sensor_count);
  p.q_fixed = {Vec3(3, 3, 3), Vec3(3, 3, 3)};
  return p;
}

Eigen::VectorXd ar_mean(const ModelParams& params, const Eigen::VectorXd& state) {
  if (state.size() != params.state_dim()) throw ValidationError("state dimension mismatch");
  return params.A * state + params.b;
}

std::vector<DipoleState> unpack_state(const Eigen::VectorXd& state, int sources) {
  std::vector<DipoleState> dipoles(sources);
  for (int n = 0; n < sources; ++n) {
    dipoles[n].location = state.segment<3>(ModelParams::offset(n));
    dipoles[n].moment = state.segment<3>(ModelParams::offset(n) + 3);
  }
  return dipoles;
}

Eigen::VectorXd pack_state(const std::vector<DipoleState>& dipoles) {
  Eigen::VectorXd state(kSourceDim * static_cast<Eigen::Index>(dipoles.size()));
  for (std::size_t n = 0; n < dipoles.size(); ++n) {
    state.segment<3>(ModelParams::offset(static_cast<int>(n))) = dipoles[n].location;
    state.segment<3>(ModelParams::offset(static_cast<int>(n)) + 3) = dipoles[n].moment;
  }
  return state;
}

Eigen::MatrixXd Trajectory::locations(int n) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(states.size()), 3);
  for (std::size_t t = 0; t < states.size(); ++t) {
    out.row(static_cast<Eigen::Index>(t)) = states[t].at(n).location.transpose();
  }
  return out;
}

namespace {

bool inside_head(const Eigen::VectorXd& state, int sources, const HeadModel& head) {
  for (int n = 0; n < sources; ++n) {
    if (!head.contains(state.segment<3>(ModelParams::offset(n)))) return false;
  }
  return true;
}

}  // namespace

Trajectory simulate(const SimConfig& config) {
  const ModelParams& params = config.params;
  config.head.validate();
  config.sensors.validate(config.head);
  params.validate(static_cast<long>(config.sensors.size()));
  if (config.steps < 1) throw ValidationError("simulation needs at least one time step");

  const Eigen::MatrixXd init_factor = psd_factor(params.sigma0);
  const Eigen::MatrixXd evolution_factor = psd_factor(params.sigma);
  const Eigen::MatrixXd noise_factor = psd_factor(params.V);

  RandomStream rng(config.seed, /*stream=*/1);
  auto draw = [&rng](const Eigen::MatrixXd& factor) {
    Eigen::VectorXd z(factor.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    return Eigen::VectorXd(factor * z);
  };

  const Eigen::Index L = static_cast<Eigen::Index>(config.sensors.size());
  Trajectory out;
  out.states.reserve(config.steps);
  out.measurements.resize(config.steps, L);

  Eigen::VectorXd state;
  for (int t = 0; t < config.steps; ++t) {
    const Eigen::VectorXd mean = t == 0 ? params.mu0 : Eigen::VectorXd(ar_mean(params, state));
    const Eigen::MatrixXd& factor = t == 0 ? init_factor : evolution_factor;
    bool accepted = false;
    for (int attempt = 0; attempt < config.max_resample; ++attempt) {
      Eigen::VectorXd candidate = mean + draw(factor);
      if (inside_head(candidate, params.sources, config.head)) {
        state = std::move(candidate);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      throw NumericError("could not keep sources inside the head at step " +
                         std::to_string(t + 1) + " after " +
                         std::to_string(config.max_resample) + " attempts");
    }
    std::vector<DipoleState> dipoles = unpack_state(state, params.sources);
    const Eigen::VectorXd field = multi_source_field(dipoles, config.sensors, config.consts);
    out.measurements.row(t) = (field + draw(noise_factor)).transpose();
    out.states.push_back(std::move(dipoles));
  }
  return out;
}

void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory) {
  const int sources = trajectory.sources();
  const Eigen::Index L = trajectory.measurements.cols();
  std::vector<std::string> header{"t"};
  static const char* axis[] = {"x", "y", "z"};
  for (int n = 1; n <= sources; ++n) {
    for (const char* a : axis) header.push_back("p" + std::to_string(n) + "_" + a);
    for (const char* a : axis) header.push_back("q" + std::to_string(n) + "_" + a);
  }
  for (Eigen::Index l = 1; l <= L; ++l) header.push_back("y_" + std::to_string(l));
  write_csv_row(out, header);

  std::vector<std::string> row;
  for (Eigen::Index t = 0; t < trajectory.measurements.rows(); ++t) {
    row.clear();
    row.push_back(std::to_string(t + 1));
    for (int n = 0; n < sources; ++n) {
      const DipoleState& d = trajectory.states[static_cast<std::size_t>(t)][n];
      for (int i = 0; i < 3; ++i) row.push_back(format_double(d.location(i)));
      for (int i = 0; i < 3; ++i) row.push_back(format_double(d.moment(i)));
    }
    for (Eigen::Index l = 0; l < L; ++l) row.push_back(format_double(trajectory.measurements(t, l)));
    write_csv_row(out, row);
  }
}

void write_trajectory_csv(const std::string& path, const Trajectory& trajectory) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  write_trajectory_csv(out, trajectory);
}

Trajectory read_trajectory_csv(std::istream& in) {
  const CsvTable table = read_csv(in);
  if (table.header.empty() || table.header.front() != "t") {
    throw ValidationError("trajectory CSV must start with a 't' column");
  }
  std::vector<std::size_t> y_cols;
  int sources = 0;
  for (std::size_t c = 1; c < table.header.size(); ++c) {
    const std::string& h = table.header[c];
    if (h.rfind("y_", 0) == 0 || h.rfind("Y_", 0) == 0) {
      if (h.substr(2) != std::to_string(y_cols.size() + 1)) {
        throw ValidationError("measurement columns must be y_1..y_L (or Y_1..Y_L) in order");
      }
      y_cols.push_back(c);
    } else if (h.size() > 3 && h[0] == 'p' && h.substr(h.size() - 2) == "_x") {
      ++sources;
    }
  }
  if (y_cols.empty()) throw ValidationError("trajectory CSV has no measurement columns");
  if (table.rows.empty()) throw ValidationError("trajectory CSV has no rows");

  Trajectory out;
  const Eigen::Index T = static_cast<Eigen::Index>(table.rows.size());
  out.measurements.resize(T, static_cast<Eigen::Index>(y_cols.size()));
  std::vector<std::size_t> p_cols, q_cols;
  static const char* axis[] = {"x", "y", "z"};
  for (int n = 1; n <= sources; ++n) {
    for (const char* a : axis) p_cols.push_back(table.column("p" + std::to_string(n) + "_" + a));
    for (const char* a : axis) q_cols.push_back(table.column("q" + std::to_string(n) + "_" + a));
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto& r = table.rows[static_cast<std::size_t>(t)];
    for (std::size_t l = 0; l < y_cols.size(); ++l) {
      const double y = r[y_cols[l]];
      if (!std::isfinite(y)) throw ValidationError("non-finite measurement at row " + std::to_string(t + 1));
      out.measurements(t, static_cast<Eigen::Index>(l)) = y;
    }
    if (sources > 0) {
      std::vector<DipoleState> dipoles(sources);
      for (int n = 0; n < sources; ++n) {
        for (int i = 0; i < 3; ++i) {
          dipoles[n].location(i) = r[p_cols[3 * n + i]];
          dipoles[n].moment(i) = r[q_cols[3 * n + i]];
        }
      }
      out.states.push_back(std::move(dipoles));
    }
  }
  return out;
}

Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return read_trajectory_csv(in);
}

}  // namespace dipolegrid

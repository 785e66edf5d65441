#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "dipolegrid/cli.hpp"
#include "dipolegrid/errors.hpp"

namespace dipolegrid::cli {

namespace fs = std::filesystem;

namespace {

json load_config(const RunOptions& options) {
  if (options.config.empty()) throw ValidationError("--config is required");
  return read_json_file(options.config.string());
}

fs::path config_dir(const RunOptions& options) {
  const fs::path parent = options.config.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

void prepare_out(const fs::path& out) {
  if (out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw NumericError("cannot create output directory " + out.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// What every fitting procedure hands back to the commands.
struct Outcome {
  ModelParams params;
  EmTrace trace;
  std::vector<VoxelGrid> grids;
  std::vector<RowMatrix> marginals;
};

Outcome run_procedure(Procedure p, const Eigen::MatrixXd& Y, const SensorArray& sensors, const ModelParams& init,
                      const RoiBox& roi, const Mesh& mesh, const EmConfig& em, const DynamicConfig& dyn,
                      std::size_t joint_cap, const std::vector<Eigen::MatrixXd>* truth) {
  const int N = init.sources;
  switch (p) {
    case Procedure::kSingle: {
      if (N != 1) throw ValidationError("procedure single needs one source; use switch or joint");
      FitResult r = fit(Y, sensors, VoxelGrid(roi, mesh), init, em);
      return {std::move(r.params), std::move(r.trace), {r.grid}, {std::move(r.posterior.xi)}};
    }
    case Procedure::kDynamic: {
      if (N != 1) throw ValidationError("procedure dynamic needs one source; use dynamic_switch");
      DynamicResult r = dynamic_fit(Y, sensors, init, dyn, em, truth ? &truth->front() : nullptr);
      return {std::move(r.params), std::move(r.trace), {r.grid}, {std::move(r.posterior.xi)}};
    }
    case Procedure::kSwitch: {
      SwitchFit r = switch_fit(Y, sensors, std::vector<VoxelGrid>(static_cast<std::size_t>(N), VoxelGrid(roi, mesh)),
                               init, em);
      return {std::move(r.params), std::move(r.trace), std::move(r.state.grids), std::move(r.state.marginals)};
    }
    case Procedure::kDynamicSwitch: {
      SwitchFit r = dynamic_switch_fit(Y, sensors, init, dyn, em, truth);
      return {std::move(r.params), std::move(r.trace), std::move(r.state.grids), std::move(r.state.marginals)};
    }
    case Procedure::kJoint: {
      const JointGrid joint(std::vector<VoxelGrid>(static_cast<std::size_t>(N), VoxelGrid(roi, mesh)));
      JointFit r = joint_fit(Y, sensors, joint, init, em, joint_cap);
      return {std::move(r.params), std::move(r.trace), joint.grids(), std::move(r.marginals)};
    }
  }
  throw ValidationError("unknown procedure");
}

std::vector<Eigen::MatrixXd> true_locations(const Trajectory& tr) {
  std::vector<Eigen::MatrixXd> out;
  for (int n = 0; n < tr.sources(); ++n) out.push_back(tr.locations(n));
  return out;
}

json trace_summary(const EmTrace& trace) {
  json j;
  j["iterations"] = trace.iterations.size();
  j["converged"] = trace.converged;
  j["final_loglik"] = trace.final_loglik;
  j["monotonicity_violations"] = trace.monotonicity_violations;
  return j;
}

}  // namespace

void cmd_simulate(const RunOptions& options) {
  SimulateConfig c = parse_simulate(load_config(options), config_dir(options));
  if (options.seed) c.seed = *options.seed;
  prepare_out(options.out);

  SimConfig sim;
  sim.params = c.params;
  sim.head = c.head;
  sim.sensors = c.sensors.resolve(c.head, c.seed);
  sim.steps = c.steps;
  sim.seed = c.seed;
  sim.consts = c.consts;
  sim.max_resample = c.max_resample;
  if (static_cast<long>(sim.sensors.size()) != c.params.V.rows()) {
    throw ValidationError("V is " + std::to_string(c.params.V.rows()) + " x " + std::to_string(c.params.V.rows()) +
                          " but there are " + std::to_string(sim.sensors.size()) + " sensors");
  }
  const Trajectory tr = simulate(sim);
  write_trajectory_csv((options.out / "trajectory.csv").string(), tr);

  json meta;
  meta["seed"] = c.seed;
  meta["steps"] = c.steps;
  meta["kappa"] = c.consts.kappa;
  meta["head"] = to_json(c.head);
  meta["sensors"] = to_json(sim.sensors);
  meta["params"] = to_json(c.params);
  write_text_file((options.out / "metadata.json").string(), dump(meta));
}

void cmd_fit(const RunOptions& options) {
  const FitConfig c = parse_fit(load_config(options), config_dir(options));
  prepare_out(options.out);

  const Trajectory tr = read_trajectory_csv(c.measurements);
  if (tr.measurements.rows() < 1) throw ValidationError(c.measurements + ": no measurements");
  if (tr.measurements.cols() != static_cast<Eigen::Index>(c.sensors.size())) {
    throw ValidationError(c.measurements + ": " + std::to_string(tr.measurements.cols()) + " measurement columns but " +
                          std::to_string(c.sensors.size()) + " sensors");
  }
  const int N = c.init.sources;
  const Procedure p = c.procedure.value_or(N == 1 ? Procedure::kDynamic : Procedure::kDynamicSwitch);
  std::vector<Eigen::MatrixXd> truth;
  if (c.use_truth && tr.sources() == N) truth = true_locations(tr);

  const Outcome r = run_procedure(p, tr.measurements, c.sensors, c.init, c.roi, c.mesh, c.em, c.dynamic,
                                  c.joint_cap, truth.empty() ? nullptr : &truth);

  write_text_file((options.out / "params.json").string(), dump(to_json(r.params)));
  {
    std::ostringstream s;
    write_marginals_csv(s, r.grids, r.marginals);
    write_text_file((options.out / "posterior.csv").string(), s.str());
  }
  {
    std::ostringstream s;
    write_trace_csv(s, r.trace);
    write_text_file((options.out / "trace.csv").string(), s.str());
  }
  json grids = json::array();
  for (const VoxelGrid& g : r.grids) grids.push_back(to_json(g));
  write_text_file((options.out / "grid.json").string(), dump(grids));

  json summary = trace_summary(r.trace);
  summary["procedure"] = procedure_name(p);
  summary["sources"] = N;
  summary["steps"] = tr.measurements.rows();
  summary["update"] = c.em.mask.names();
  write_text_file((options.out / "summary.json").string(), dump(summary));
}

namespace {

struct ProcedureRun {
  std::string name;
  Procedure procedure;
};

struct Metrics {
  double A_error = 0.0;
  double b_error = 0.0;
  int iterations = 0;
  bool converged = false;
  double final_loglik = 0.0;
  int coverage_violations = 0;
};

std::string mean_std_cell(const std::vector<double>& v, bool want_std) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  if (!want_std) return format_double(mean);
  if (v.size() < 2) return "";
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return format_double(std::sqrt(ss / (n - 1.0)));
}

}  // namespace

void cmd_compare(const RunOptions& options) {
  CompareConfig c = parse_compare(load_config(options), config_dir(options));
  if (options.seed) {
    c.seed = *options.seed;
    c.seeds.clear();
  }
  prepare_out(options.out);

  const int N = c.truth.sources;
  std::vector<ProcedureRun> runs;
  json skipped = json::array();
  for (const std::string& name : c.procedures) {
    const bool dynamic = name == "dynamic";
    if (N == 1) {
      runs.push_back({name, dynamic ? Procedure::kDynamic : Procedure::kSingle});
      continue;
    }
    runs.push_back({name + "_switch", dynamic ? Procedure::kDynamicSwitch : Procedure::kSwitch});
    if (dynamic) continue;
    double joint_size = 1.0;
    for (int n = 0; n < N; ++n) joint_size *= static_cast<double>(c.mesh[0]) * c.mesh[1] * c.mesh[2];
    if (joint_size <= static_cast<double>(c.joint_cap)) {
      runs.push_back({name + "_joint", Procedure::kJoint});
    } else {
      skipped.push_back({{"procedure", name + "_joint"},
                         {"reason", "joint state count exceeds joint_cap"},
                         {"states", joint_size},
                         {"joint_cap", c.joint_cap}});
    }
  }

  const std::vector<std::uint64_t> seeds = c.replication_seeds();
  const ModelParams init = c.init_dynamics == InitDynamics::kDefault ? reset_dynamics(c.truth, c.roi) : c.truth;

  // results[r][p]; every replication simulates once and feeds all procedures.
  std::vector<std::vector<Metrics>> results(seeds.size());
  auto replicate = [&](std::size_t r) {
    SimConfig sim;
    sim.params = c.truth;
    sim.head = c.head;
    sim.sensors = c.sensors.resolve(c.head, seeds[r]);
    sim.steps = c.steps;
    sim.seed = seeds[r];
    sim.consts = c.em.consts;
    sim.max_resample = c.max_resample;
    const Trajectory tr = simulate(sim);
    const std::vector<Eigen::MatrixXd> truth = true_locations(tr);
    for (const ProcedureRun& run : runs) {
      const Outcome o = run_procedure(run.procedure, tr.measurements, sim.sensors, init, c.roi, c.mesh, c.em,
                                      c.dynamic, c.joint_cap, &truth);
      Metrics m;
      m.A_error = location_A_error(o.params, c.truth);
      m.b_error = location_b_error(o.params, c.truth);
      m.iterations = static_cast<int>(o.trace.iterations.size());
      m.converged = o.trace.converged;
      m.final_loglik = o.trace.final_loglik;
      if (!o.trace.iterations.empty()) m.coverage_violations = o.trace.iterations.back().coverage_violations;
      results[r].push_back(m);
    }
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(c.threads), seeds.size());
  if (workers <= 1) {
    for (std::size_t r = 0; r < seeds.size(); ++r) replicate(r);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(seeds.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t r = next++; r < seeds.size(); r = next++) {
          try {
            replicate(r);
          } catch (...) {
            errors[r] = std::current_exception();
          }
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::ostringstream csv;
  write_csv_row(csv, {"procedure", "replication", "seed", "A_error", "b_error", "iterations", "converged",
                      "final_loglik", "coverage_violations"});
  json procs = json::array();
  for (std::size_t p = 0; p < runs.size(); ++p) {
    std::vector<double> a, b;
    for (std::size_t r = 0; r < seeds.size(); ++r) {
      const Metrics& m = results[r][p];
      a.push_back(m.A_error);
      b.push_back(m.b_error);
      write_csv_row(csv, {runs[p].name, std::to_string(r + 1), std::to_string(seeds[r]), format_double(m.A_error),
                          format_double(m.b_error), std::to_string(m.iterations), m.converged ? "1" : "0",
                          format_double(m.final_loglik), std::to_string(m.coverage_violations)});
    }
    write_csv_row(csv, {runs[p].name, "mean", "", mean_std_cell(a, false), mean_std_cell(b, false), "", "", "", ""});
    write_csv_row(csv, {runs[p].name, "std", "", mean_std_cell(a, true), mean_std_cell(b, true), "", "", "", ""});
    json pj;
    pj["procedure"] = runs[p].name;
    pj["method"] = procedure_name(runs[p].procedure);
    pj["A_error_mean"] = std::stod(mean_std_cell(a, false));
    pj["b_error_mean"] = std::stod(mean_std_cell(b, false));
    procs.push_back(pj);
  }
  write_text_file((options.out / "metrics.csv").string(), csv.str());

  json summary;
  summary["sources"] = N;
  summary["steps"] = c.steps;
  summary["seeds"] = seeds;
  summary["procedures"] = procs;
  summary["skipped"] = skipped;
  write_text_file((options.out / "summary.json").string(), dump(summary));
}

namespace {

struct SourcePosterior {
  int steps = 0;
  // per t: (center, xi)
  std::vector<std::vector<std::pair<Vec3, double>>> cells;
};

std::map<int, SourcePosterior> read_posterior(const std::string& path) {
  const CsvTable table = read_csv_file(path);
  if (table.rows.empty()) throw ValidationError(path + ": posterior is empty");
  const std::size_t cs = table.column("source"), ct = table.column("t"), cx = table.column("x"),
                    cy = table.column("y"), cz = table.column("z"), cxi = table.column("xi");
  std::map<int, SourcePosterior> out;
  for (const std::vector<double>& row : table.rows) {
    const double s = row[cs], t = row[ct];
    if (!(s >= 1.0) || !(t >= 1.0) || s != std::floor(s) || t != std::floor(t)) {
      throw ValidationError(path + ": source and t must be positive integers");
    }
    if (!std::isfinite(row[cxi]) || row[cxi] < 0.0) throw ValidationError(path + ": xi must be finite and >= 0");
    SourcePosterior& sp = out[static_cast<int>(s)];
    const auto ti = static_cast<std::size_t>(t);
    if (sp.cells.size() < ti) sp.cells.resize(ti);
    sp.cells[ti - 1].push_back({Vec3(row[cx], row[cy], row[cz]), row[cxi]});
    sp.steps = std::max(sp.steps, static_cast<int>(ti));
  }
  return out;
}

}  // namespace

void cmd_plot(const RunOptions& options) {
  const PlotConfig c = parse_plot(load_config(options), config_dir(options));
  const std::map<int, SourcePosterior> posterior = read_posterior(c.posterior);
  std::optional<Trajectory> truth;
  if (c.trajectory) truth = read_trajectory_csv(*c.trajectory);
  prepare_out(options.out);

  const bool many = posterior.size() > 1;
  const char* axis_names[3] = {"x", "y", "z"};
  for (const auto& [source, sp] : posterior) {
    const std::string suffix = many ? "_s" + std::to_string(source) : "";
    const std::string who = many ? " (source " + std::to_string(source) + ")" : "";
    std::vector<double> times;
    std::array<std::vector<double>, 3> means;
    for (int t = 0; t < sp.steps; ++t) {
      const auto& cells = sp.cells[static_cast<std::size_t>(t)];
      if (cells.empty()) continue;
      Vec3 m = Vec3::Zero();
      double total = 0.0;
      for (const auto& [center, w] : cells) {
        m += w * center;
        total += w;
      }
      if (!(total > 0.0)) throw ValidationError(c.posterior + ": zero posterior mass at t=" + std::to_string(t + 1));
      m /= total;
      times.push_back(t + 1);
      for (int i = 0; i < 3; ++i) means[i].push_back(m(i));
    }

    std::optional<Eigen::MatrixXd> true_loc;
    if (truth && truth->sources() >= source) true_loc = truth->locations(source - 1);
    for (int i = 0; i < 3; ++i) {
      std::vector<double> overlay;
      if (true_loc) {
        for (double t : times) {
          const auto row = static_cast<Eigen::Index>(t) - 1;
          if (row >= true_loc->rows()) throw ValidationError("trajectory is shorter than the posterior");
          overlay.push_back((*true_loc)(row, i));
        }
      }
      const std::string svg =
          line_plot_svg("Posterior mean of " + std::string(axis_names[i]) + who, axis_names[i], times, means[i],
                        true_loc ? &overlay : nullptr, c.width, c.height);
      write_text_file((options.out / ("mean_" + std::string(axis_names[i]) + suffix + ".svg")).string(), svg);
    }

    std::vector<int> plot_times = c.times;
    if (plot_times.empty()) plot_times = {1, (sp.steps + 1) / 2, sp.steps};
    std::sort(plot_times.begin(), plot_times.end());
    plot_times.erase(std::unique(plot_times.begin(), plot_times.end()), plot_times.end());
    for (int t : plot_times) {
      if (t > sp.steps || sp.cells[static_cast<std::size_t>(t - 1)].empty()) {
        throw ValidationError("no posterior rows at t=" + std::to_string(t));
      }
      std::vector<BarPanel> panels;
      for (int i = 0; i < 3; ++i) {
        std::map<double, double> marginal;
        for (const auto& [center, w] : sp.cells[static_cast<std::size_t>(t - 1)]) marginal[center(i)] += w;
        BarPanel panel;
        panel.label = axis_names[i];
        for (const auto& [pos, w] : marginal) {
          panel.positions.push_back(pos);
          panel.weights.push_back(w);
        }
        panels.push_back(std::move(panel));
      }
      const std::string svg =
          bar_chart_svg("Marginal posterior at t=" + std::to_string(t) + who, panels, c.width, c.height);
      write_text_file((options.out / ("marginal_t" + std::to_string(t) + suffix + ".svg")).string(), svg);
    }
  }
}

}  // namespace dipolegrid::cli

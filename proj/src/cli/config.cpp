#include <set>
#include <string>

#include "dipolegrid/cli.hpp"
#include "dipolegrid/errors.hpp"

namespace dipolegrid::cli {

namespace fs = std::filesystem;

namespace {

// Object reader that remembers which keys were consumed, so leftovers can be
// reported as unknown.
class Object {
 public:
  Object(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ValidationError(where_ + ": expected an object");
  }

  const json* get(const std::string& key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& require(const std::string& key) {
    const json* v = get(key);
    if (!v) throw ValidationError(where_ + ": missing required key '" + key + "'");
    return *v;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.contains(key)) throw ValidationError(where_ + ": unknown key '" + key + "'");
    }
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

double as_double(const json& v, const std::string& what) {
  if (!v.is_number()) throw ValidationError(what + ": expected a number");
  return v.get<double>();
}

int as_int(const json& v, const std::string& what) {
  if (!v.is_number_integer()) throw ValidationError(what + ": expected an integer");
  return v.get<int>();
}

std::uint64_t as_u64(const json& v, const std::string& what) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    throw ValidationError(what + ": expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

bool as_bool(const json& v, const std::string& what) {
  if (!v.is_boolean()) throw ValidationError(what + ": expected true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& what) {
  if (!v.is_string()) throw ValidationError(what + ": expected a string");
  return v.get<std::string>();
}

std::string resolve_path(const std::string& p, const fs::path& base) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

// Loads `key` from a JSON file that holds either the value itself or an
// object with `key` at the top level (for example simulate's metadata.json).
json load_member(const std::string& file, const char* key) {
  json j = read_json_file(file);
  if (j.is_object() && j.contains(key)) return j.at(key);
  return j;
}

Mesh parse_mesh(const json& v, const std::string& what) {
  Mesh m{};
  if (v.is_number_integer()) {
    m.fill(v.get<int>());
  } else if (v.is_array() && v.size() == 3) {
    for (int i = 0; i < 3; ++i) m[i] = as_int(v[i], what);
  } else {
    throw ValidationError(what + ": expected an integer or three integers");
  }
  for (int k : m) {
    if (k < 1) throw ValidationError(what + ": mesh counts must be >= 1");
  }
  return m;
}

Modality parse_modality(const json& v, const std::string& what) {
  const std::string m = as_string(v, what);
  if (m == "meg") return Modality::kMeg;
  if (m == "eeg") return Modality::kEeg;
  throw ValidationError(what + ": expected \"meg\" or \"eeg\"");
}

SensorSpec parse_sensors(const json& v, const fs::path& base, const std::string& what) {
  if (v.is_string()) return parse_sensors(load_member(resolve_path(v.get<std::string>(), base), "sensors"), base, what);
  SensorSpec s;
  if (v.is_object() && v.contains("positions")) {
    s.explicit_array = sensors_from_json(v);
    return s;
  }
  Object o(v, what);
  if (const json* x = o.get("count")) s.count = as_int(*x, o.path("count"));
  if (const json* x = o.get("seed")) s.seed = as_u64(*x, o.path("seed"));
  if (const json* x = o.get("standoff")) s.standoff = as_double(*x, o.path("standoff"));
  if (const json* x = o.get("modality")) s.modality = parse_modality(*x, o.path("modality"));
  if (const json* x = o.get("conductivity")) s.conductivity = as_double(*x, o.path("conductivity"));
  o.finish();
  if (s.count < 1) throw ValidationError(what + ".count must be >= 1");
  if (!(s.standoff > 0.0)) throw ValidationError(what + ".standoff must be > 0");
  return s;
}

HeadModel parse_head(const json* v, const fs::path& base) {
  if (!v) return HeadModel{};
  HeadModel h = v->is_string() ? head_from_json(load_member(resolve_path(v->get<std::string>(), base), "head"))
                               : head_from_json(*v);
  h.validate();
  return h;
}

ModelParams parse_params(const json& v, const fs::path& base, long sensor_count, const std::string& what) {
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "case1") return case1_params(static_cast<int>(sensor_count));
    if (s == "case2") return case2_params(static_cast<int>(sensor_count));
    return parse_params(load_member(resolve_path(s, base), "params"), base, sensor_count, what);
  }
  ModelParams p = params_from_json(v);
  p.validate(sensor_count);
  return p;
}

EmConfig parse_em(const json* v) {
  EmConfig c;
  if (!v) return c;
  Object o(*v, "em");
  if (const json* x = o.get("update")) {
    if (!x->is_array()) throw ValidationError("em.update: expected an array of parameter names");
    std::vector<std::string> names;
    for (const json& n : *x) names.push_back(as_string(n, "em.update"));
    c.mask = UpdateMask::parse(names);
  }
  if (const json* x = o.get("max_iters")) c.max_iters = as_int(*x, "em.max_iters");
  if (const json* x = o.get("tol")) c.tol = as_double(*x, "em.tol");
  if (const json* x = o.get("stopping")) {
    const std::string s = as_string(*x, "em.stopping");
    if (s == "q_gain") {
      c.stopping = StoppingRule::kQGain;
    } else if (s == "loglik") {
      c.stopping = StoppingRule::kLogLikelihood;
    } else {
      throw ValidationError("em.stopping: expected \"q_gain\" or \"loglik\"");
    }
  }
  if (const json* x = o.get("weighting")) {
    const std::string s = as_string(*x, "em.weighting");
    if (s == "density_volume") {
      c.weighting = PriorWeighting::kDensityVolume;
    } else if (s == "normalized") {
      c.weighting = PriorWeighting::kNormalized;
    } else {
      throw ValidationError("em.weighting: expected \"density_volume\" or \"normalized\"");
    }
  }
  if (const json* x = o.get("strict_monotonicity")) c.strict_monotonicity = as_bool(*x, "em.strict_monotonicity");
  if (const json* x = o.get("monotonicity_tol")) c.monotonicity_tol = as_double(*x, "em.monotonicity_tol");
  if (const json* x = o.get("diagonal_sigma")) c.constraints.diagonal_sigma = as_bool(*x, "em.diagonal_sigma");
  if (const json* x = o.get("scalar_V")) c.constraints.scalar_V = as_bool(*x, "em.scalar_V");
  if (const json* x = o.get("location_block_only_A")) {
    c.constraints.location_block_only_A = as_bool(*x, "em.location_block_only_A");
  }
  if (const json* x = o.get("ridge")) c.constraints.ridge = as_double(*x, "em.ridge");
  o.finish();
  c.validate();
  return c;
}

DynamicConfig parse_dynamic(const json* v) {
  DynamicConfig d;
  if (!v) return d;
  Object o(*v, "dynamic");
  if (const json* x = o.get("mesh_increment")) d.mesh_increment = as_int(*x, "dynamic.mesh_increment");
  if (const json* x = o.get("sigma_multiplier")) d.sigma_multiplier = as_double(*x, "dynamic.sigma_multiplier");
  if (const json* x = o.get("max_outer_iters")) d.max_outer_iters = as_int(*x, "dynamic.max_outer_iters");
  if (const json* x = o.get("mesh_cap")) d.mesh_cap = as_int(*x, "dynamic.mesh_cap");
  if (const json* x = o.get("shrink")) d.shrink = as_bool(*x, "dynamic.shrink");
  if (const json* x = o.get("shrink_after_convergence")) {
    d.shrink_after_convergence = as_bool(*x, "dynamic.shrink_after_convergence");
  }
  o.finish();
  return d;
}

RoiBox parse_roi(const json* v, const HeadModel& head) {
  RoiBox roi = v ? roi_from_json(*v) : upper_head_roi(head);
  roi.validate();
  roi.validate_against(head);
  return roi;
}

FieldConstants parse_kappa(const json* v) {
  FieldConstants c;
  if (v) c.kappa = as_double(*v, "kappa");
  if (!(c.kappa > 0.0)) throw ValidationError("kappa must be > 0");
  return c;
}

std::size_t parse_cap(const json* v) {
  if (!v) return kDefaultJointCap;
  const int cap = as_int(*v, "joint_cap");
  if (cap < 1) throw ValidationError("joint_cap must be >= 1");
  return static_cast<std::size_t>(cap);
}

}  // namespace

SensorArray SensorSpec::resolve(const HeadModel& head, std::uint64_t fallback_seed) const {
  SensorArray s;
  if (explicit_array) {
    s = *explicit_array;
  } else {
    s = place_sensors(head, count, seed.value_or(fallback_seed), standoff);
    s.modality = modality;
    s.conductivity = conductivity;
  }
  s.validate(head);
  return s;
}

const char* procedure_name(Procedure p) {
  switch (p) {
    case Procedure::kSingle:
      return "single";
    case Procedure::kDynamic:
      return "dynamic";
    case Procedure::kSwitch:
      return "switch";
    case Procedure::kDynamicSwitch:
      return "dynamic_switch";
    case Procedure::kJoint:
      return "joint";
  }
  return "?";
}

RoiBox upper_head_roi(const HeadModel& head) {
  RoiBox roi = bounding_box(head);
  roi.axes[2].lo = head.center(2);
  return roi;
}

ModelParams reset_dynamics(const ModelParams& params, const RoiBox& roi) {
  ModelParams p = params;
  const Vec3 centroid = roi.centroid();
  for (int n = 0; n < p.sources; ++n) {
    const int o = ModelParams::offset(n);
    p.A.block<3, 3>(o, o) = 0.8 * Eigen::Matrix3d::Identity();
    p.A.block<3, 3>(o, o + 3).setZero();
    p.b.segment<3>(o) = 0.2 * centroid;
  }
  return p;
}

SimulateConfig parse_simulate(const json& j, const fs::path& base) {
  Object o(j, "simulate config");
  SimulateConfig c;
  c.head = parse_head(o.get("head"), base);
  if (const json* x = o.get("sensors")) c.sensors = parse_sensors(*x, base, "sensors");
  if (const json* x = o.get("steps")) c.steps = as_int(*x, "steps");
  if (const json* x = o.get("seed")) c.seed = as_u64(*x, "seed");
  if (const json* x = o.get("max_resample")) c.max_resample = as_int(*x, "max_resample");
  c.consts = parse_kappa(o.get("kappa"));
  const long L = c.sensors.explicit_array ? static_cast<long>(c.sensors.explicit_array->size()) : c.sensors.count;
  c.params = parse_params(o.require("params"), base, L, "params");
  o.finish();
  if (c.steps < 1) throw ValidationError("steps must be >= 1");
  if (c.max_resample < 1) throw ValidationError("max_resample must be >= 1");
  return c;
}

FitConfig parse_fit(const json& j, const fs::path& base) {
  Object o(j, "fit config");
  FitConfig c;
  c.measurements = resolve_path(as_string(o.require("measurements"), "measurements"), base);
  c.head = parse_head(o.get("head"), base);
  const SensorSpec spec = parse_sensors(o.require("sensors"), base, "sensors");
  c.sensors = spec.resolve(c.head, 0);
  const long L = static_cast<long>(c.sensors.size());
  c.roi = parse_roi(o.get("roi"), c.head);
  if (const json* x = o.get("mesh")) c.mesh = parse_mesh(*x, "mesh");
  c.em = parse_em(o.get("em"));
  c.em.consts = parse_kappa(o.get("kappa"));
  c.dynamic = parse_dynamic(o.get("dynamic"));
  c.dynamic.initial_roi = c.roi;
  c.dynamic.initial_mesh = c.mesh;
  c.dynamic.head = c.head;
  c.dynamic.validate();
  c.joint_cap = parse_cap(o.get("joint_cap"));
  if (const json* x = o.get("use_truth")) c.use_truth = as_bool(*x, "use_truth");
  if (const json* x = o.get("procedure")) {
    const std::string p = as_string(*x, "procedure");
    if (p == "single") {
      c.procedure = Procedure::kSingle;
    } else if (p == "dynamic") {
      c.procedure = Procedure::kDynamic;
    } else if (p == "switch") {
      c.procedure = Procedure::kSwitch;
    } else if (p == "dynamic_switch") {
      c.procedure = Procedure::kDynamicSwitch;
    } else if (p == "joint") {
      c.procedure = Procedure::kJoint;
    } else {
      throw ValidationError("procedure: expected single, dynamic, switch, dynamic_switch or joint");
    }
  }

  const json& init = o.require("init");
  if (init.is_object() && init.contains("default")) {
    Object io(init, "init");
    Object d(io.require("default"), "init.default");
    const json& moments = d.require("moments");
    if (!moments.is_array() || moments.empty()) throw ValidationError("init.default.moments: expected 3-vectors");
    std::vector<Vec3> q;
    for (const json& m : moments) q.push_back(vec3_from_json(m));
    const double noise = as_double(d.require("noise_variance"), "init.default.noise_variance");
    d.finish();
    io.finish();
    c.init = default_initial_params(c.roi, c.mesh, q, L, noise);
  } else if (init.is_object() && init.contains("params")) {
    Object io(init, "init");
    c.init = parse_params(io.require("params"), base, L, "init.params");
    if (const json* x = io.get("dynamics")) {
      const std::string s = as_string(*x, "init.dynamics");
      if (s == "default") {
        c.init = reset_dynamics(c.init, c.roi);
      } else if (s != "keep") {
        throw ValidationError("init.dynamics: expected \"keep\" or \"default\"");
      }
    }
    io.finish();
  } else {
    c.init = parse_params(init, base, L, "init");
  }
  o.finish();
  return c;
}

CompareConfig parse_compare(const json& j, const fs::path& base) {
  Object o(j, "compare config");
  CompareConfig c;
  c.head = parse_head(o.get("head"), base);
  if (const json* x = o.get("sensors")) c.sensors = parse_sensors(*x, base, "sensors");
  if (c.sensors.explicit_array) c.sensors.explicit_array->validate(c.head);
  const long L = c.sensors.explicit_array ? static_cast<long>(c.sensors.explicit_array->size()) : c.sensors.count;
  c.truth = parse_params(o.require("params"), base, L, "params");
  if (const json* x = o.get("steps")) c.steps = as_int(*x, "steps");
  if (const json* x = o.get("replications")) c.replications = as_int(*x, "replications");
  if (const json* x = o.get("seed")) c.seed = as_u64(*x, "seed");
  if (const json* x = o.get("seeds")) {
    if (!x->is_array()) throw ValidationError("seeds: expected an array");
    for (const json& s : *x) c.seeds.push_back(as_u64(s, "seeds"));
    c.replications = static_cast<int>(c.seeds.size());
  }
  c.roi = parse_roi(o.get("roi"), c.head);
  if (const json* x = o.get("mesh")) c.mesh = parse_mesh(*x, "mesh");
  c.em = parse_em(o.get("em"));
  c.em.consts = parse_kappa(o.get("kappa"));
  c.dynamic = parse_dynamic(o.get("dynamic"));
  c.dynamic.initial_roi = c.roi;
  c.dynamic.initial_mesh = c.mesh;
  c.dynamic.head = c.head;
  c.dynamic.validate();
  c.joint_cap = parse_cap(o.get("joint_cap"));
  if (const json* x = o.get("procedures")) {
    if (!x->is_array() || x->empty()) throw ValidationError("procedures: expected a non-empty array");
    c.procedures.clear();
    for (const json& p : *x) {
      const std::string s = as_string(p, "procedures");
      if (s != "dynamic" && s != "non_dynamic") {
        throw ValidationError("procedures: expected \"dynamic\" or \"non_dynamic\"");
      }
      c.procedures.push_back(s);
    }
  }
  if (const json* x = o.get("init_dynamics")) {
    const std::string s = as_string(*x, "init_dynamics");
    if (s == "default") {
      c.init_dynamics = InitDynamics::kDefault;
    } else if (s == "keep") {
      c.init_dynamics = InitDynamics::kKeep;
    } else {
      throw ValidationError("init_dynamics: expected \"keep\" or \"default\"");
    }
  }
  if (const json* x = o.get("threads")) c.threads = as_int(*x, "threads");
  if (const json* x = o.get("max_resample")) c.max_resample = as_int(*x, "max_resample");
  o.finish();
  if (c.steps < 2) throw ValidationError("steps must be >= 2 to estimate dynamics");
  if (c.replications < 1) throw ValidationError("need at least one replication");
  if (c.threads < 1) throw ValidationError("threads must be >= 1");
  if (c.max_resample < 1) throw ValidationError("max_resample must be >= 1");
  return c;
}

std::vector<std::uint64_t> CompareConfig::replication_seeds() const {
  if (!seeds.empty()) return seeds;
  std::vector<std::uint64_t> out;
  for (int r = 0; r < replications; ++r) out.push_back(seed + static_cast<std::uint64_t>(r));
  return out;
}

PlotConfig parse_plot(const json& j, const fs::path& base) {
  Object o(j, "plot config");
  PlotConfig c;
  c.posterior = resolve_path(as_string(o.require("posterior"), "posterior"), base);
  if (const json* x = o.get("trajectory")) c.trajectory = resolve_path(as_string(*x, "trajectory"), base);
  if (const json* x = o.get("times")) {
    if (!x->is_array()) throw ValidationError("times: expected an array of time indices");
    for (const json& t : *x) {
      const int v = as_int(t, "times");
      if (v < 1) throw ValidationError("times: time indices start at 1");
      c.times.push_back(v);
    }
  }
  if (const json* x = o.get("width")) c.width = as_int(*x, "width");
  if (const json* x = o.get("height")) c.height = as_int(*x, "height");
  o.finish();
  if (c.width < 100 || c.height < 100) throw ValidationError("width and height must be >= 100");
  return c;
}

}  // namespace dipolegrid::cli

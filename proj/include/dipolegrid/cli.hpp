#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dipolegrid/dynamic.hpp"
#include "dipolegrid/em.hpp"
#include "dipolegrid/geometry.hpp"
#include "dipolegrid/io.hpp"
#include "dipolegrid/multisource.hpp"
#include "dipolegrid/statespace.hpp"

namespace dipolegrid::cli {

/// Sensor placement on the upper hemisphere, or explicit positions.
struct SensorSpec {
  std::optional<SensorArray> explicit_array;
  int count = 102;
  std::optional<std::uint64_t> seed;
  double standoff = kDefaultStandoff;
  Modality modality = Modality::kMeg;
  double conductivity = 0.0;

  SensorArray resolve(const HeadModel& head, std::uint64_t fallback_seed) const;
};

enum class InitDynamics { kKeep, kDefault };

struct SimulateConfig {
  ModelParams params;
  HeadModel head;
  SensorSpec sensors;
  int steps = 100;
  std::uint64_t seed = 0;
  FieldConstants consts;
  int max_resample = 1000;
};

enum class Procedure { kSingle, kDynamic, kSwitch, kDynamicSwitch, kJoint };
const char* procedure_name(Procedure p);

struct FitConfig {
  std::string measurements;
  SensorArray sensors;
  HeadModel head;
  ModelParams init;
  std::optional<Procedure> procedure;
  RoiBox roi;
  Mesh mesh{10, 10, 10};
  EmConfig em;
  DynamicConfig dynamic;
  std::size_t joint_cap = kDefaultJointCap;
  /// Count coverage violations against true locations in the measurements CSV.
  bool use_truth = true;
};

struct CompareConfig {
  ModelParams truth;
  HeadModel head;
  SensorSpec sensors;
  int steps = 100;
  int replications = 4;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;
  RoiBox roi;
  Mesh mesh{10, 10, 10};
  EmConfig em;
  DynamicConfig dynamic;
  std::size_t joint_cap = kDefaultJointCap;
  std::vector<std::string> procedures{"non_dynamic", "dynamic"};
  InitDynamics init_dynamics = InitDynamics::kDefault;
  int threads = 1;
  int max_resample = 1000;

  std::vector<std::uint64_t> replication_seeds() const;
};

struct PlotConfig {
  std::string posterior;
  std::optional<std::string> trajectory;
  std::vector<int> times;
  int width = 640;
  int height = 360;
};

/// Parsers reject unknown keys. Relative paths resolve against `base`.
SimulateConfig parse_simulate(const json& j, const std::filesystem::path& base);
FitConfig parse_fit(const json& j, const std::filesystem::path& base);
CompareConfig parse_compare(const json& j, const std::filesystem::path& base);
PlotConfig parse_plot(const json& j, const std::filesystem::path& base);

/// Location blocks of A and b replaced by the default start (0.8 I and
/// 0.2 times the ROI centroid); moment-to-location columns cleared.
ModelParams reset_dynamics(const ModelParams& params, const RoiBox& roi);

/// Upper half of the head's bounding box.
RoiBox upper_head_roi(const HeadModel& head);

struct RunOptions {
  std::filesystem::path config;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
};

void cmd_simulate(const RunOptions& options);
void cmd_fit(const RunOptions& options);
void cmd_compare(const RunOptions& options);
void cmd_plot(const RunOptions& options);

/// Standalone SVG line plot; `truth` (same length as `values`) is optional.
std::string line_plot_svg(const std::string& title, const std::string& y_label, const std::vector<double>& times,
                          const std::vector<double>& values, const std::vector<double>* truth, int width,
                          int height);

/// Standalone SVG with one bar-chart panel per axis.
struct BarPanel {
  std::string label;
  std::vector<double> positions;
  std::vector<double> weights;
};
std::string bar_chart_svg(const std::string& title, const std::vector<BarPanel>& panels, int width, int height);

}  // namespace dipolegrid::cli

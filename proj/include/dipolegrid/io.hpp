#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dipolegrid/geometry.hpp"
#include "dipolegrid/statespace.hpp"

namespace dipolegrid {

using json = nlohmann::json;

/// Shortest round-trip decimal representation ("%.17g"), so CSV output is
/// byte-stable and lossless.
std::string format_double(double value);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  /// Index of a named column; throws ValidationError if absent.
  std::size_t column(const std::string& name) const;
};

/// Numeric CSV with a mandatory header row. Empty cells parse as NaN.
CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);

void write_csv_row(std::ostream& out, const std::vector<std::string>& cells);

json to_json(const Eigen::MatrixXd& m);
json vector_to_json(const Eigen::VectorXd& v);
Eigen::MatrixXd matrix_from_json(const json& j);
Eigen::VectorXd vector_from_json(const json& j);
Vec3 vec3_from_json(const json& j);

json to_json(const RoiBox& roi);
RoiBox roi_from_json(const json& j);
json to_json(const VoxelGrid& grid);
VoxelGrid grid_from_json(const json& j);
json to_json(const HeadModel& head);
HeadModel head_from_json(const json& j);
json to_json(const SensorArray& sensors);
SensorArray sensors_from_json(const json& j);

/// V is written as {"sigma2": s, "dim": L} when it is a multiple of the
/// identity, as a full matrix otherwise; both forms are accepted on input.
json to_json(const ModelParams& params);
ModelParams params_from_json(const json& j);

json read_json_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& contents);

}  // namespace dipolegrid

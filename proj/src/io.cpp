#include "dipolegrid/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "dipolegrid/errors.hpp"

namespace dipolegrid {

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw ValidationError("CSV is missing column '" + name + "'");
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t start = 0;
    while (start < cell.size() && cell[start] == ' ') ++start;
    cells.push_back(cell.substr(start));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
  if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (cell == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (cell == "inf") return std::numeric_limits<double>::infinity();
  if (cell == "-inf") return -std::numeric_limits<double>::infinity();
  double value = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ValidationError("CSV row " + std::to_string(row) + ", column " + std::to_string(col + 1) +
                          ": not a number: '" + cell + "'");
  }
  return value;
}

}  // namespace

CsvTable read_csv(std::istream& in) {
  CsvTable table;
  std::string line;
  bool have_header = false;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!have_header) {
      table.header = split_line(line);
      have_header = true;
      continue;
    }
    const auto cells = split_line(line);
    if (cells.size() != table.header.size()) {
      throw ValidationError("CSV row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                            " cells, header has " + std::to_string(table.header.size()));
    }
    std::vector<double> values(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) values[c] = parse_cell(cells[c], row, c);
    table.rows.push_back(std::move(values));
  }
  if (!have_header) throw ValidationError("CSV is empty (header row is mandatory)");
  return table;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return read_csv(in);
}

void write_csv_row(std::ostream& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out << ',';
    out << cells[i];
  }
  out << '\n';
}

json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

namespace {

double number(const json& j, const char* what) {
  if (!j.is_number()) throw ValidationError(std::string(what) + ": expected a number");
  return j.get<double>();
}

}  // namespace

Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw ValidationError("matrix: expected a non-empty array of rows");
  const std::size_t rows = j.size();
  if (!j[0].is_array()) throw ValidationError("matrix: expected an array of rows");
  const std::size_t cols = j[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ValidationError("matrix: ragged rows");
    for (std::size_t c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = number(j[r][c], "matrix entry");
    }
  }
  return m;
}

Eigen::VectorXd vector_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("vector: expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number(j[i], "vector entry");
  return v;
}

Vec3 vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ValidationError("expected a 3-vector");
  return {number(j[0], "x"), number(j[1], "y"), number(j[2], "z")};
}

json to_json(const RoiBox& roi) {
  json out = json::array();
  for (const auto& axis : roi.axes) out.push_back({axis.lo, axis.hi});
  return out;
}

RoiBox roi_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ValidationError("roi: expected three [lo, hi] intervals");
  RoiBox roi;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!j[i].is_array() || j[i].size() != 2) throw ValidationError("roi: each interval is [lo, hi]");
    roi.axes[i] = {number(j[i][0], "roi bound"), number(j[i][1], "roi bound")};
  }
  roi.validate();
  return roi;
}

json to_json(const VoxelGrid& grid) {
  json centers = json::array();
  for (const Vec3& c : grid.centers()) centers.push_back({c(0), c(1), c(2)});
  return {{"roi", to_json(grid.roi())},
          {"mesh", {grid.mesh()[0], grid.mesh()[1], grid.mesh()[2]}},
          {"size", grid.size()},
          {"centers", std::move(centers)}};
}

VoxelGrid grid_from_json(const json& j) {
  if (!j.is_object() || !j.contains("roi") || !j.contains("mesh")) {
    throw ValidationError("grid: needs 'roi' and 'mesh'");
  }
  const json& m = j.at("mesh");
  if (!m.is_array() || m.size() != 3) throw ValidationError("grid: mesh must have three counts");
  Mesh mesh{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!m[i].is_number_integer()) throw ValidationError("grid: mesh counts must be integers");
    mesh[i] = m[i].get<int>();
  }
  return VoxelGrid(roi_from_json(j.at("roi")), mesh);
}

json to_json(const HeadModel& head) {
  return {{"center", {head.center(0), head.center(1), head.center(2)}}, {"radius", head.radius}};
}

HeadModel head_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("head: expected an object");
  HeadModel head;
  for (const auto& [key, value] : j.items()) {
    if (key == "center") {
      head.center = vec3_from_json(value);
    } else if (key == "radius") {
      head.radius = number(value, "head.radius");
    } else {
      throw ValidationError("head: unknown key '" + key + "'");
    }
  }
  head.validate();
  return head;
}

json to_json(const SensorArray& sensors) {
  json positions = json::array();
  for (const Vec3& p : sensors.positions) positions.push_back({p(0), p(1), p(2)});
  json out = {{"modality", sensors.modality == Modality::kMeg ? "meg" : "eeg"},
              {"count", sensors.size()},
              {"positions", std::move(positions)}};
  if (sensors.modality == Modality::kEeg) out["conductivity"] = sensors.conductivity;
  return out;
}

SensorArray sensors_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("sensors: expected an object");
  SensorArray sensors;
  long count = -1;
  for (const auto& [key, value] : j.items()) {
    if (key == "modality") {
      const std::string m = value.is_string() ? value.get<std::string>() : "";
      if (m == "meg") {
        sensors.modality = Modality::kMeg;
      } else if (m == "eeg") {
        sensors.modality = Modality::kEeg;
      } else {
        throw ValidationError("sensors.modality must be \"meg\" or \"eeg\"");
      }
    } else if (key == "conductivity") {
      sensors.conductivity = number(value, "sensors.conductivity");
    } else if (key == "count") {
      count = static_cast<long>(number(value, "sensors.count"));
    } else if (key == "positions") {
      if (!value.is_array()) throw ValidationError("sensors.positions must be an array");
      for (const json& p : value) sensors.positions.push_back(vec3_from_json(p));
    } else {
      throw ValidationError("sensors: unknown key '" + key + "'");
    }
  }
  if (count >= 0 && static_cast<std::size_t>(count) != sensors.size()) {
    throw ValidationError("sensors.count does not match the number of positions");
  }
  return sensors;
}

json to_json(const ModelParams& params) {
  json moments = json::array();
  for (const Vec3& q : params.q_fixed) moments.push_back({q(0), q(1), q(2)});
  json v;
  const Eigen::Index L = params.V.rows();
  const double s2 = L > 0 ? params.V(0, 0) : 0.0;
  if (L > 0 && params.V == s2 * Eigen::MatrixXd::Identity(L, L)) {
    v = {{"sigma2", s2}, {"dim", L}};
  } else {
    v = to_json(params.V);
  }
  return {{"sources", params.sources}, {"mu0", vector_to_json(params.mu0)},
          {"Sigma0", to_json(params.sigma0)}, {"A", to_json(params.A)},
          {"b", vector_to_json(params.b)},    {"Sigma", to_json(params.sigma)},
          {"V", std::move(v)},                {"q_fixed", std::move(moments)}};
}

ModelParams params_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("params: expected an object");
  ModelParams p;
  bool have_sources = false;
  for (const auto& [key, value] : j.items()) {
    if (key == "sources") {
      if (!value.is_number_integer()) throw ValidationError("params.sources must be an integer");
      p.sources = value.get<int>();
      have_sources = true;
    } else if (key == "mu0") {
      p.mu0 = vector_from_json(value);
    } else if (key == "Sigma0") {
      p.sigma0 = matrix_from_json(value);
    } else if (key == "A") {
      p.A = matrix_from_json(value);
    } else if (key == "b") {
      p.b = vector_from_json(value);
    } else if (key == "Sigma") {
      p.sigma = matrix_from_json(value);
    } else if (key == "V") {
      if (value.is_object()) {
        if (!value.contains("sigma2") || !value.contains("dim") || value.size() != 2) {
          throw ValidationError("params.V object form is {\"sigma2\": s, \"dim\": L}");
        }
        const long dim = static_cast<long>(number(value.at("dim"), "V.dim"));
        if (dim < 1) throw ValidationError("V.dim must be >= 1");
        p.V = number(value.at("sigma2"), "V.sigma2") * Eigen::MatrixXd::Identity(dim, dim);
      } else {
        p.V = matrix_from_json(value);
      }
    } else if (key == "q_fixed") {
      if (!value.is_array()) throw ValidationError("params.q_fixed must be an array of 3-vectors");
      for (const json& q : value) p.q_fixed.push_back(vec3_from_json(q));
    } else {
      throw ValidationError("params: unknown key '" + key + "'");
    }
  }
  if (!have_sources) p.sources = static_cast<int>(p.q_fixed.size());
  p.validate();
  return p;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NumericError("cannot open " + path + " for writing");
  out << contents;
  if (!out) throw NumericError("failed writing " + path);
}

}  // namespace dipolegrid

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace dipolegrid {

using Vec3 = Eigen::Vector3d;

/// Single-sphere head model, lengths in cm.
struct HeadModel {
  Vec3 center = Vec3::Zero();
  double radius = 10.0;

  void validate() const;
  /// Strictly inside the sphere.
  bool contains(const Vec3& point) const;
};

enum class Modality { kMeg, kEeg };

struct SensorArray {
  std::vector<Vec3> positions;
  Modality modality = Modality::kMeg;
  /// Siemens/cm; only meaningful for EEG.
  double conductivity = 0.0;

  std::size_t size() const { return positions.size(); }
  /// Checks count, conductivity, and that every sensor sits outside the head.
  void validate(const HeadModel& head) const;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  double width() const { return hi - lo; }
  bool contains(double x) const { return x >= lo && x <= hi; }
};

/// Axis-aligned box I_1 x I_2 x I_3.
struct RoiBox {
  std::array<Interval, 3> axes{};

  Vec3 lower() const { return {axes[0].lo, axes[1].lo, axes[2].lo}; }
  Vec3 upper() const { return {axes[0].hi, axes[1].hi, axes[2].hi}; }
  Vec3 centroid() const { return 0.5 * (lower() + upper()); }
  bool contains(const Vec3& p) const;
  bool contains(const RoiBox& other) const;

  /// Throws ValidationError for an empty interval (hi < lo) or non-finite bound.
  void validate() const;
  /// Throws ValidationError unless the box meets the closed head ball.
  void validate_against(const HeadModel& head) const;

  friend bool operator==(const RoiBox& a, const RoiBox& b) {
    for (int i = 0; i < 3; ++i) {
      if (a.axes[i].lo != b.axes[i].lo || a.axes[i].hi != b.axes[i].hi) return false;
    }
    return true;
  }
};

/// Bounding box of the head sphere.
RoiBox bounding_box(const HeadModel& head);

/// Intersection of two boxes; an axis that would become empty collapses to
/// the nearest point of `box` inside `clip`.
RoiBox clip_to(const RoiBox& box, const RoiBox& clip);

using Mesh = std::array<int, 3>;

/// Regular partition of an ROI into K_1 K_2 K_3 voxels. Voxel (i,j,k) has
/// flat index i + K_1 (j + K_2 k), i.e. x varies fastest.
class VoxelGrid {
 public:
  VoxelGrid(const RoiBox& roi, const Mesh& mesh);

  const RoiBox& roi() const { return roi_; }
  const Mesh& mesh() const { return mesh_; }
  std::size_t size() const { return centers_.size(); }

  const Vec3& center(std::size_t k) const { return centers_[k]; }
  const std::vector<Vec3>& centers() const { return centers_; }

  /// Center coordinate of cell `i` along `axis`.
  double axis_center(int axis, int i) const;
  /// Cell width along `axis` (0 for a degenerate single-cell axis).
  double cell_width(int axis) const { return widths_[axis]; }
  /// Product of the nonzero cell widths.
  double cell_volume() const;

  std::array<int, 3> unravel(std::size_t k) const;
  std::size_t flat_index(int i, int j, int k) const;

  /// Voxel containing `point`: cells are half-open on the upper face except
  /// on the global upper boundary of the ROI.
  std::optional<std::size_t> voxel_of(const Vec3& point) const;

 private:
  RoiBox roi_;
  Mesh mesh_;
  std::array<double, 3> widths_{};
  std::vector<Vec3> centers_;
};

VoxelGrid discretize(const RoiBox& roi, const Mesh& mesh);

inline std::optional<std::size_t> voxel_of(const VoxelGrid& grid, const Vec3& point) {
  return grid.voxel_of(point);
}

/// Default sensor standoff above the scalp, cm.
inline constexpr double kDefaultStandoff = 0.5;

/// `count` sensors uniformly distributed over the upper hemisphere
/// (z >= center z) of radius head.radius + standoff. Deterministic in `seed`.
SensorArray place_sensors(const HeadModel& head, int count, std::uint64_t seed,
                          double standoff = kDefaultStandoff);

}  // namespace dipolegrid

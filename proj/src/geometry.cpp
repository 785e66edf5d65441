#include "dipolegrid/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dipolegrid/errors.hpp"
#include "dipolegrid/random.hpp"

namespace dipolegrid {

void HeadModel::validate() const {
  if (!(radius > 0.0) || !std::isfinite(radius)) {
    throw ValidationError("head radius must be positive");
  }
  if (!center.allFinite()) throw ValidationError("head center must be finite");
}

bool HeadModel::contains(const Vec3& point) const {
  return (point - center).norm() < radius;
}

void SensorArray::validate(const HeadModel& head) const {
  if (positions.empty()) throw ValidationError("sensor array is empty");
  if (modality == Modality::kEeg && !(conductivity > 0.0)) {
    throw ValidationError("EEG conductivity must be positive");
  }
  for (std::size_t l = 0; l < positions.size(); ++l) {
    if (!positions[l].allFinite() || (positions[l] - head.center).norm() <= head.radius) {
      throw ValidationError("sensor " + std::to_string(l) + " is not outside the head sphere");
    }
  }
}

bool RoiBox::contains(const Vec3& p) const {
  for (int i = 0; i < 3; ++i) {
    if (!axes[i].contains(p(i))) return false;
  }
  return true;
}

bool RoiBox::contains(const RoiBox& other) const {
  for (int i = 0; i < 3; ++i) {
    if (other.axes[i].lo < axes[i].lo || other.axes[i].hi > axes[i].hi) return false;
  }
  return true;
}

void RoiBox::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(axes[i].lo) || !std::isfinite(axes[i].hi)) {
      throw ValidationError("ROI bounds must be finite");
    }
    if (axes[i].hi < axes[i].lo) {
      throw ValidationError("ROI interval " + std::to_string(i + 1) + " is empty");
    }
  }
}

void RoiBox::validate_against(const HeadModel& head) const {
  validate();
  // Closest point of the box to the sphere center.
  Vec3 nearest;
  for (int i = 0; i < 3; ++i) nearest(i) = std::clamp(head.center(i), axes[i].lo, axes[i].hi);
  if ((nearest - head.center).norm() > head.radius) {
    throw ValidationError("ROI does not intersect the head model");
  }
}

RoiBox bounding_box(const HeadModel& head) {
  RoiBox box;
  for (int i = 0; i < 3; ++i) {
    box.axes[i] = {head.center(i) - head.radius, head.center(i) + head.radius};
  }
  return box;
}

RoiBox clip_to(const RoiBox& box, const RoiBox& clip) {
  RoiBox out;
  for (int i = 0; i < 3; ++i) {
    double lo = std::max(box.axes[i].lo, clip.axes[i].lo);
    double hi = std::min(box.axes[i].hi, clip.axes[i].hi);
    if (hi < lo) {
      const double p = std::clamp(0.5 * (box.axes[i].lo + box.axes[i].hi), clip.axes[i].lo,
                                  clip.axes[i].hi);
      lo = hi = p;
    }
    out.axes[i] = {lo, hi};
  }
  return out;
}

VoxelGrid::VoxelGrid(const RoiBox& roi, const Mesh& mesh) : roi_(roi), mesh_(mesh) {
  roi_.validate();
  for (int d = 0; d < 3; ++d) {
    if (mesh_[d] < 1) throw ValidationError("mesh counts must be >= 1");
    const double width = roi_.axes[d].width();
    if (width == 0.0 && mesh_[d] > 1) {
      throw ValidationError("degenerate ROI interval " + std::to_string(d + 1) +
                            " cannot be split into " + std::to_string(mesh_[d]) + " cells");
    }
    widths_[d] = width / mesh_[d];
  }
  centers_.reserve(static_cast<std::size_t>(mesh_[0]) * mesh_[1] * mesh_[2]);
  for (int k = 0; k < mesh_[2]; ++k) {
    for (int j = 0; j < mesh_[1]; ++j) {
      for (int i = 0; i < mesh_[0]; ++i) {
        centers_.emplace_back(axis_center(0, i), axis_center(1, j), axis_center(2, k));
      }
    }
  }
}

double VoxelGrid::axis_center(int axis, int i) const {
  return roi_.axes[axis].lo + (i + 0.5) * widths_[axis];
}

double VoxelGrid::cell_volume() const {
  double v = 1.0;
  for (double w : widths_) {
    if (w > 0.0) v *= w;
  }
  return v;
}

std::array<int, 3> VoxelGrid::unravel(std::size_t k) const {
  const int i = static_cast<int>(k % mesh_[0]);
  const std::size_t rest = k / mesh_[0];
  const int j = static_cast<int>(rest % mesh_[1]);
  return {i, j, static_cast<int>(rest / mesh_[1])};
}

std::size_t VoxelGrid::flat_index(int i, int j, int k) const {
  return static_cast<std::size_t>(i) +
         static_cast<std::size_t>(mesh_[0]) *
             (static_cast<std::size_t>(j) + static_cast<std::size_t>(mesh_[1]) * k);
}

std::optional<std::size_t> VoxelGrid::voxel_of(const Vec3& point) const {
  std::array<int, 3> cell{};
  for (int d = 0; d < 3; ++d) {
    const Interval& iv = roi_.axes[d];
    const double x = point(d);
    if (!(x >= iv.lo && x <= iv.hi)) return std::nullopt;
    if (widths_[d] == 0.0 || x == iv.hi) {
      cell[d] = mesh_[d] - 1;
      continue;
    }
    int c = static_cast<int>(std::floor((x - iv.lo) / widths_[d]));
    cell[d] = std::clamp(c, 0, mesh_[d] - 1);
  }
  return flat_index(cell[0], cell[1], cell[2]);
}

VoxelGrid discretize(const RoiBox& roi, const Mesh& mesh) { return VoxelGrid(roi, mesh); }

SensorArray place_sensors(const HeadModel& head, int count, std::uint64_t seed, double standoff) {
  head.validate();
  if (count < 1) throw ValidationError("sensor count must be >= 1");
  if (!(standoff > 0.0)) throw ValidationError("sensor standoff must be positive");
  RandomStream rng(seed, /*stream=*/0x5E4503);
  const double r = head.radius + standoff;
  SensorArray sensors;
  sensors.positions.reserve(count);
  for (int l = 0; l < count; ++l) {
    // Uniform on the hemisphere: height uniform in [0, 1] (Archimedes), azimuth uniform.
    const double z = rng.uniform();
    const double phi = 2.0 * std::numbers::pi * rng.uniform();
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    sensors.positions.push_back(head.center + r * Vec3(s * std::cos(phi), s * std::sin(phi), z));
  }
  return sensors;
}

}  // namespace dipolegrid

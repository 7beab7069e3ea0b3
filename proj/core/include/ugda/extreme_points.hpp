#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ugda/grid.hpp"

namespace ugda {

enum class Axis { x = 0, y = 1, z = 2 };
enum class Side { min = 0, max = 1 };
enum class PointSource { human_click, derived_from_mask, predicted };

std::string_view to_string(Axis a);
std::string_view to_string(Side s);
std::string_view to_string(PointSource s);
Axis parse_axis(std::string_view s);
Side parse_side(std::string_view s);
PointSource parse_point_source(std::string_view s);

/// Slot index in canonical order: x-min, x-max, y-min, y-max, z-min, z-max.
constexpr int slot_index(Axis a, Side s) { return 2 * static_cast<int>(a) + static_cast<int>(s); }
constexpr Axis slot_axis(int slot) { return static_cast<Axis>(slot / 2); }
constexpr Side slot_side(int slot) { return static_cast<Side>(slot % 2); }
inline constexpr int kExtremePointCount = 6;

struct ExtremePoint {
  Axis axis = Axis::x;
  Side side = Side::min;
  Index3 ijk;

  bool operator==(const ExtremePoint&) const = default;
};

/// Any number of placed points, at most one per slot. This is what the
/// annotation service stores while an annotator is still clicking.
struct PointRecord {
  std::string study_id;
  Spacing3 spacing_mm{1.0, 1.0, 1.0};
  PointSource source = PointSource::human_click;
  std::vector<ExtremePoint> points;

  bool operator==(const PointRecord&) const = default;
};

/// The six extreme points of one object.
class ExtremePointSet {
 public:
  ExtremePointSet() = default;

  /// Validates the per-axis ordering (min-side coordinate <= max-side
  /// coordinate along the axis) and non-negativity of every coordinate.
  ExtremePointSet(std::array<Index3, kExtremePointCount> points, Spacing3 spacing_mm, PointSource source,
                  std::string study_id = {});

  /// Requires exactly one point per slot.
  static ExtremePointSet from_record(const PointRecord& record);
  PointRecord to_record() const;

  const Index3& at(Axis a, Side s) const { return points_[static_cast<size_t>(slot_index(a, s))]; }
  const Index3& slot(int index) const { return points_.at(static_cast<size_t>(index)); }
  const std::array<Index3, kExtremePointCount>& points() const { return points_; }
  const Spacing3& spacing_mm() const { return spacing_mm_; }
  PointSource source() const { return source_; }
  const std::string& study_id() const { return study_id_; }
  void set_source(PointSource s) { source_ = s; }

  /// Throws InvalidArgument when any point falls outside `shape`.
  void require_inside(const Shape3& shape) const;

  bool operator==(const ExtremePointSet&) const = default;

 private:
  std::array<Index3, kExtremePointCount> points_{};
  Spacing3 spacing_mm_{1.0, 1.0, 1.0};
  PointSource source_ = PointSource::derived_from_mask;
  std::string study_id_;
};

/// For each axis and side returns an in-mask voxel attaining that axis
/// extremum. Among the voxels of the extremal slice, the one nearest to the
/// slice's in-mask centroid wins; remaining ties go to the lexicographically
/// smallest (i, j, k). Throws EmptyMaskError on an empty mask.
ExtremePointSet extract_extreme_points(const SegmentationMask& mask);

/// Canonical JSON text of a point record: keys study_id, spacing_mm, source,
/// points[{axis, side, ijk}] in slot order. Serialising a parsed document
/// reproduces the input bytes when the input was produced by this function.
std::string points_to_json(const PointRecord& record);
std::string points_to_json(const ExtremePointSet& set);
PointRecord points_from_json(std::string_view text);

ExtremePointSet read_extreme_points(const std::string& path);
void write_extreme_points(const std::string& path, const ExtremePointSet& set);

}  // namespace ugda

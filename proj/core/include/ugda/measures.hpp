#pragma once

#include <optional>

#include "ugda/extreme_points.hpp"
#include "ugda/grid.hpp"

namespace ugda {

/// 2|a∩b| / (|a| + |b|), 1.0 when both masks are empty.
double dice_score(const SegmentationMask& a, const SegmentationMask& b);

/// voxel = 1 iff p >= threshold; threshold must lie in (0, 1).
SegmentationMask binarize(const ProbabilityMap& p, double threshold = 0.5);

/// Keeps only the largest 6-connected foreground component.
SegmentationMask largest_component(const SegmentationMask& m);

/// Mean Euclidean distance (mm) between the six extreme points extracted
/// from `pred` and the matching slots of `truth`. std::nullopt flags an
/// empty prediction, which aggregations exclude rather than treat as
/// infinite.
std::optional<double> mxa(const SegmentationMask& pred, const ExtremePointSet& truth);

/// Euclidean distance in millimetres between two voxel coordinates.
double distance_mm(const Index3& a, const Index3& b, const Spacing3& spacing);

}  // namespace ugda

#pragma once

#include "ugda/grid.hpp"

namespace ugda {

enum class Interpolation { linear, nearest };

inline constexpr double kDefaultWindowLow = -100.0;
inline constexpr double kDefaultWindowHigh = 300.0;

/// Resamples onto `target` voxels covering the same physical extent.
/// Voxel centres map as src = (dst + 0.5) * n_src / n_dst - 0.5, clamped to
/// the source grid. Spacing scales by n_src / n_dst per axis.
template <typename T, typename Tag>
Grid3<T, Tag> resample(const Grid3<T, Tag>& v, const Shape3& target, Interpolation mode);

Volume resample_volume(const Volume& v, const Shape3& target, Interpolation mode = Interpolation::linear);
SegmentationMask resample_mask(const SegmentationMask& m, const Shape3& target);
ProbabilityMap resample_probability(const ProbabilityMap& p, const Shape3& target);

/// clip((x - lo) / (hi - lo), 0, 1).
Volume window_normalize(const Volume& v, double lo = kDefaultWindowLow, double hi = kDefaultWindowHigh);

}  // namespace ugda

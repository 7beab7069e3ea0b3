#pragma once

#include <array>

#include "ugda/extreme_points.hpp"
#include "ugda/grid.hpp"

namespace ugda {

inline constexpr double kDefaultHeatmapSigma = 5.0;

struct HeatmapVolume {
  std::array<ProbabilityMap, kExtremePointCount> channels;
  /// Voxelwise sum of the six channels clamped to [0, 1].
  ProbabilityMap summed;
  double sigma_vox = kDefaultHeatmapSigma;
};

/// channel_k(v) = exp(-|v - p_k|^2 / (2 sigma^2)), distances in voxels.
HeatmapVolume render_heatmaps(const ExtremePointSet& points, const Shape3& shape,
                              double sigma_vox = kDefaultHeatmapSigma);

}  // namespace ugda

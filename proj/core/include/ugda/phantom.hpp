#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "ugda/extreme_points.hpp"
#include "ugda/grid.hpp"

namespace ugda {

enum class Domain { source, target };

std::string_view to_string(Domain d);
Domain parse_domain(std::string_view s);

/// Recipe for one synthetic abdominal-style study: a deformed ellipsoidal
/// organ with internal lesions, a neighbouring distractor structure of
/// similar intensity, additive noise and an optional multiplicative bias.
struct PhantomParams {
  Shape3 shape{64, 64, 24};
  Spacing3 spacing_mm{1.0, 1.0, 2.0};
  Domain domain = Domain::source;

  // Organ radii are drawn per axis from [radius_min, radius_max] voxels.
  std::array<double, 3> radius_min{14.0, 11.0, 4.5};
  std::array<double, 3> radius_max{18.0, 15.0, 6.5};
  /// Maximum in-plane rotation of the organ, radians.
  double max_rotation = 0.35;
  /// Maximum offset of the organ centre from the grid centre, voxels.
  std::array<double, 3> max_center_offset{5.0, 5.0, 1.0};

  /// Relative radial deformation amplitude and angular frequency.
  double deformation_amplitude = 0.10;
  int deformation_frequency = 3;

  int lesion_count_min = 1;
  int lesion_count_max = 3;
  double lesion_radius_min = 2.5;
  double lesion_radius_max = 5.0;
  /// Lesion intensity offset relative to the organ, drawn uniformly.
  double lesion_contrast_min = -0.15;
  double lesion_contrast_max = -0.05;

  double background_intensity = 0.15;
  double organ_intensity = 0.60;
  double distractor_intensity = 0.52;
  /// Gap (voxels) between the organ surface and the distractor structure.
  double distractor_gap = 2.0;

  double noise_sigma = 0.05;
  /// Amplitude of the low-frequency multiplicative bias field (0 disables).
  double bias_amplitude = 0.0;

  /// Default recipe for each domain. The target recipe is the source one
  /// with stronger boundary deformation, a multiplicative intensity bias and
  /// a wider lesion-contrast range.
  static PhantomParams defaults(Domain domain);

  /// Throws InvalidArgument when the organ cannot keep a 2-voxel margin to
  /// the grid boundary or a numeric field is out of range.
  void validate() const;
};

/// Analytic description of the generated organ, enough to recompute mask
/// membership independently.
struct PhantomGeometry {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  double rotation = 0.0;
  double deformation_amplitude = 0.0;
  int deformation_frequency = 0;
  std::array<double, 3> deformation_phase{};

  /// Radial scale of the boundary along the direction (dx, dy, dz) in the
  /// organ frame. 1.0 for an undeformed ellipsoid.
  double boundary_scale(double ux, double uy, double uz) const;
  /// True iff voxel (i, j, k) lies inside the deformed organ.
  bool inside(double i, double j, double k) const;
};

struct PhantomStudy {
  Volume volume;
  SegmentationMask mask;
  PhantomGeometry geometry;
};

/// Deterministic in (seed, params).
PhantomStudy generate_study(uint64_t seed, const PhantomParams& params, const std::string& study_id = {});

/// Extreme points of `mask` with optional per-point uniform jitter of at
/// most `jitter_vox` along the two in-slice axes, re-projected onto the
/// nearest in-mask voxel of the same extremal slice.
ExtremePointSet simulate_ps(const SegmentationMask& mask, double jitter_vox, uint64_t seed);

/// Stable per-study seed derived from a master seed and the study id.
uint64_t study_seed(uint64_t master_seed, std::string_view study_id);

}  // namespace ugda

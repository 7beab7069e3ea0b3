#include "ugda/heatmap.hpp"

#include <algorithm>
#include <cmath>

namespace ugda {

HeatmapVolume render_heatmaps(const ExtremePointSet& points, const Shape3& shape, double sigma_vox) {
  if (!(sigma_vox > 0.0)) throw InvalidArgument("render_heatmaps: sigma must be positive");
  if (!shape.valid()) throw InvalidArgument("render_heatmaps: invalid shape");
  points.require_inside(shape);

  HeatmapVolume out;
  out.sigma_vox = sigma_vox;
  const double inv_two_sigma_sq = 1.0 / (2.0 * sigma_vox * sigma_vox);
  out.summed = ProbabilityMap(shape, points.spacing_mm(), points.study_id());
  for (int c = 0; c < kExtremePointCount; ++c) {
    const Index3 p = points.slot(c);
    ProbabilityMap ch(shape, points.spacing_mm(), points.study_id());
    // Separable: exp(-(dx^2+dy^2+dz^2)/2s^2) = gx * gy * gz.
    std::vector<double> gx(static_cast<size_t>(shape.nx)), gy(static_cast<size_t>(shape.ny)),
        gz(static_cast<size_t>(shape.nz));
    for (int64_t i = 0; i < shape.nx; ++i) gx[static_cast<size_t>(i)] = std::exp(-double((i - p.i) * (i - p.i)) * inv_two_sigma_sq);
    for (int64_t j = 0; j < shape.ny; ++j) gy[static_cast<size_t>(j)] = std::exp(-double((j - p.j) * (j - p.j)) * inv_two_sigma_sq);
    for (int64_t k = 0; k < shape.nz; ++k) gz[static_cast<size_t>(k)] = std::exp(-double((k - p.k) * (k - p.k)) * inv_two_sigma_sq);
    for (int64_t k = 0; k < shape.nz; ++k)
      for (int64_t j = 0; j < shape.ny; ++j) {
        const double gjk = gy[static_cast<size_t>(j)] * gz[static_cast<size_t>(k)];
        for (int64_t i = 0; i < shape.nx; ++i) {
          const auto v = static_cast<float>(gx[static_cast<size_t>(i)] * gjk);
          ch(i, j, k) = v;
          out.summed(i, j, k) += v;
        }
      }
    out.channels[static_cast<size_t>(c)] = std::move(ch);
  }
  for (float& v : out.summed.voxels()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace ugda

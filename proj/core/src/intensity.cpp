#include "ugda/intensity.hpp"

#include <algorithm>
#include <cmath>

namespace ugda {

namespace {

struct AxisMap {
  std::vector<int64_t> lo;
  std::vector<int64_t> hi;
  std::vector<double> frac;
  std::vector<int64_t> nearest;
};

AxisMap make_axis_map(int64_t n_src, int64_t n_dst) {
  AxisMap m;
  const double scale = static_cast<double>(n_src) / static_cast<double>(n_dst);
  for (int64_t d = 0; d < n_dst; ++d) {
    double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n_src - 1));
    const auto l = static_cast<int64_t>(std::floor(s));
    const int64_t h = std::min(l + 1, n_src - 1);
    m.lo.push_back(l);
    m.hi.push_back(h);
    m.frac.push_back(s - static_cast<double>(l));
    m.nearest.push_back(std::min(static_cast<int64_t>(std::floor((static_cast<double>(d) + 0.5) * scale)), n_src - 1));
  }
  return m;
}

}  // namespace

template <typename T, typename Tag>
Grid3<T, Tag> resample(const Grid3<T, Tag>& v, const Shape3& target, Interpolation mode) {
  if (target.nx <= 0 || target.ny <= 0 || target.nz <= 0)
    throw InvalidArgument("resample: target dimensions must be positive");
  const Shape3 src = v.shape();
  Spacing3 spacing = v.spacing();
  for (int a = 0; a < 3; ++a)
    spacing[static_cast<size_t>(a)] *= static_cast<double>(src[a]) / static_cast<double>(target[a]);
  Grid3<T, Tag> out(target, spacing, v.study_id());
  if (target == src) {
    std::copy(v.voxels().begin(), v.voxels().end(), out.voxels().begin());
    return out;
  }
  const AxisMap mx = make_axis_map(src.nx, target.nx);
  const AxisMap my = make_axis_map(src.ny, target.ny);
  const AxisMap mz = make_axis_map(src.nz, target.nz);

  if (mode == Interpolation::nearest) {
    for (int64_t k = 0; k < target.nz; ++k)
      for (int64_t j = 0; j < target.ny; ++j)
        for (int64_t i = 0; i < target.nx; ++i)
          out(i, j, k) = v(mx.nearest[static_cast<size_t>(i)], my.nearest[static_cast<size_t>(j)],
                           mz.nearest[static_cast<size_t>(k)]);
    return out;
  }
  for (int64_t k = 0; k < target.nz; ++k) {
    const auto zk = static_cast<size_t>(k);
    const double fz = mz.frac[zk];
    for (int64_t j = 0; j < target.ny; ++j) {
      const auto yj = static_cast<size_t>(j);
      const double fy = my.frac[yj];
      for (int64_t i = 0; i < target.nx; ++i) {
        const auto xi = static_cast<size_t>(i);
        const double fx = mx.frac[xi];
        auto at = [&](int64_t a, int64_t b, int64_t c) { return static_cast<double>(v(a, b, c)); };
        const int64_t x0 = mx.lo[xi], x1 = mx.hi[xi], y0 = my.lo[yj], y1 = my.hi[yj], z0 = mz.lo[zk], z1 = mz.hi[zk];
        const double c00 = at(x0, y0, z0) * (1 - fx) + at(x1, y0, z0) * fx;
        const double c10 = at(x0, y1, z0) * (1 - fx) + at(x1, y1, z0) * fx;
        const double c01 = at(x0, y0, z1) * (1 - fx) + at(x1, y0, z1) * fx;
        const double c11 = at(x0, y1, z1) * (1 - fx) + at(x1, y1, z1) * fx;
        const double c0 = c00 * (1 - fy) + c10 * fy;
        const double c1 = c01 * (1 - fy) + c11 * fy;
        out(i, j, k) = static_cast<T>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

template Volume resample(const Volume&, const Shape3&, Interpolation);
template ProbabilityMap resample(const ProbabilityMap&, const Shape3&, Interpolation);
template SegmentationMask resample(const SegmentationMask&, const Shape3&, Interpolation);

Volume resample_volume(const Volume& v, const Shape3& target, Interpolation mode) { return resample(v, target, mode); }

SegmentationMask resample_mask(const SegmentationMask& m, const Shape3& target) {
  return resample(m, target, Interpolation::nearest);
}

ProbabilityMap resample_probability(const ProbabilityMap& p, const Shape3& target) {
  return resample(p, target, Interpolation::linear);
}

Volume window_normalize(const Volume& v, double lo, double hi) {
  if (!(lo < hi)) throw InvalidArgument("window_normalize: lo must be below hi");
  Volume out(v.shape(), v.spacing(), v.study_id());
  const auto src = v.voxels();
  auto dst = out.voxels();
  const double range = hi - lo;
  for (size_t n = 0; n < src.size(); ++n)
    dst[n] = static_cast<float>(std::clamp((static_cast<double>(src[n]) - lo) / range, 0.0, 1.0));
  return out;
}

}  // namespace ugda

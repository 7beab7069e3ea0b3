#pragma once

// Independent brute-force oracles and random generators shared by the unit
// and acceptance suites. Nothing here calls into the code paths it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "ugda/extreme_points.hpp"
#include "ugda/grid.hpp"

namespace ugda::testing {

/// Random blob: union of a few random spheres, guaranteed non-empty.
inline SegmentationMask random_mask(std::mt19937_64& rng, Shape3 shape, Spacing3 spacing = {1.0, 1.0, 1.0}) {
  SegmentationMask m(shape, spacing, "rand");
  std::uniform_int_distribution<int> blobs(1, 4);
  const int n = blobs(rng);
  for (int b = 0; b < n; ++b) {
    std::uniform_real_distribution<double> cx(0, double(shape.nx - 1)), cy(0, double(shape.ny - 1)),
        cz(0, double(shape.nz - 1));
    std::uniform_real_distribution<double> rr(0.5, 0.35 * double(std::max({shape.nx, shape.ny, shape.nz})));
    const double x = cx(rng), y = cy(rng), z = cz(rng), r = rr(rng);
    for (int64_t k = 0; k < shape.nz; ++k)
      for (int64_t j = 0; j < shape.ny; ++j)
        for (int64_t i = 0; i < shape.nx; ++i) {
          const double d = (i - x) * (i - x) + (j - y) * (j - y) + (k - z) * (k - z);
          if (d <= r * r) m(i, j, k) = 1;
        }
  }
  if (foreground_count(m) == 0) {
    std::uniform_int_distribution<int64_t> pi(0, shape.nx - 1), pj(0, shape.ny - 1), pk(0, shape.nz - 1);
    m(pi(rng), pj(rng), pk(rng)) = 1;
  }
  return m;
}

inline Shape3 random_shape(std::mt19937_64& rng, int64_t max_side = 32) {
  std::uniform_int_distribution<int64_t> side(2, max_side);
  return {side(rng), side(rng), side(rng)};
}

/// Exhaustive per-axis extrema of the foreground: {min_x, max_x, min_y, ...}.
inline std::array<int64_t, 6> brute_extrema(const SegmentationMask& m) {
  std::array<int64_t, 6> e{std::numeric_limits<int64_t>::max(), -1, std::numeric_limits<int64_t>::max(), -1,
                           std::numeric_limits<int64_t>::max(), -1};
  const Shape3 s = m.shape();
  for (int64_t k = 0; k < s.nz; ++k)
    for (int64_t j = 0; j < s.ny; ++j)
      for (int64_t i = 0; i < s.nx; ++i) {
        if (!m(i, j, k)) continue;
        const int64_t c[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          e[2 * a] = std::min(e[2 * a], c[a]);
          e[2 * a + 1] = std::max(e[2 * a + 1], c[a]);
        }
      }
  return e;
}

/// Tie-break rule written out directly over the whole grid: among all
/// voxels on the extremal plane, minimise the squared distance to the
/// plane's in-mask centroid (in doubles), then (i, j, k) lexicographically.
inline Index3 brute_extreme_point(const SegmentationMask& m, int axis, bool max_side) {
  const auto ext = brute_extrema(m);
  const int64_t plane = ext[2 * axis + (max_side ? 1 : 0)];
  const Shape3 s = m.shape();
  std::vector<Index3> pts;
  double cu = 0, cw = 0;
  const int u = axis == 0 ? 1 : 0, w = axis == 2 ? 1 : 2;
  for (int64_t k = 0; k < s.nz; ++k)
    for (int64_t j = 0; j < s.ny; ++j)
      for (int64_t i = 0; i < s.nx; ++i) {
        Index3 p{i, j, k};
        if (m[p] && p[axis] == plane) {
          pts.push_back(p);
          cu += double(p[u]);
          cw += double(p[w]);
        }
      }
  cu /= double(pts.size());
  cw /= double(pts.size());
  // Compare in scaled integers to avoid rounding ties away.
  const auto n = static_cast<int64_t>(pts.size());
  int64_t su = 0, sw = 0;
  for (const auto& p : pts) {
    su += p[u];
    sw += p[w];
  }
  Index3 best = pts[0];
  auto dist = [&](const Index3& p) {
    const int64_t a = p[u] * n - su, b = p[w] * n - sw;
    return a * a + b * b;
  };
  for (const auto& p : pts)
    if (dist(p) < dist(best) || (dist(p) == dist(best) && p < best)) best = p;
  (void)cu;
  (void)cw;
  return best;
}

inline double brute_dice(const SegmentationMask& a, const SegmentationMask& b) {
  const Shape3 s = a.shape();
  double na = 0, nb = 0, both = 0;
  for (int64_t k = 0; k < s.nz; ++k)
    for (int64_t j = 0; j < s.ny; ++j)
      for (int64_t i = 0; i < s.nx; ++i) {
        na += a(i, j, k);
        nb += b(i, j, k);
        both += (a(i, j, k) && b(i, j, k)) ? 1 : 0;
      }
  return na + nb == 0 ? 1.0 : 2 * both / (na + nb);
}

inline SegmentationMask translate(const SegmentationMask& m, int64_t dx, int64_t dy, int64_t dz) {
  SegmentationMask out(m.shape(), m.spacing(), m.study_id());
  const Shape3 s = m.shape();
  for (int64_t k = 0; k < s.nz; ++k)
    for (int64_t j = 0; j < s.ny; ++j)
      for (int64_t i = 0; i < s.nx; ++i)
        if (m(i, j, k)) {
          const Index3 q{i + dx, j + dy, k + dz};
          if (s.contains(q)) out[q] = 1;
        }
  return out;
}

inline SegmentationMask box_mask(Shape3 shape, Index3 lo, Index3 hi, Spacing3 spacing = {1.0, 1.0, 1.0}) {
  SegmentationMask m(shape, spacing, "box");
  for (int64_t k = lo.k; k <= hi.k; ++k)
    for (int64_t j = lo.j; j <= hi.j; ++j)
      for (int64_t i = lo.i; i <= hi.i; ++i) m(i, j, k) = 1;
  return m;
}

}  // namespace ugda::testing

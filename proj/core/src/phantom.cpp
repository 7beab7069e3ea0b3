#include "ugda/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace ugda {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(std::string_view s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw InvalidArgument("unknown domain '" + std::string(s) + "'");
}

PhantomParams PhantomParams::defaults(Domain domain) {
  PhantomParams p;
  p.domain = domain;
  if (domain == Domain::target) {
    p.deformation_amplitude = 0.20;
    p.bias_amplitude = 0.25;
    p.lesion_contrast_min = -0.45;
    p.lesion_contrast_max = 0.10;
  }
  return p;
}

void PhantomParams::validate() const {
  if (!shape.valid()) throw InvalidArgument("phantom: shape must be positive");
  if (!valid_spacing(spacing_mm)) throw InvalidArgument("phantom: spacing must be positive");
  if (noise_sigma < 0.0) throw InvalidArgument("phantom: noise level must be non-negative");
  if (deformation_amplitude < 0.0 || deformation_amplitude >= 1.0)
    throw InvalidArgument("phantom: deformation amplitude must lie in [0, 1)");
  if (lesion_count_min < 0 || lesion_count_max < lesion_count_min)
    throw InvalidArgument("phantom: invalid lesion count range");
  if (lesion_radius_min <= 0.0 || lesion_radius_max < lesion_radius_min)
    throw InvalidArgument("phantom: invalid lesion radius range");
  if (lesion_contrast_max < lesion_contrast_min) throw InvalidArgument("phantom: invalid lesion contrast range");
  if (bias_amplitude < 0.0 || bias_amplitude >= 1.0) throw InvalidArgument("phantom: bias amplitude must lie in [0, 1)");
  for (int a = 0; a < 3; ++a) {
    const auto ua = static_cast<size_t>(a);
    if (radius_min[ua] <= 0.0 || radius_max[ua] < radius_min[ua])
      throw InvalidArgument("phantom: invalid radius range");
  }
  // Rotation mixes the in-plane radii, so the in-plane bound uses the larger one.
  const double inplane = std::max(radius_max[0], radius_max[1]);
  const std::array<double, 3> extent{inplane, inplane, radius_max[2]};
  for (int a = 0; a < 3; ++a) {
    const auto ua = static_cast<size_t>(a);
    const double reach = extent[ua] * (1.0 + deformation_amplitude) + max_center_offset[ua] + 2.0;
    const double half = 0.5 * static_cast<double>(shape[a] - 1);
    if (reach > half) throw InvalidArgument("phantom: organ radius leaves less than a 2-voxel margin");
  }
}

double PhantomGeometry::boundary_scale(double ux, double uy, double uz) const {
  if (deformation_amplitude == 0.0) return 1.0;
  const double norm = std::sqrt(ux * ux + uy * uy + uz * uz);
  if (norm == 0.0) return 1.0;
  const double theta = std::atan2(uy, ux);
  const double elevation = std::asin(std::clamp(uz / norm, -1.0, 1.0));
  const double f = static_cast<double>(deformation_frequency);
  const double wave = 0.55 * std::sin(f * theta + deformation_phase[0]) +
                      0.30 * std::sin((f - 1.0) * theta + deformation_phase[1]) * std::cos(elevation) +
                      0.15 * std::sin(2.0 * elevation + deformation_phase[2]);
  return 1.0 + deformation_amplitude * wave;
}

bool PhantomGeometry::inside(double i, double j, double k) const {
  const double dx = i - center[0];
  const double dy = j - center[1];
  const double dz = k - center[2];
  const double c = std::cos(rotation);
  const double s = std::sin(rotation);
  const double ux = (c * dx + s * dy) / radii[0];
  const double uy = (-s * dx + c * dy) / radii[1];
  const double uz = dz / radii[2];
  const double rho_sq = ux * ux + uy * uy + uz * uz;
  if (deformation_amplitude == 0.0) return rho_sq <= 1.0;
  const double scale = boundary_scale(ux, uy, uz);
  return rho_sq <= scale * scale;
}

PhantomStudy generate_study(uint64_t seed, const PhantomParams& params, const std::string& study_id) {
  params.validate();
  std::mt19937_64 rng(splitmix64(seed));
  const Shape3 shape = params.shape;

  PhantomGeometry g;
  for (int a = 0; a < 3; ++a) {
    const auto ua = static_cast<size_t>(a);
    g.radii[ua] = uniform(rng, params.radius_min[ua], params.radius_max[ua]);
    g.center[ua] = 0.5 * static_cast<double>(shape[a] - 1) +
                   uniform(rng, -params.max_center_offset[ua], params.max_center_offset[ua]);
  }
  g.rotation = uniform(rng, -params.max_rotation, params.max_rotation);
  g.deformation_amplitude = params.deformation_amplitude;
  g.deformation_frequency = params.deformation_frequency;
  for (auto& ph : g.deformation_phase) ph = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  PhantomStudy out;
  out.geometry = g;
  out.mask = SegmentationMask(shape, params.spacing_mm, study_id);
  out.volume = Volume(shape, params.spacing_mm, study_id, static_cast<float>(params.background_intensity));
  for (int64_t k = 0; k < shape.nz; ++k)
    for (int64_t j = 0; j < shape.ny; ++j)
      for (int64_t i = 0; i < shape.nx; ++i)
        if (g.inside(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k))) {
          out.mask(i, j, k) = 1;
          out.volume(i, j, k) = static_cast<float>(params.organ_intensity);
        }

  // Distractor: a smaller ellipsoid just outside the organ along a random
  // in-plane direction. It never overwrites organ voxels.
  {
    const double dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const std::array<double, 3> dr{uniform(rng, 5.0, 8.0), uniform(rng, 5.0, 8.0), uniform(rng, 3.0, 5.0)};
    const double ux = std::cos(dir), uy = std::sin(dir);
    // Walk outward from the centre until leaving the organ.
    double reach = 0.0;
    while (reach < static_cast<double>(shape.nx + shape.ny) &&
           g.inside(g.center[0] + ux * reach, g.center[1] + uy * reach, g.center[2]))
      reach += 0.5;
    const double offset = reach + params.distractor_gap + dr[0];
    const std::array<double, 3> dc{g.center[0] + ux * offset, g.center[1] + uy * offset,
                                   g.center[2] + uniform(rng, -1.0, 1.0)};
    for (int64_t k = 0; k < shape.nz; ++k)
      for (int64_t j = 0; j < shape.ny; ++j)
        for (int64_t i = 0; i < shape.nx; ++i) {
          const double a = (static_cast<double>(i) - dc[0]) / dr[0];
          const double b = (static_cast<double>(j) - dc[1]) / dr[1];
          const double c = (static_cast<double>(k) - dc[2]) / dr[2];
          if (a * a + b * b + c * c <= 1.0 && !out.mask(i, j, k))
            out.volume(i, j, k) = static_cast<float>(params.distractor_intensity);
        }
  }

  // Lesions live inside the organ and stay part of the organ mask.
  const int lesions = params.lesion_count_max > params.lesion_count_min
                          ? std::uniform_int_distribution<int>(params.lesion_count_min, params.lesion_count_max)(rng)
                          : params.lesion_count_min;
  for (int l = 0; l < lesions; ++l) {
    std::array<double, 3> lc{};
    for (int attempt = 0; attempt < 100; ++attempt) {
      for (int a = 0; a < 3; ++a) {
        const auto ua = static_cast<size_t>(a);
        lc[ua] = g.center[ua] + uniform(rng, -0.8, 0.8) * g.radii[ua];
      }
      if (g.inside(lc[0], lc[1], lc[2])) break;
    }
    const double r = uniform(rng, params.lesion_radius_min, params.lesion_radius_max);
    const double contrast = uniform(rng, params.lesion_contrast_min, params.lesion_contrast_max);
    // Lesion radius is in-plane voxels; z is scaled by the spacing ratio.
    const double rz = std::max(1.0, r * params.spacing_mm[0] / params.spacing_mm[2]);
    for (int64_t k = 0; k < shape.nz; ++k)
      for (int64_t j = 0; j < shape.ny; ++j)
        for (int64_t i = 0; i < shape.nx; ++i) {
          if (!out.mask(i, j, k)) continue;
          const double a = (static_cast<double>(i) - lc[0]) / r;
          const double b = (static_cast<double>(j) - lc[1]) / r;
          const double c = (static_cast<double>(k) - lc[2]) / rz;
          if (a * a + b * b + c * c <= 1.0)
            out.volume(i, j, k) = static_cast<float>(params.organ_intensity + contrast);
        }
  }

  if (params.bias_amplitude > 0.0) {
    const double px = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double py = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    for (int64_t k = 0; k < shape.nz; ++k)
      for (int64_t j = 0; j < shape.ny; ++j)
        for (int64_t i = 0; i < shape.nx; ++i) {
          const double fx = std::numbers::pi * static_cast<double>(i) / static_cast<double>(shape.nx);
          const double fy = std::numbers::pi * static_cast<double>(j) / static_cast<double>(shape.ny);
          const double bias = 1.0 + params.bias_amplitude * std::sin(fx + px) * std::cos(fy + py);
          out.volume(i, j, k) = static_cast<float>(out.volume(i, j, k) * bias);
        }
  }

  if (params.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, params.noise_sigma);
    for (float& v : out.volume.voxels()) v = static_cast<float>(v + noise(rng));
  }
  return out;
}

ExtremePointSet simulate_ps(const SegmentationMask& mask, double jitter_vox, uint64_t seed) {
  if (jitter_vox < 0.0) throw InvalidArgument("simulate_ps: jitter must be non-negative");
  ExtremePointSet exact = extract_extreme_points(mask);
  if (jitter_vox == 0.0) return exact;

  std::mt19937_64 rng(splitmix64(seed));
  std::array<Index3, kExtremePointCount> pts = exact.points();
  const Shape3 shape = mask.shape();
  for (int s = 0; s < kExtremePointCount; ++s) {
    const int axis = static_cast<int>(slot_axis(s));
    const int u = axis == 0 ? 1 : 0;
    const int w = axis == 2 ? 1 : 2;
    // Uniform offset inside a disc of radius jitter_vox.
    const double r = jitter_vox * std::sqrt(uniform(rng, 0.0, 1.0));
    const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double tu = static_cast<double>(pts[static_cast<size_t>(s)][u]) + r * std::cos(phi);
    const double tw = static_cast<double>(pts[static_cast<size_t>(s)][w]) + r * std::sin(phi);
    // Re-project onto the nearest in-mask voxel of the extremal slice.
    Index3 best = pts[static_cast<size_t>(s)];
    double best_d = std::numeric_limits<double>::infinity();
    for (int64_t b = 0; b < shape[w]; ++b)
      for (int64_t a = 0; a < shape[u]; ++a) {
        Index3 p = best;
        p[u] = a;
        p[w] = b;
        if (!mask[p]) continue;
        const double d = (static_cast<double>(a) - tu) * (static_cast<double>(a) - tu) +
                         (static_cast<double>(b) - tw) * (static_cast<double>(b) - tw);
        if (d < best_d) {
          best_d = d;
          best = p;
        }
      }
    pts[static_cast<size_t>(s)] = best;
  }
  return ExtremePointSet(pts, exact.spacing_mm(), PointSource::derived_from_mask, exact.study_id());
}

uint64_t study_seed(uint64_t master_seed, std::string_view study_id) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : study_id) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(master_seed ^ splitmix64(h));
}

}  // namespace ugda

#include "ugda/extreme_points.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "ugda/file_audit.hpp"

namespace ugda {

namespace {

constexpr std::array<std::string_view, 3> kAxisNames{"x", "y", "z"};
constexpr std::array<std::string_view, 2> kSideNames{"min", "max"};
constexpr std::array<std::string_view, 3> kSourceNames{"human_click", "derived_from_mask", "predicted"};

// Squared distance scaled by count^2 so centroid comparisons stay in integers.
int64_t scaled_sq_distance(int64_t a, int64_t b, int64_t sum_a, int64_t sum_b, int64_t count) {
  const int64_t da = a * count - sum_a;
  const int64_t db = b * count - sum_b;
  return da * da + db * db;
}

}  // namespace

std::string_view to_string(Axis a) { return kAxisNames[static_cast<size_t>(a)]; }
std::string_view to_string(Side s) { return kSideNames[static_cast<size_t>(s)]; }
std::string_view to_string(PointSource s) { return kSourceNames[static_cast<size_t>(s)]; }

Axis parse_axis(std::string_view s) {
  for (size_t i = 0; i < kAxisNames.size(); ++i)
    if (kAxisNames[i] == s) return static_cast<Axis>(i);
  throw InvalidArgument("unknown axis '" + std::string(s) + "'");
}

Side parse_side(std::string_view s) {
  for (size_t i = 0; i < kSideNames.size(); ++i)
    if (kSideNames[i] == s) return static_cast<Side>(i);
  throw InvalidArgument("unknown side '" + std::string(s) + "'");
}

PointSource parse_point_source(std::string_view s) {
  for (size_t i = 0; i < kSourceNames.size(); ++i)
    if (kSourceNames[i] == s) return static_cast<PointSource>(i);
  throw InvalidArgument("unknown point source '" + std::string(s) + "'");
}

ExtremePointSet::ExtremePointSet(std::array<Index3, kExtremePointCount> points, Spacing3 spacing_mm,
                                 PointSource source, std::string study_id)
    : points_(points), spacing_mm_(spacing_mm), source_(source), study_id_(std::move(study_id)) {
  if (!valid_spacing(spacing_mm_)) throw InvalidArgument("extreme points: spacing must be positive");
  for (const auto& p : points_)
    if (p.i < 0 || p.j < 0 || p.k < 0) throw InvalidArgument("extreme points: negative coordinate");
  for (int axis = 0; axis < 3; ++axis) {
    const auto& lo = points_[static_cast<size_t>(2 * axis)];
    const auto& hi = points_[static_cast<size_t>(2 * axis + 1)];
    if (lo[axis] > hi[axis])
      throw InvalidArgument("extreme points: min-side exceeds max-side along axis " +
                            std::string(to_string(static_cast<Axis>(axis))));
  }
}

ExtremePointSet ExtremePointSet::from_record(const PointRecord& record) {
  std::array<Index3, kExtremePointCount> pts{};
  std::array<bool, kExtremePointCount> seen{};
  for (const auto& p : record.points) {
    const auto slot = static_cast<size_t>(slot_index(p.axis, p.side));
    if (seen[slot]) throw InvalidArgument("extreme points: duplicate slot");
    seen[slot] = true;
    pts[slot] = p.ijk;
  }
  for (bool s : seen)
    if (!s) throw InvalidArgument("extreme points: exactly 6 slots required");
  return ExtremePointSet(pts, record.spacing_mm, record.source, record.study_id);
}

PointRecord ExtremePointSet::to_record() const {
  PointRecord r;
  r.study_id = study_id_;
  r.spacing_mm = spacing_mm_;
  r.source = source_;
  for (int s = 0; s < kExtremePointCount; ++s)
    r.points.push_back({slot_axis(s), slot_side(s), points_[static_cast<size_t>(s)]});
  return r;
}

void ExtremePointSet::require_inside(const Shape3& shape) const {
  for (const auto& p : points_)
    if (!shape.contains(p)) throw InvalidArgument("extreme point outside the grid");
}

ExtremePointSet extract_extreme_points(const SegmentationMask& mask) {
  const Shape3 shape = mask.shape();
  std::array<int64_t, 3> lo{std::numeric_limits<int64_t>::max(), std::numeric_limits<int64_t>::max(),
                            std::numeric_limits<int64_t>::max()};
  std::array<int64_t, 3> hi{-1, -1, -1};
  bool any = false;
  for (int64_t k = 0; k < shape.nz; ++k)
    for (int64_t j = 0; j < shape.ny; ++j)
      for (int64_t i = 0; i < shape.nx; ++i) {
        if (!mask(i, j, k)) continue;
        any = true;
        const Index3 p{i, j, k};
        for (int a = 0; a < 3; ++a) {
          lo[static_cast<size_t>(a)] = std::min(lo[static_cast<size_t>(a)], p[a]);
          hi[static_cast<size_t>(a)] = std::max(hi[static_cast<size_t>(a)], p[a]);
        }
      }
  if (!any) throw EmptyMaskError("extract_extreme_points: mask is empty");

  std::array<Index3, kExtremePointCount> points{};
  for (int axis = 0; axis < 3; ++axis) {
    // The two in-slice axes, in (i, j, k) order.
    const int u = axis == 0 ? 1 : 0;
    const int w = axis == 2 ? 1 : 2;
    for (int side = 0; side < 2; ++side) {
      const int64_t plane = side == 0 ? lo[static_cast<size_t>(axis)] : hi[static_cast<size_t>(axis)];
      std::vector<Index3> slice;
      int64_t sum_u = 0, sum_w = 0;
      for (int64_t b = 0; b < shape[w]; ++b)
        for (int64_t a = 0; a < shape[u]; ++a) {
          Index3 p;
          p[axis] = plane;
          p[u] = a;
          p[w] = b;
          if (!mask[p]) continue;
          slice.push_back(p);
          sum_u += a;
          sum_w += b;
        }
      const auto count = static_cast<int64_t>(slice.size());
      Index3 best = slice.front();
      int64_t best_d = scaled_sq_distance(best[u], best[w], sum_u, sum_w, count);
      for (const auto& p : slice) {
        const int64_t d = scaled_sq_distance(p[u], p[w], sum_u, sum_w, count);
        if (d < best_d || (d == best_d && p < best)) {
          best = p;
          best_d = d;
        }
      }
      points[static_cast<size_t>(2 * axis + side)] = best;
    }
  }
  return ExtremePointSet(points, mask.spacing(), PointSource::derived_from_mask, mask.study_id());
}

std::string points_to_json(const PointRecord& record) {
  nlohmann::ordered_json doc;
  doc["study_id"] = record.study_id;
  doc["spacing_mm"] = {record.spacing_mm[0], record.spacing_mm[1], record.spacing_mm[2]};
  doc["source"] = std::string(to_string(record.source));
  auto sorted = record.points;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ExtremePoint& a, const ExtremePoint& b) {
    return slot_index(a.axis, a.side) < slot_index(b.axis, b.side);
  });
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : sorted) {
    nlohmann::ordered_json e;
    e["axis"] = std::string(to_string(p.axis));
    e["side"] = std::string(to_string(p.side));
    e["ijk"] = {p.ijk.i, p.ijk.j, p.ijk.k};
    arr.push_back(std::move(e));
  }
  doc["points"] = std::move(arr);
  return doc.dump(2) + "\n";
}

std::string points_to_json(const ExtremePointSet& set) { return points_to_json(set.to_record()); }

PointRecord points_from_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(std::string("extreme points JSON: ") + e.what());
  }
  try {
    PointRecord r;
    r.study_id = doc.at("study_id").get<std::string>();
    const auto& sp = doc.at("spacing_mm");
    if (!sp.is_array() || sp.size() != 3) throw InvalidArgument("extreme points JSON: spacing_mm must have 3 entries");
    for (size_t a = 0; a < 3; ++a) r.spacing_mm[a] = sp[a].get<double>();
    if (!valid_spacing(r.spacing_mm)) throw InvalidArgument("extreme points JSON: spacing must be positive");
    r.source = parse_point_source(doc.at("source").get<std::string>());
    const auto& pts = doc.at("points");
    if (!pts.is_array()) throw InvalidArgument("extreme points JSON: points must be an array");
    for (const auto& e : pts) {
      ExtremePoint p;
      p.axis = parse_axis(e.at("axis").get<std::string>());
      p.side = parse_side(e.at("side").get<std::string>());
      const auto& ijk = e.at("ijk");
      if (!ijk.is_array() || ijk.size() != 3) throw InvalidArgument("extreme points JSON: ijk must have 3 entries");
      for (const auto& c : ijk)
        if (!c.is_number_integer()) throw InvalidArgument("extreme points JSON: ijk must be integers");
      p.ijk = {ijk[0].get<int64_t>(), ijk[1].get<int64_t>(), ijk[2].get<int64_t>()};
      r.points.push_back(p);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("extreme points JSON: ") + e.what());
  }
}

ExtremePointSet read_extreme_points(const std::string& path) {
  io::record_open(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ExtremePointSet::from_record(points_from_json(ss.str()));
}

void write_extreme_points(const std::string& path, const ExtremePointSet& set) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << points_to_json(set);
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace ugda

#include "ugda/measures.hpp"

#include <cmath>
#include <deque>

namespace ugda {

double dice_score(const SegmentationMask& a, const SegmentationMask& b) {
  require_same_shape(a, b, "dice_score");
  int64_t na = 0, nb = 0, both = 0;
  const auto va = a.voxels();
  const auto vb = b.voxels();
  for (size_t n = 0; n < va.size(); ++n) {
    const bool x = va[n] != 0;
    const bool y = vb[n] != 0;
    na += x;
    nb += y;
    both += (x && y);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

SegmentationMask binarize(const ProbabilityMap& p, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("binarize: threshold must lie in (0, 1)");
  SegmentationMask m(p.shape(), p.spacing(), p.study_id());
  const auto src = p.voxels();
  auto dst = m.voxels();
  for (size_t n = 0; n < src.size(); ++n) dst[n] = static_cast<double>(src[n]) >= threshold ? 1 : 0;
  return m;
}

SegmentationMask largest_component(const SegmentationMask& m) {
  const Shape3 shape = m.shape();
  std::vector<int32_t> label(m.size(), 0);
  int32_t best_label = 0;
  int64_t best_size = 0;
  int32_t next = 0;
  std::deque<Index3> queue;
  for (int64_t off = 0; off < static_cast<int64_t>(m.size()); ++off) {
    if (!m.voxels()[static_cast<size_t>(off)] || label[static_cast<size_t>(off)]) continue;
    ++next;
    int64_t size = 0;
    label[static_cast<size_t>(off)] = next;
    queue.push_back(m.index_of(off));
    while (!queue.empty()) {
      const Index3 p = queue.front();
      queue.pop_front();
      ++size;
      for (int axis = 0; axis < 3; ++axis)
        for (int d : {-1, 1}) {
          Index3 q = p;
          q[axis] += d;
          if (!shape.contains(q)) continue;
          const auto qo = static_cast<size_t>(m.offset(q));
          if (m.voxels()[qo] && !label[qo]) {
            label[qo] = next;
            queue.push_back(q);
          }
        }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
  }
  SegmentationMask out(shape, m.spacing(), m.study_id());
  auto dst = out.voxels();
  for (size_t n = 0; n < label.size(); ++n) dst[n] = (best_label != 0 && label[n] == best_label) ? 1 : 0;
  return out;
}

double distance_mm(const Index3& a, const Index3& b, const Spacing3& spacing) {
  double sum = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    const double d = static_cast<double>(a[axis] - b[axis]) * spacing[static_cast<size_t>(axis)];
    sum += d * d;
  }
  return std::sqrt(sum);
}

std::optional<double> mxa(const SegmentationMask& pred, const ExtremePointSet& truth) {
  for (size_t a = 0; a < 3; ++a)
    if (std::abs(pred.spacing()[a] - truth.spacing_mm()[a]) > 1e-6 * truth.spacing_mm()[a])
      throw InvalidArgument("mxa: prediction and points differ in spacing");
  truth.require_inside(pred.shape());
  if (foreground_count(pred) == 0) return std::nullopt;
  const ExtremePointSet predicted = extract_extreme_points(pred);
  double total = 0.0;
  for (int s = 0; s < kExtremePointCount; ++s) total += distance_mm(predicted.slot(s), truth.slot(s), pred.spacing());
  return total / kExtremePointCount;
}

}  // namespace ugda

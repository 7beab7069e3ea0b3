#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ugda/errors.hpp"

namespace ugda {

struct Index3 {
  int64_t i = 0;
  int64_t j = 0;
  int64_t k = 0;

  auto operator<=>(const Index3&) const = default;

  int64_t operator[](int axis) const { return axis == 0 ? i : (axis == 1 ? j : k); }
  int64_t& operator[](int axis) { return axis == 0 ? i : (axis == 1 ? j : k); }
};

struct Shape3 {
  int64_t nx = 0;
  int64_t ny = 0;
  int64_t nz = 0;

  auto operator<=>(const Shape3&) const = default;

  int64_t operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  int64_t voxel_count() const { return nx * ny * nz; }
  bool contains(const Index3& p) const {
    return p.i >= 0 && p.j >= 0 && p.k >= 0 && p.i < nx && p.j < ny && p.k < nz;
  }
  bool valid() const { return nx > 0 && ny > 0 && nz > 0; }
};

/// Per-axis voxel size in millimetres.
using Spacing3 = std::array<double, 3>;

inline bool valid_spacing(const Spacing3& s) { return s[0] > 0.0 && s[1] > 0.0 && s[2] > 0.0; }

/// Dense 3D grid stored x-fastest (NIfTI order): offset = i + nx * (j + ny * k).
/// The tag parameter keeps intensities, masks and probabilities apart at the
/// type level even when they share a voxel type.
template <typename T, typename Tag>
class Grid3 {
 public:
  using value_type = T;

  Grid3() = default;

  Grid3(Shape3 shape, Spacing3 spacing, std::string study_id = {}, T fill = T{})
      : shape_(shape), spacing_(spacing), study_id_(std::move(study_id)) {
    if (!shape_.valid()) throw InvalidArgument("grid shape must be positive");
    if (!valid_spacing(spacing_)) throw InvalidArgument("grid spacing must be positive");
    voxels_.assign(static_cast<size_t>(shape_.voxel_count()), fill);
  }

  const Shape3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  const std::string& study_id() const { return study_id_; }
  void set_study_id(std::string id) { study_id_ = std::move(id); }
  void set_spacing(const Spacing3& s) {
    if (!valid_spacing(s)) throw InvalidArgument("grid spacing must be positive");
    spacing_ = s;
  }

  size_t size() const { return voxels_.size(); }
  bool empty() const { return voxels_.empty(); }

  int64_t offset(int64_t i, int64_t j, int64_t k) const { return i + shape_.nx * (j + shape_.ny * k); }
  int64_t offset(const Index3& p) const { return offset(p.i, p.j, p.k); }
  Index3 index_of(int64_t off) const {
    Index3 p;
    p.i = off % shape_.nx;
    off /= shape_.nx;
    p.j = off % shape_.ny;
    p.k = off / shape_.ny;
    return p;
  }

  T& operator()(int64_t i, int64_t j, int64_t k) { return voxels_[static_cast<size_t>(offset(i, j, k))]; }
  const T& operator()(int64_t i, int64_t j, int64_t k) const {
    return voxels_[static_cast<size_t>(offset(i, j, k))];
  }
  T& operator[](const Index3& p) { return (*this)(p.i, p.j, p.k); }
  const T& operator[](const Index3& p) const { return (*this)(p.i, p.j, p.k); }

  std::span<T> voxels() { return voxels_; }
  std::span<const T> voxels() const { return voxels_; }

  bool operator==(const Grid3& other) const = default;

 private:
  Shape3 shape_{};
  Spacing3 spacing_{1.0, 1.0, 1.0};
  std::string study_id_;
  std::vector<T> voxels_;
};

struct VolumeTag {};
struct MaskTag {};
struct ProbabilityTag {};

/// Scalar intensity image.
using Volume = Grid3<float, VolumeTag>;
/// Binary foreground mask, values in {0, 1}.
using SegmentationMask = Grid3<uint8_t, MaskTag>;
/// Soft prediction, values in [0, 1].
using ProbabilityMap = Grid3<float, ProbabilityTag>;

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (a.shape() != b.shape()) throw InvalidArgument(std::string(what) + ": shape mismatch");
}

inline int64_t foreground_count(const SegmentationMask& m) {
  int64_t n = 0;
  for (uint8_t v : m.voxels()) n += (v != 0);
  return n;
}

}  // namespace ugda

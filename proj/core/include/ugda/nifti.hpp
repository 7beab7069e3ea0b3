#pragma once

#include <string>

#include "ugda/grid.hpp"

namespace ugda {

/// NIfTI-1 single-file (.nii / .nii.gz) I/O. Spacing is read from the sform
/// diagonal when present, pixdim otherwise. The study id travels in the
/// header's descrip field. Any common scalar datatype is accepted on read;
/// volumes are written as float32 and masks as uint8.
Volume read_volume(const std::string& path);
SegmentationMask read_mask(const std::string& path);
void write_volume(const std::string& path, const Volume& v);
void write_mask(const std::string& path, const SegmentationMask& m);

}  // namespace ugda

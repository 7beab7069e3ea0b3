#include "ugda/nifti.hpp"

#include <cmath>
#include <cstring>
#include <type_traits>

#include <zlib.h>

#include "ugda/file_audit.hpp"

namespace ugda {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax;
  int32_t glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

enum NiftiType : int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
  kUint32 = 768,
};

class GzFile {
 public:
  GzFile(const std::string& path, const char* mode) : handle_(gzopen(path.c_str(), mode)), path_(path) {
    if (!handle_) throw IoError("cannot open " + path);
  }
  ~GzFile() {
    if (handle_) gzclose(handle_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  void read(void* dst, size_t n) {
    auto* p = static_cast<char*>(dst);
    while (n > 0) {
      const auto chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
      const int got = gzread(handle_, p, chunk);
      if (got <= 0) throw IoError("truncated NIfTI file " + path_);
      p += got;
      n -= static_cast<size_t>(got);
    }
  }
  void write(const void* src, size_t n) {
    const auto* p = static_cast<const char*>(src);
    while (n > 0) {
      const auto chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
      const int put = gzwrite(handle_, p, chunk);
      if (put <= 0) throw IoError("write failed for " + path_);
      p += put;
      n -= static_cast<size_t>(put);
    }
  }
  void close() {
    if (handle_ && gzclose(handle_) != Z_OK) {
      handle_ = nullptr;
      throw IoError("close failed for " + path_);
    }
    handle_ = nullptr;
  }

 private:
  gzFile handle_;
  std::string path_;
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct Decoded {
  Shape3 shape;
  Spacing3 spacing;
  std::string study_id;
  std::vector<double> values;
};

template <typename T>
void decode_into(const std::vector<char>& raw, std::vector<double>& out, double slope, double inter) {
  const size_t n = raw.size() / sizeof(T);
  out.resize(n);
  for (size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<double>(v) * slope + inter;
  }
}

Decoded read_any(const std::string& path) {
  io::record_open(path);
  GzFile f(path, "rb");
  Nifti1Header h{};
  f.read(&h, sizeof(h));
  if (h.sizeof_hdr != 348) throw IoError(path + ": not a little-endian NIfTI-1 file");
  if (std::memcmp(h.magic, "n+1\0", 4) != 0) throw IoError(path + ": only single-file NIfTI-1 (n+1) is supported");
  if (h.dim[0] < 3 || h.dim[0] > 7) throw IoError(path + ": expected a 3D image");
  for (int d = 4; d <= h.dim[0]; ++d)
    if (h.dim[d] > 1) throw IoError(path + ": only single-frame 3D images are supported");

  Decoded out;
  out.shape = {h.dim[1], h.dim[2], h.dim[3]};
  if (!out.shape.valid()) throw IoError(path + ": non-positive dimensions");
  if (h.sform_code > 0) {
    out.spacing = {std::abs(static_cast<double>(h.srow_x[0])), std::abs(static_cast<double>(h.srow_y[1])),
                   std::abs(static_cast<double>(h.srow_z[2]))};
  } else {
    out.spacing = {std::abs(static_cast<double>(h.pixdim[1])), std::abs(static_cast<double>(h.pixdim[2])),
                   std::abs(static_cast<double>(h.pixdim[3]))};
  }
  if (!valid_spacing(out.spacing)) out.spacing = {1.0, 1.0, 1.0};
  out.study_id = std::string(h.descrip, strnlen(h.descrip, sizeof(h.descrip)));

  const auto skip = static_cast<size_t>(h.vox_offset) - sizeof(h);
  if (h.vox_offset < 348.0f) throw IoError(path + ": bad vox_offset");
  std::vector<char> pad(skip);
  if (skip) f.read(pad.data(), skip);

  const auto count = static_cast<size_t>(out.shape.voxel_count());
  const size_t bytes_per = static_cast<size_t>(h.bitpix) / 8;
  std::vector<char> raw(count * bytes_per);
  f.read(raw.data(), raw.size());
  const double slope = (h.scl_slope == 0.0f || !std::isfinite(h.scl_slope)) ? 1.0 : h.scl_slope;
  const double inter = std::isfinite(h.scl_inter) && h.scl_slope != 0.0f ? h.scl_inter : 0.0;
  switch (h.datatype) {
    case kUint8: decode_into<uint8_t>(raw, out.values, slope, inter); break;
    case kInt8: decode_into<int8_t>(raw, out.values, slope, inter); break;
    case kInt16: decode_into<int16_t>(raw, out.values, slope, inter); break;
    case kUint16: decode_into<uint16_t>(raw, out.values, slope, inter); break;
    case kInt32: decode_into<int32_t>(raw, out.values, slope, inter); break;
    case kUint32: decode_into<uint32_t>(raw, out.values, slope, inter); break;
    case kFloat32: decode_into<float>(raw, out.values, slope, inter); break;
    case kFloat64: decode_into<double>(raw, out.values, slope, inter); break;
    default: throw IoError(path + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  return out;
}

template <typename T>
void write_any(const std::string& path, const Shape3& shape, const Spacing3& spacing, const std::string& study_id,
               std::span<const T> voxels, int16_t datatype) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<int16_t>(shape.nx);
  h.dim[2] = static_cast<int16_t>(shape.ny);
  h.dim[3] = static_cast<int16_t>(shape.nz);
  for (int d = 4; d < 8; ++d) h.dim[d] = 1;
  h.datatype = datatype;
  h.bitpix = static_cast<int16_t>(sizeof(T) * 8);
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(spacing[static_cast<size_t>(a)]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // millimetres
  std::strncpy(h.descrip, study_id.c_str(), sizeof(h.descrip) - 1);
  h.sform_code = 1;
  h.srow_x[0] = static_cast<float>(spacing[0]);
  h.srow_y[1] = static_cast<float>(spacing[1]);
  h.srow_z[2] = static_cast<float>(spacing[2]);
  std::memcpy(h.magic, "n+1\0", 4);

  const char* mode = ends_with(path, ".gz") ? "wb6" : "wbT";
  GzFile f(path, mode);
  f.write(&h, sizeof(h));
  const char extension[4] = {0, 0, 0, 0};
  f.write(extension, sizeof(extension));
  f.write(voxels.data(), voxels.size_bytes());
  f.close();
}

void check_dims(const Shape3& s, const std::string& path) {
  if (s.nx > 32767 || s.ny > 32767 || s.nz > 32767) throw IoError(path + ": dimension exceeds NIfTI-1 limit");
}

}  // namespace

Volume read_volume(const std::string& path) {
  Decoded d = read_any(path);
  Volume v(d.shape, d.spacing, d.study_id);
  auto dst = v.voxels();
  for (size_t n = 0; n < d.values.size(); ++n) dst[n] = static_cast<float>(d.values[n]);
  return v;
}

SegmentationMask read_mask(const std::string& path) {
  Decoded d = read_any(path);
  SegmentationMask m(d.shape, d.spacing, d.study_id);
  auto dst = m.voxels();
  for (size_t n = 0; n < d.values.size(); ++n) dst[n] = d.values[n] > 0.5 ? 1 : 0;
  return m;
}

void write_volume(const std::string& path, const Volume& v) {
  check_dims(v.shape(), path);
  write_any<float>(path, v.shape(), v.spacing(), v.study_id(), v.voxels(), kFloat32);
}

void write_mask(const std::string& path, const SegmentationMask& m) {
  check_dims(m.shape(), path);
  write_any<uint8_t>(path, m.shape(), m.spacing(), m.study_id(), m.voxels(), kUint8);
}

}  // namespace ugda

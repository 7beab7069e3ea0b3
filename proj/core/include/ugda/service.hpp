#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ugda/corpus.hpp"
#include "ugda/extreme_points.hpp"
#include "ugda/grid.hpp"
#include "ugda/trainer.hpp"

namespace ugda {

struct ServiceOptions {
  std::string data_dir;
  /// Empty means no model: inference answers 503.
  std::string checkpoint;
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Used for slices when no checkpoint supplies its own window.
  double window_low = 0.0;
  double window_high = 1.0;
};

enum class AnnotationStatus { none, in_progress, complete };
std::string_view to_string(AnnotationStatus s);

struct AnnotationMeta {
  std::string study_id;
  std::string annotator;
  std::string created;
  std::string updated;
  AnnotationStatus status = AnnotationStatus::none;
};

struct AnnotationRecord {
  AnnotationMeta meta;
  PointRecord points;
};

/// Run-length encoding of a mask flattened with x fastest and z slowest.
/// Runs alternate starting with background; the first run may be 0.
std::vector<int64_t> rle_encode(const SegmentationMask& mask);
SegmentationMask rle_decode(const std::vector<int64_t>& runs, const Shape3& shape, const Spacing3& spacing = {1, 1, 1});

/// 8-bit grayscale PNG, rows top to bottom.
std::string encode_png_gray(const std::vector<uint8_t>& pixels, int width, int height);
/// 8-bit RGB PNG.
std::string encode_png_rgb(const std::vector<uint8_t>& pixels, int width, int height);

struct SliceImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // row-major
};

/// Windowed slice scaled to [0, 255] with round-half-up. Axis z gives an
/// (x, y) image, y gives (x, z), x gives (y, z); the first named axis runs
/// along image columns.
SliceImage extract_slice(const Volume& v, Axis axis, int64_t index, double window_low, double window_high);

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

/// Request handlers of the annotation REST API, independent of the HTTP
/// transport.
class AnnotationService {
 public:
  explicit AnnotationService(ServiceOptions options);

  Response healthz() const;
  Response list_studies();
  Response get_slice(const std::string& study_id, const std::string& axis, const std::string& index,
                     const std::string& format, bool overlay);
  Response put_extreme_points(const std::string& study_id, const std::string& body, const std::string& annotator);
  Response get_extreme_points(const std::string& study_id);
  Response infer(const std::string& study_id);

  /// Stored record, if any.
  std::optional<AnnotationRecord> record(const std::string& study_id) const;
  std::string annotation_path(const std::string& study_id) const;
  bool model_loaded() const { return model_.has_value(); }

 private:
  struct Study {
    std::string study_id;
    std::string volume_path;
  };
  const Study* find(const std::string& id) const;
  const Volume& volume(const Study& s);
  std::mutex& study_mutex(const std::string& id);

  ServiceOptions options_;
  CorpusManifest manifest_;
  std::vector<Study> studies_;
  std::optional<LoadedModel> model_;
  std::string load_error_;

  std::mutex cache_mutex_;
  std::map<std::string, std::shared_ptr<const Volume>> volumes_;
  std::map<std::string, SegmentationMask> last_masks_;
  std::mutex locks_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> study_locks_;
  std::mutex model_mutex_;
};

/// HTTP front end. `port` 0 binds an ephemeral port.
class ServiceServer {
 public:
  ServiceServer(AnnotationService& service, std::string host, int port);
  ~ServiceServer();
  ServiceServer(const ServiceServer&) = delete;
  ServiceServer& operator=(const ServiceServer&) = delete;

  int port() const { return port_; }
  /// Serves in a background thread until stop() or destruction.
  void start();
  /// Serves on the calling thread.
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

/// Blocking entry point of `ugda serve`.
int serve(const ServiceOptions& options);

}  // namespace ugda

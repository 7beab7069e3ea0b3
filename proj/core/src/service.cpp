#include "ugda/service.hpp"

#include <png.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "ugda/errors.hpp"
#include "ugda/intensity.hpp"
#include "ugda/measures.hpp"
#include "ugda/nifti.hpp"

namespace ugda {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

Response json_response(int status, const ordered_json& body) { return {status, "application/json", body.dump(2) + "\n", {}}; }

Response error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}, {"status", status}});
}

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string trace_id() {
  static std::mutex m;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(m);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return buf;
}

std::optional<std::string> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void atomic_write(const fs::path& p, const std::string& bytes) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << bytes;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

AnnotationStatus status_of(const PointRecord& r) {
  if (r.points.empty()) return AnnotationStatus::none;
  return r.points.size() == static_cast<size_t>(kExtremePointCount) ? AnnotationStatus::complete
                                                                     : AnnotationStatus::in_progress;
}

ordered_json meta_json(const AnnotationMeta& m) {
  return {{"study_id", m.study_id},
          {"annotator", m.annotator},
          {"created", m.created},
          {"updated", m.updated},
          {"status", std::string(to_string(m.status))}};
}

ordered_json record_json(const AnnotationRecord& r) {
  ordered_json j = meta_json(r.meta);
  j["points"] = ordered_json::parse(points_to_json(r.points));
  return j;
}

void png_write_to_string(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

std::string encode_png(const std::vector<uint8_t>& pixels, int width, int height, int color_type, int channels) {
  if (width <= 0 || height <= 0 || pixels.size() != static_cast<size_t>(width) * height * channels)
    throw InvalidArgument("encode_png: pixel buffer does not match the image size");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_write_to_string, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int row = 0; row < height; ++row)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<size_t>(row) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

// In-plane (column, row) to a voxel index for a slice.
Index3 slice_voxel(Axis axis, int64_t index, int64_t col, int64_t row) {
  switch (axis) {
    case Axis::x: return {index, col, row};
    case Axis::y: return {col, index, row};
    case Axis::z: return {col, row, index};
  }
  return {};
}

}  // namespace

std::string_view to_string(AnnotationStatus s) {
  switch (s) {
    case AnnotationStatus::none: return "none";
    case AnnotationStatus::in_progress: return "in_progress";
    case AnnotationStatus::complete: return "complete";
  }
  return "?";
}

std::vector<int64_t> rle_encode(const SegmentationMask& mask) {
  std::vector<int64_t> runs;
  uint8_t current = 0;
  int64_t length = 0;
  for (uint8_t v : mask.voxels()) {
    const uint8_t b = v ? 1 : 0;
    if (b != current) {
      runs.push_back(length);
      current = b;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

SegmentationMask rle_decode(const std::vector<int64_t>& runs, const Shape3& shape, const Spacing3& spacing) {
  SegmentationMask m(shape, spacing);
  auto vox = m.voxels();
  int64_t pos = 0;
  uint8_t value = 0;
  for (int64_t r : runs) {
    if (r < 0 || pos + r > static_cast<int64_t>(vox.size())) throw InvalidArgument("rle_decode: runs exceed the grid");
    std::fill_n(vox.begin() + pos, r, value);
    pos += r;
    value ^= 1;
  }
  if (pos != static_cast<int64_t>(vox.size())) throw InvalidArgument("rle_decode: runs do not cover the grid");
  return m;
}

std::string encode_png_gray(const std::vector<uint8_t>& pixels, int width, int height) {
  return encode_png(pixels, width, height, PNG_COLOR_TYPE_GRAY, 1);
}

std::string encode_png_rgb(const std::vector<uint8_t>& pixels, int width, int height) {
  return encode_png(pixels, width, height, PNG_COLOR_TYPE_RGB, 3);
}

SliceImage extract_slice(const Volume& v, Axis axis, int64_t index, double window_low, double window_high) {
  const Shape3& s = v.shape();
  const int64_t extent = axis == Axis::x ? s.nx : axis == Axis::y ? s.ny : s.nz;
  if (index < 0 || index >= extent) throw InvalidArgument("slice index out of range");
  SliceImage img;
  img.width = static_cast<int>(axis == Axis::x ? s.ny : s.nx);
  img.height = static_cast<int>(axis == Axis::z ? s.ny : s.nz);
  img.pixels.resize(static_cast<size_t>(img.width) * img.height);
  const double range = window_high - window_low;
  if (!(range > 0.0)) throw InvalidArgument("window must have positive width");
  for (int row = 0; row < img.height; ++row) {
    for (int col = 0; col < img.width; ++col) {
      const double n = std::clamp((static_cast<double>(v[slice_voxel(axis, index, col, row)]) - window_low) / range, 0.0, 1.0);
      img.pixels[static_cast<size_t>(row) * img.width + col] = static_cast<uint8_t>(std::floor(n * 255.0 + 0.5));
    }
  }
  return img;
}

AnnotationService::AnnotationService(ServiceOptions options) : options_(std::move(options)) {
  try {
    manifest_ = load_manifest((fs::path(options_.data_dir) / "manifest.json").string());
    for (const auto& s : manifest_.target_ps_studies) studies_.push_back({s.study_id, manifest_.resolve(s.volume)});
    for (const auto& s : manifest_.target_unlabelled_studies)
      studies_.push_back({s.study_id, manifest_.resolve(s.volume)});
    for (const auto& s : manifest_.evaluation_studies) studies_.push_back({s.study_id, manifest_.resolve(s.volume)});
    std::sort(studies_.begin(), studies_.end(), [](const Study& a, const Study& b) { return a.study_id < b.study_id; });
  } catch (const std::exception& e) {
    load_error_ = e.what();
  }
  if (!options_.checkpoint.empty()) {
    model_ = load_model(options_.checkpoint);
    options_.window_low = model_->config.window_low;
    options_.window_high = model_->config.window_high;
  }
}

const AnnotationService::Study* AnnotationService::find(const std::string& id) const {
  for (const auto& s : studies_)
    if (s.study_id == id) return &s;
  return nullptr;
}

const Volume& AnnotationService::volume(const Study& s) {
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = volumes_.find(s.study_id); it != volumes_.end()) return *it->second;
  }
  auto v = std::make_shared<const Volume>(read_volume(s.volume_path));
  std::lock_guard lock(cache_mutex_);
  return *volumes_.emplace(s.study_id, std::move(v)).first->second;
}

std::mutex& AnnotationService::study_mutex(const std::string& id) {
  std::lock_guard lock(locks_mutex_);
  auto& m = study_locks_[id];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

std::string AnnotationService::annotation_path(const std::string& study_id) const {
  return (fs::path(options_.data_dir) / "annotations" / (study_id + ".json")).string();
}

std::optional<AnnotationRecord> AnnotationService::record(const std::string& study_id) const {
  const auto ps = read_file(annotation_path(study_id));
  if (!ps) return std::nullopt;
  AnnotationRecord r;
  r.points = points_from_json(*ps);
  r.meta.study_id = study_id;
  r.meta.status = status_of(r.points);
  const auto meta = read_file((fs::path(options_.data_dir) / "annotations" / (study_id + ".meta.json")).string());
  if (meta) {
    const auto j = nlohmann::json::parse(*meta);
    r.meta.annotator = j.value("annotator", "");
    r.meta.created = j.value("created", "");
    r.meta.updated = j.value("updated", "");
  }
  return r;
}

Response AnnotationService::healthz() const {
  ordered_json j{{"status", load_error_.empty() ? "ok" : "degraded"},
                 {"model_loaded", model_.has_value()},
                 {"studies", studies_.size()}};
  if (model_) j["variant"] = std::string(to_string(model_->config.variant));
  if (!load_error_.empty()) j["error"] = load_error_;
  return json_response(200, j);
}

Response AnnotationService::list_studies() {
  if (!load_error_.empty()) return error_response(500, "data directory unreadable: " + load_error_);
  try {
    ordered_json list = ordered_json::array();
    for (const auto& s : studies_) {
      const Volume& v = volume(s);
      const auto rec = record(s.study_id);
      list.push_back({{"study_id", s.study_id},
                      {"shape", {v.shape().nx, v.shape().ny, v.shape().nz}},
                      {"spacing_mm", {v.spacing()[0], v.spacing()[1], v.spacing()[2]}},
                      {"annotation_status", std::string(to_string(rec ? rec->meta.status : AnnotationStatus::none))}});
    }
    return json_response(200, list);
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

Response AnnotationService::get_slice(const std::string& study_id, const std::string& axis_name,
                                      const std::string& index_text, const std::string& format, bool overlay) {
  const Study* s = find(study_id);
  if (!s) return error_response(404, "unknown study " + study_id);
  Axis axis;
  try {
    axis = parse_axis(axis_name);
  } catch (const std::exception&) {
    return error_response(404, "axis must be x, y or z");
  }
  int64_t index = 0;
  try {
    size_t used = 0;
    index = std::stoll(index_text, &used);
    if (used != index_text.size()) throw InvalidArgument("trailing characters");
  } catch (const std::exception&) {
    return error_response(404, "slice index must be an integer");
  }
  if (!format.empty() && format != "png" && format != "raw") return error_response(400, "format must be png or raw");
  try {
    const Volume& v = volume(*s);
    const int64_t extent = axis == Axis::x ? v.shape().nx : axis == Axis::y ? v.shape().ny : v.shape().nz;
    if (index < 0 || index >= extent) return error_response(404, "slice index out of range");
    const SliceImage img = extract_slice(v, axis, index, options_.window_low, options_.window_high);
    Response r;
    r.headers["X-Width"] = std::to_string(img.width);
    r.headers["X-Height"] = std::to_string(img.height);
    if (format == "raw") {
      r.content_type = "application/octet-stream";
      r.body.assign(img.pixels.begin(), img.pixels.end());
      return r;
    }
    std::optional<SegmentationMask> mask;
    if (overlay) {
      std::lock_guard lock(cache_mutex_);
      if (auto it = last_masks_.find(study_id); it != last_masks_.end()) mask = it->second;
    }
    r.content_type = "image/png";
    if (!mask) {
      r.body = encode_png_gray(img.pixels, img.width, img.height);
      return r;
    }
    std::vector<uint8_t> rgb(img.pixels.size() * 3);
    const auto inside = [&](int64_t col, int64_t row) {
      return col >= 0 && row >= 0 && col < img.width && row < img.height &&
             (*mask)[slice_voxel(axis, index, col, row)] != 0;
    };
    for (int row = 0; row < img.height; ++row) {
      for (int col = 0; col < img.width; ++col) {
        const size_t p = static_cast<size_t>(row) * img.width + col;
        const bool contour = inside(col, row) && (!inside(col - 1, row) || !inside(col + 1, row) ||
                                                  !inside(col, row - 1) || !inside(col, row + 1));
        rgb[3 * p] = contour ? 255 : img.pixels[p];
        rgb[3 * p + 1] = contour ? 40 : img.pixels[p];
        rgb[3 * p + 2] = contour ? 40 : img.pixels[p];
      }
    }
    r.body = encode_png_rgb(rgb, img.width, img.height);
    return r;
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

Response AnnotationService::put_extreme_points(const std::string& study_id, const std::string& body,
                                               const std::string& annotator) {
  const Study* s = find(study_id);
  if (!s) return error_response(404, "unknown study " + study_id);
  PointRecord rec;
  try {
    rec = points_from_json(body);
  } catch (const std::exception& e) {
    return error_response(422, e.what());
  }
  if (!rec.study_id.empty() && rec.study_id != study_id)
    return error_response(422, "body study_id '" + rec.study_id + "' does not match the URL");
  rec.study_id = study_id;
  rec.source = PointSource::human_click;
  if (rec.points.empty() || rec.points.size() > static_cast<size_t>(kExtremePointCount))
    return error_response(422, "between 1 and 6 points are required");
  try {
    const Volume& v = volume(*s);
    std::array<bool, kExtremePointCount> used{};
    for (const auto& p : rec.points) {
      const int slot = slot_index(p.axis, p.side);
      if (used[static_cast<size_t>(slot)])
        return error_response(422, "duplicate point for (" + std::string(to_string(p.axis)) + ", " +
                                       std::string(to_string(p.side)) + ")");
      used[static_cast<size_t>(slot)] = true;
      if (!v.shape().contains(p.ijk)) return error_response(422, "point outside the volume");
    }
    for (int a = 0; a < 3; ++a)
      if (std::abs(rec.spacing_mm[a] - v.spacing()[a]) > 1e-6 * v.spacing()[a])
        return error_response(422, "spacing_mm does not match the study");
    if (status_of(rec) == AnnotationStatus::complete) ExtremePointSet::from_record(rec);
  } catch (const InvalidArgument& e) {
    return error_response(422, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }

  try {
    std::lock_guard lock(study_mutex(study_id));
    const std::string bytes = points_to_json(rec);
    const fs::path ps_path = annotation_path(study_id);
    const fs::path meta_path = fs::path(options_.data_dir) / "annotations" / (study_id + ".meta.json");
    auto existing = record(study_id);
    const auto old_bytes = read_file(ps_path);
    if (existing && old_bytes && *old_bytes == bytes && existing->meta.annotator == annotator)
      return json_response(200, record_json(*existing));
    AnnotationRecord out;
    out.points = rec;
    out.meta.study_id = study_id;
    out.meta.annotator = annotator;
    out.meta.status = status_of(rec);
    out.meta.updated = now_iso8601();
    out.meta.created = existing && !existing->meta.created.empty() ? existing->meta.created : out.meta.updated;
    atomic_write(ps_path, bytes);
    atomic_write(meta_path, meta_json(out.meta).dump(2) + "\n");
    return json_response(200, record_json(out));
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

Response AnnotationService::get_extreme_points(const std::string& study_id) {
  if (!find(study_id)) return error_response(404, "unknown study " + study_id);
  const auto bytes = read_file(annotation_path(study_id));
  if (!bytes) return error_response(404, "no annotation for " + study_id);
  return {200, "application/json", *bytes, {}};
}

Response AnnotationService::infer(const std::string& study_id) {
  const Study* s = find(study_id);
  if (!s) return error_response(404, "unknown study " + study_id);
  if (!model_) return error_response(503, "no checkpoint loaded");
  const std::string trace = trace_id();
  try {
    const auto rec = record(study_id);
    if (rec && rec->meta.status == AnnotationStatus::in_progress)
      return error_response(409, "annotation incomplete: place all 6 extreme points or none");
    std::optional<ExtremePointSet> points;
    if (rec && rec->meta.status == AnnotationStatus::complete) points = ExtremePointSet::from_record(rec->points);
    const Volume& v = volume(*s);
    HeatmapFeed feed = points ? HeatmapFeed::truth : HeatmapFeed::predicted;
    if (model_->config.variant == Variant::ada_mask_no_ps) feed = HeatmapFeed::zeros;
    if (!points && model_->config.variant == Variant::dextr)
      return error_response(409, "this model needs complete extreme points");
    SegmentationMask mask;
    {
      std::lock_guard lock(model_mutex_);
      mask = predict_mask(model_->models, model_->config, v, points, feed, Upsample::mask_nearest);
    }
    std::optional<double> d;
    if (points) d = mxa(mask, *points);
    {
      std::lock_guard lock(cache_mutex_);
      last_masks_.insert_or_assign(study_id, mask);
    }
    const std::string source = feed == HeatmapFeed::truth ? "human_ps" : feed == HeatmapFeed::predicted ? "predicted" : "none";
    ordered_json j{{"study_id", study_id},
                   {"shape", {mask.shape().nx, mask.shape().ny, mask.shape().nz}},
                   {"spacing_mm", {mask.spacing()[0], mask.spacing()[1], mask.spacing()[2]}},
                   {"heatmap_source", source},
                   {"mask", {{"encoding", "rle"}, {"order", "x-fastest, z-slowest"}, {"first_value", 0},
                             {"runs", rle_encode(mask)}}},
                   {"foreground_voxels", foreground_count(mask)},
                   {"mxa_mm", d ? ordered_json(*d) : ordered_json(nullptr)},
                   {"variant", std::string(to_string(model_->config.variant))}};
    return json_response(200, j);
  } catch (const std::exception& e) {
    std::cerr << "infer " << study_id << " [trace " << trace << "]: " << e.what() << "\n";
    ordered_json j{{"error", e.what()}, {"status", 500}, {"trace_id", trace}};
    return json_response(500, j);
  }
}

struct ServiceServer::Impl {
  httplib::Server server;
  std::thread thread;
};

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  for (const auto& [k, v] : r.headers) res.set_header(k, v);
  res.set_content(r.body, r.content_type);
}

}  // namespace

ServiceServer::ServiceServer(AnnotationService& service, std::string host, int port) : impl_(std::make_unique<Impl>()) {
  auto& svr = impl_->server;
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, PUT, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type, X-Annotator"},
                           {"Access-Control-Expose-Headers", "X-Width, X-Height"}});
  svr.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  svr.Get("/healthz", [&service](const httplib::Request&, httplib::Response& res) { reply(res, service.healthz()); });
  svr.Get("/studies", [&service](const httplib::Request&, httplib::Response& res) { reply(res, service.list_studies()); });
  svr.Get(R"(/studies/([^/]+)/slices/([^/]+)/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    const std::string overlay = req.get_param_value("overlay");
    reply(res, service.get_slice(req.matches[1], req.matches[2], req.matches[3], req.get_param_value("format"),
                                 overlay == "1" || overlay == "true"));
  });
  svr.Put(R"(/studies/([^/]+)/extreme-points)", [&service](const httplib::Request& req, httplib::Response& res) {
    std::string annotator = req.get_header_value("X-Annotator");
    if (annotator.empty()) annotator = req.get_param_value("annotator");
    reply(res, service.put_extreme_points(req.matches[1], req.body, annotator));
  });
  svr.Get(R"(/studies/([^/]+)/extreme-points)", [&service](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.get_extreme_points(req.matches[1]));
  });
  svr.Post(R"(/studies/([^/]+)/infer)", [&service](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.infer(req.matches[1]));
  });
  port_ = port == 0 ? svr.bind_to_any_port(host) : (svr.bind_to_port(host, port) ? port : -1);
  if (port_ <= 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
}

ServiceServer::~ServiceServer() { stop(); }

void ServiceServer::start() {
  if (impl_->thread.joinable()) return;
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void ServiceServer::run() { impl_->server.listen_after_bind(); }

void ServiceServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int serve(const ServiceOptions& options) {
  AnnotationService service(options);
  ServiceServer server(service, options.host, options.port);
  std::cout << "ugda annotation service on http://" << options.host << ":" << server.port()
            << (service.model_loaded() ? "" : " (no checkpoint: inference disabled)") << std::endl;
  server.run();
  return 0;
}

}  // namespace ugda

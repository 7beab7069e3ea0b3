#include "ugda/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ugda/errors.hpp"
#include "ugda/extreme_points.hpp"
#include "ugda/file_audit.hpp"
#include "ugda/measures.hpp"
#include "ugda/nifti.hpp"

namespace ugda {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string read_text(const std::string& path) {
  io::record_open(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("write failed for " + path);
  }
  fs::rename(tmp, p);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

double parse_double(const std::string& s) {
  if (s == "nan" || s.empty()) return kNaN;
  size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw InvalidArgument("not a number: '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double population_std(const std::vector<double>& v, double mean) {
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

ordered_json number_or_null(double v) { return std::isnan(v) ? ordered_json(nullptr) : ordered_json(v); }
double number_or_nan(const ordered_json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << v;
  return ss.str();
}

}  // namespace

Quartiles boxwhisker_stats(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("boxwhisker_stats: empty list");
  std::sort(values.begin(), values.end());
  const auto quantile = [&](double p) {
    const double h = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(h));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  return {values.front(), quantile(0.25), quantile(0.5), quantile(0.75), values.back()};
}

Aggregates aggregate_rows(const std::vector<VolumeRow>& rows) {
  Aggregates a;
  std::vector<double> dsc, mxa;
  for (const auto& r : rows) {
    if (r.empty_pred) {
      ++a.empty_count;
      continue;
    }
    dsc.push_back(r.dsc);
    if (r.mxa_mm) mxa.push_back(*r.mxa_mm);
  }
  a.count = static_cast<int>(dsc.size());
  if (dsc.empty()) {
    a.dsc_mean = a.dsc_std = a.dsc_min = kNaN;
  } else {
    a.dsc_mean = mean_of(dsc);
    a.dsc_std = population_std(dsc, a.dsc_mean);
    a.dsc_min = *std::min_element(dsc.begin(), dsc.end());
  }
  if (mxa.empty()) {
    a.mxa_mean = a.mxa_std = kNaN;
  } else {
    a.mxa_mean = mean_of(mxa);
    a.mxa_std = population_std(mxa, a.mxa_mean);
  }
  return a;
}

void RunReport::recompute() {
  aggregates = aggregate_rows(per_volume);
  std::vector<double> dsc;
  for (const auto& r : per_volume)
    if (!r.empty_pred) dsc.push_back(r.dsc);
  if (dsc.empty()) {
    dsc_quartiles = {kNaN, kNaN, kNaN, kNaN, kNaN};
  } else {
    dsc_quartiles = boxwhisker_stats(std::move(dsc));
  }
}

RunReport evaluate_cases(const std::vector<EvaluationCase>& cases) {
  RunReport report;
  for (const auto& c : cases) {
    if (!fs::exists(c.prediction)) {
      report.errors.push_back(c.study_id + ": prediction missing");
      continue;
    }
    try {
      const SegmentationMask truth = read_mask(c.hidden_mask);
      const SegmentationMask pred = read_mask(c.prediction);
      if (pred.shape() != truth.shape()) {
        report.errors.push_back(c.study_id + ": prediction shape differs from mask");
        continue;
      }
      const ExtremePointSet points =
          !c.ps.empty() && fs::exists(c.ps) ? read_extreme_points(c.ps) : extract_extreme_points(truth);
      VolumeRow row;
      row.study_id = c.study_id;
      row.dsc = dice_score(pred, truth);
      row.empty_pred = foreground_count(pred) == 0;
      if (!row.empty_pred) row.mxa_mm = mxa(pred, points);
      report.per_volume.push_back(std::move(row));
    } catch (const std::exception& e) {
      report.errors.push_back(c.study_id + ": " + e.what());
    }
  }
  report.recompute();
  return report;
}

RunReport evaluate_run(const std::string& pred_dir, const std::string& hidden_mask_dir, const std::string& ps_dir) {
  if (!fs::is_directory(hidden_mask_dir)) throw InvalidArgument("hidden mask directory missing: " + hidden_mask_dir);
  std::vector<EvaluationCase> cases;
  const std::string ext = ".nii.gz";
  for (const auto& e : fs::directory_iterator(hidden_mask_dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() <= ext.size() || !name.ends_with(ext)) continue;
    const std::string id = name.substr(0, name.size() - ext.size());
    cases.push_back({id, (fs::path(pred_dir) / name).string(), e.path().string(),
                     (fs::path(ps_dir) / (id + ".json")).string()});
  }
  std::sort(cases.begin(), cases.end(), [](const auto& a, const auto& b) { return a.study_id < b.study_id; });
  return evaluate_cases(cases);
}

std::string report_to_json(const RunReport& r) {
  ordered_json j;
  j["format"] = "ugda-run-report";
  j["version"] = 1;
  j["variant"] = r.variant;
  j["ps_fraction"] = r.ps_fraction;
  j["seed"] = r.seed ? ordered_json(*r.seed) : ordered_json(nullptr);
  j["std_convention"] = "population";
  j["quantile_method"] = "linear";
  ordered_json rows = ordered_json::array();
  for (const auto& row : r.per_volume) {
    rows.push_back({{"study_id", row.study_id},
                    {"dsc", row.dsc},
                    {"mxa_mm", row.mxa_mm ? ordered_json(*row.mxa_mm) : ordered_json(nullptr)},
                    {"empty_pred_flag", row.empty_pred}});
  }
  j["per_volume"] = rows;
  const auto& a = r.aggregates;
  j["aggregates"] = {{"count", a.count},
                     {"empty_count", a.empty_count},
                     {"dsc_mean", number_or_null(a.dsc_mean)},
                     {"dsc_std", number_or_null(a.dsc_std)},
                     {"dsc_min", number_or_null(a.dsc_min)},
                     {"mxa_mean", number_or_null(a.mxa_mean)},
                     {"mxa_std", number_or_null(a.mxa_std)}};
  const auto& q = r.dsc_quartiles;
  j["dsc_quartiles"] = {{"min", number_or_null(q.min)},
                        {"q1", number_or_null(q.q1)},
                        {"median", number_or_null(q.median)},
                        {"q3", number_or_null(q.q3)},
                        {"max", number_or_null(q.max)}};
  j["errors"] = r.errors;
  return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw InvalidArgument(std::string("run report: ") + e.what());
  }
  if (j.value("format", "") != "ugda-run-report") throw InvalidArgument("not a run report");
  if (j.value("version", 0) != 1) throw InvalidArgument("unsupported run report version");
  RunReport r;
  r.variant = j.at("variant").get<std::string>();
  r.ps_fraction = j.at("ps_fraction").get<double>();
  if (!j.at("seed").is_null()) r.seed = j.at("seed").get<unsigned long long>();
  for (const auto& row : j.at("per_volume")) {
    VolumeRow v;
    v.study_id = row.at("study_id").get<std::string>();
    v.dsc = row.at("dsc").get<double>();
    if (!row.at("mxa_mm").is_null()) v.mxa_mm = row.at("mxa_mm").get<double>();
    v.empty_pred = row.at("empty_pred_flag").get<bool>();
    if (v.dsc < 0.0 || v.dsc > 1.0 || (v.mxa_mm && *v.mxa_mm < 0.0)) throw InvalidArgument("run report: value out of range");
    r.per_volume.push_back(std::move(v));
  }
  const auto& a = j.at("aggregates");
  r.aggregates.count = a.at("count").get<int>();
  r.aggregates.empty_count = a.at("empty_count").get<int>();
  r.aggregates.dsc_mean = number_or_nan(a.at("dsc_mean"));
  r.aggregates.dsc_std = number_or_nan(a.at("dsc_std"));
  r.aggregates.dsc_min = number_or_nan(a.at("dsc_min"));
  r.aggregates.mxa_mean = number_or_nan(a.at("mxa_mean"));
  r.aggregates.mxa_std = number_or_nan(a.at("mxa_std"));
  const auto& q = j.at("dsc_quartiles");
  r.dsc_quartiles = {number_or_nan(q.at("min")), number_or_nan(q.at("q1")), number_or_nan(q.at("median")),
                     number_or_nan(q.at("q3")), number_or_nan(q.at("max"))};
  r.errors = j.at("errors").get<std::vector<std::string>>();
  return r;
}

void save_report(const std::string& path, const RunReport& r) { write_text(path, report_to_json(r)); }
RunReport load_report(const std::string& path) { return report_from_json(read_text(path)); }

std::string per_volume_csv(const RunReport& r) {
  std::string out = "study_id,dsc,mxa_mm,empty_pred_flag\n";
  for (const auto& row : r.per_volume) {
    if (row.study_id.find_first_of(",\n") != std::string::npos) throw InvalidArgument("study id not CSV-safe");
    out += row.study_id + "," + format_double(row.dsc) + "," + (row.mxa_mm ? format_double(*row.mxa_mm) : "") + "," +
           (row.empty_pred ? "1" : "0") + "\n";
  }
  return out;
}

std::vector<VolumeRow> parse_per_volume_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (split(line, ',') != std::vector<std::string>{"study_id", "dsc", "mxa_mm", "empty_pred_flag"})
    throw InvalidArgument("per-volume CSV: unexpected header");
  std::vector<VolumeRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4) throw InvalidArgument("per-volume CSV: bad row '" + line + "'");
    VolumeRow r;
    r.study_id = f[0];
    r.dsc = parse_double(f[1]);
    if (!f[2].empty()) r.mxa_mm = parse_double(f[2]);
    r.empty_pred = f[3] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string display_name(const std::string& variant) {
  static const std::map<std::string, std::string> names{{"supervised_dual", "Dual FCN"},
                                                        {"dextr", "DEXTR"},
                                                        {"ada_mask_no_ps", "Mask ADA (no PS)"},
                                                        {"ada_mask_with_ps", "Mask ADA (w/ PS)"},
                                                        {"ugda", "UGDA"}};
  const auto it = names.find(variant);
  return it == names.end() ? variant : it->second;
}

namespace {

// The dual FCN never sees points and mask ADA without points ignores them.
double table_ps_percent(const RunReport& r) {
  if (r.variant == "supervised_dual") return kNaN;
  if (r.variant == "ada_mask_no_ps") return 0.0;
  return r.ps_fraction * 100.0;
}

bool same_percent(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

}  // namespace

std::vector<TableRow> make_table(const std::vector<RunReport>& reports) {
  if (reports.empty()) throw InvalidArgument("make_table: no reports");
  std::vector<TableRow> rows;
  for (const auto& r : reports) {
    TableRow row{display_name(r.variant),         table_ps_percent(r),        r.aggregates.dsc_mean * 100.0,
                 r.aggregates.dsc_std * 100.0,   r.aggregates.mxa_mean,      r.aggregates.mxa_std};
    for (const auto& existing : rows)
      if (existing.model == row.model && same_percent(existing.ps_percent, row.ps_percent))
        throw InvalidArgument("make_table: duplicate row for " + r.variant + " at " + format_double(row.ps_percent) + "%");
    rows.push_back(row);
  }
  return rows;
}

std::vector<TableRow> reference_table() {
  return {{"Dual FCN", kNaN, 93.0, 3.2, 4.3, 1.2},        {"DEXTR", 100, 93.1, 2.4, 3.9, 1.2},
          {"Mask ADA (no PS)", 0, 94.8, 1.8, 3.4, 1.6}, {"Mask ADA (w/ PS)", 100, 95.5, 1.0, 2.5, 1.0},
          {"UGDA", 25, 95.8, 0.8, 1.7, 0.8},              {"UGDA", 50, 96.0, 0.9, 1.4, 0.9},
          {"UGDA", 100, 96.1, 0.8, 1.1, 0.9}};
}

std::string table_csv(const std::vector<TableRow>& rows) {
  std::string out = "model,ps_percent,dsc_mean,dsc_std,mxa_mean,mxa_std\n";
  for (const auto& r : rows) {
    out += r.model + "," + format_double(r.ps_percent) + "," + format_double(r.dsc_mean) + "," +
           format_double(r.dsc_std) + "," + format_double(r.mxa_mean) + "," + format_double(r.mxa_std) + "\n";
  }
  return out;
}

std::vector<TableRow> parse_table_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (split(line, ',').size() != 6) throw InvalidArgument("table CSV: unexpected header");
  std::vector<TableRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 6) throw InvalidArgument("table CSV: bad row '" + line + "'");
    rows.push_back({f[0], parse_double(f[1]), parse_double(f[2]), parse_double(f[3]), parse_double(f[4]),
                    parse_double(f[5])});
  }
  return rows;
}

namespace {

std::vector<std::array<std::string, 4>> formatted_cells(const std::vector<TableRow>& rows) {
  std::vector<std::array<std::string, 4>> cells{{"Model", "%PSs", "Mean DSC", "Mean MXA (mm)"}};
  for (const auto& r : rows) {
    cells.push_back({r.model, std::isnan(r.ps_percent) ? "n/a" : fixed(r.ps_percent, 0) + "%", fixed(r.dsc_mean, 1) + " ± " + fixed(r.dsc_std, 1),
                     fixed(r.mxa_mean, 1) + " ± " + fixed(r.mxa_std, 1)});
  }
  return cells;
}

// Display width, counting each UTF-8 code point once.
size_t width(const std::string& s) {
  size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

}  // namespace

std::string table_text(const std::vector<TableRow>& rows) {
  const auto cells = formatted_cells(rows);
  std::array<size_t, 4> w{};
  for (const auto& row : cells)
    for (size_t c = 0; c < 4; ++c) w[c] = std::max(w[c], width(row[c]));
  std::string out;
  for (size_t r = 0; r < cells.size(); ++r) {
    for (size_t c = 0; c < 4; ++c) {
      const std::string pad(w[c] - width(cells[r][c]), ' ');
      out += c == 0 ? cells[r][c] + pad : pad + cells[r][c];
      out += c + 1 < 4 ? "  " : "\n";
    }
    if (r == 0) {
      for (size_t c = 0; c < 4; ++c) out += std::string(w[c], '-') + (c + 1 < 4 ? "  " : "\n");
    }
  }
  return out;
}

std::string table_markdown(const std::vector<TableRow>& rows) {
  const auto cells = formatted_cells(rows);
  std::string out;
  for (size_t r = 0; r < cells.size(); ++r) {
    out += "| " + cells[r][0] + " | " + cells[r][1] + " | " + cells[r][2] + " | " + cells[r][3] + " |\n";
    if (r == 0) out += "|---|---:|---:|---:|\n";
  }
  return out;
}

std::vector<RunReport> pool_reports(const std::vector<RunReport>& reports) {
  std::vector<RunReport> pooled;
  for (const auto& r : reports) {
    auto it = std::find_if(pooled.begin(), pooled.end(), [&](const RunReport& p) {
      return p.variant == r.variant && p.ps_fraction == r.ps_fraction;
    });
    if (it == pooled.end()) {
      pooled.push_back({r.variant, r.ps_fraction, std::nullopt, {}, {}, {}, {}});
      it = std::prev(pooled.end());
    }
    const std::string prefix = r.seed ? "s" + std::to_string(*r.seed) + "/" : "";
    for (auto row : r.per_volume) {
      row.study_id = prefix + row.study_id;
      it->per_volume.push_back(std::move(row));
    }
    for (const auto& e : r.errors) it->errors.push_back(prefix + e);
  }
  for (auto& p : pooled) p.recompute();
  return pooled;
}

std::string boxplot_svg(const std::vector<BoxSeries>& series) {
  if (series.empty()) throw InvalidArgument("boxplot: no series");
  double lo = 100.0, hi = 0.0;
  for (const auto& s : series) {
    lo = std::min(lo, s.stats.min * 100.0);
    hi = std::max(hi, s.stats.max * 100.0);
  }
  lo = std::floor(lo / 5.0) * 5.0;
  hi = std::min(100.0, std::ceil(hi / 5.0) * 5.0);
  if (hi <= lo) hi = lo + 5.0;

  const double left = 60, top = 20, plot_h = 300, slot = 110;
  const double width_px = left + slot * static_cast<double>(series.size()) + 20;
  const double height_px = top + plot_h + 60;
  const auto y = [&](double dsc) { return top + plot_h * (1.0 - (dsc * 100.0 - lo) / (hi - lo)); };

  std::ostringstream svg;
  svg << R"(<svg xmlns="http://www.w3.org/2000/svg" width=")" << width_px << R"(" height=")" << height_px
      << R"(" font-family="sans-serif" font-size="12">)" << "\n";
  svg << R"(<rect width="100%" height="100%" fill="white"/>)" << "\n";
  for (double t = lo; t <= hi + 1e-9; t += 5.0) {
    const double ty = top + plot_h * (1.0 - (t - lo) / (hi - lo));
    svg << R"(<line x1=")" << left << R"(" x2=")" << width_px - 20 << R"(" y1=")" << ty << R"(" y2=")" << ty
        << R"(" stroke="#ddd"/>)" << "\n";
    svg << R"(<text x=")" << left - 8 << R"(" y=")" << ty + 4 << R"(" text-anchor="end">)" << t << "</text>\n";
  }
  svg << "<text x=\"14\" y=\"" << top + plot_h / 2 << "\" transform=\"rotate(-90 14 " << top + plot_h / 2
      << ")\" text-anchor=\"middle\">DSC (%)</text>\n";
  for (size_t n = 0; n < series.size(); ++n) {
    const auto& q = series[n].stats;
    const double cx = left + slot * (static_cast<double>(n) + 0.5);
    const double half = 25;
    svg << R"(<line x1=")" << cx << R"(" x2=")" << cx << R"(" y1=")" << y(q.max) << R"(" y2=")" << y(q.q3)
        << R"(" stroke="black"/>)" << "\n";
    svg << R"(<line x1=")" << cx << R"(" x2=")" << cx << R"(" y1=")" << y(q.q1) << R"(" y2=")" << y(q.min)
        << R"(" stroke="black"/>)" << "\n";
    for (double v : {q.min, q.max})
      svg << R"(<line x1=")" << cx - half / 2 << R"(" x2=")" << cx + half / 2 << R"(" y1=")" << y(v) << R"(" y2=")"
          << y(v) << R"(" stroke="black"/>)" << "\n";
    svg << R"(<rect x=")" << cx - half << R"(" y=")" << y(q.q3) << R"(" width=")" << 2 * half << R"(" height=")"
        << std::max(0.0, y(q.q1) - y(q.q3)) << R"(" fill="#9ecae1" stroke="black"/>)" << "\n";
    svg << R"(<line x1=")" << cx - half << R"(" x2=")" << cx + half << R"(" y1=")" << y(q.median) << R"(" y2=")"
        << y(q.median) << R"(" stroke="#d62728" stroke-width="2"/>)" << "\n";
    svg << R"(<text x=")" << cx << R"(" y=")" << top + plot_h + 20 << R"(" text-anchor="middle">)"
        << xml_escape(series[n].label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace ugda

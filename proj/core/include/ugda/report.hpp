#pragma once

#include <optional>
#include <string>
#include <vector>

namespace ugda {

struct VolumeRow {
  std::string study_id;
  double dsc = 0.0;
  /// Missing when the prediction is empty.
  std::optional<double> mxa_mm;
  bool empty_pred = false;

  bool operator==(const VolumeRow&) const = default;
};

/// Five-number summary with linear interpolation between order statistics.
struct Quartiles {
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;

  bool operator==(const Quartiles&) const = default;
};

/// Means and population standard deviations over non-empty rows.
struct Aggregates {
  int count = 0;
  int empty_count = 0;
  double dsc_mean = 0.0;
  double dsc_std = 0.0;
  double dsc_min = 0.0;
  double mxa_mean = 0.0;
  double mxa_std = 0.0;

  bool operator==(const Aggregates&) const = default;
};

struct RunReport {
  std::string variant;
  double ps_fraction = 1.0;
  std::optional<unsigned long long> seed;
  std::vector<VolumeRow> per_volume;
  /// Studies that could not be evaluated; excluded from aggregates.
  std::vector<std::string> errors;
  Aggregates aggregates;
  Quartiles dsc_quartiles;

  /// Rebuilds aggregates and quartiles from `per_volume`.
  void recompute();
  bool operator==(const RunReport&) const = default;
};

/// Throws InvalidArgument on an empty list.
Quartiles boxwhisker_stats(std::vector<double> values);

/// Pure-arithmetic aggregate over rows; empty-prediction rows only raise
/// `empty_count`.
Aggregates aggregate_rows(const std::vector<VolumeRow>& rows);

struct EvaluationCase {
  std::string study_id;
  std::string prediction;
  std::string hidden_mask;
  /// Optional; when empty or missing the points come from the hidden mask.
  std::string ps;
};

/// Per-volume DSC and MXA for each case. Unreadable or missing inputs land
/// in `errors` and are excluded from aggregates.
RunReport evaluate_cases(const std::vector<EvaluationCase>& cases);

/// Scores every `<id>.nii.gz` in `hidden_mask_dir` against `pred_dir/<id>.nii.gz`.
/// Ground-truth extreme points come from `ps_dir/<id>.json` when present and
/// are otherwise extracted from the hidden mask.
RunReport evaluate_run(const std::string& pred_dir, const std::string& hidden_mask_dir, const std::string& ps_dir);

std::string report_to_json(const RunReport& r);
RunReport report_from_json(const std::string& text);
void save_report(const std::string& path, const RunReport& r);
RunReport load_report(const std::string& path);

std::string per_volume_csv(const RunReport& r);
std::vector<VolumeRow> parse_per_volume_csv(const std::string& text);

/// Human-readable model name for a variant string.
std::string display_name(const std::string& variant);

struct TableRow {
  std::string model;
  double ps_percent = 100.0;
  double dsc_mean = 0.0;
  double dsc_std = 0.0;
  double mxa_mean = 0.0;
  double mxa_std = 0.0;

  bool operator==(const TableRow&) const = default;
};

/// One row per (variant, ps_fraction); DSC in percent, MXA in mm. Throws
/// InvalidArgument on duplicates or an empty list.
std::vector<TableRow> make_table(const std::vector<RunReport>& reports);

/// Clinical-scale reference results, for context next to phantom tables.
std::vector<TableRow> reference_table();

std::string table_csv(const std::vector<TableRow>& rows);
std::vector<TableRow> parse_table_csv(const std::string& text);
std::string table_text(const std::vector<TableRow>& rows);
std::string table_markdown(const std::vector<TableRow>& rows);

/// Merges reports sharing (variant, ps_fraction) by concatenating their
/// rows; study ids gain a "s<seed>/" prefix when seeds are known.
std::vector<RunReport> pool_reports(const std::vector<RunReport>& reports);

struct BoxSeries {
  std::string label;
  Quartiles stats;
};

/// Static box-and-whisker plot of DSC (percent axis).
std::string boxplot_svg(const std::vector<BoxSeries>& series);

}  // namespace ugda

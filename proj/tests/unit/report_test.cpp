#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "test_support.hpp"
#include "ugda/errors.hpp"
#include "ugda/nifti.hpp"
#include "ugda/report.hpp"

namespace ugda {
namespace {

namespace fs = std::filesystem;

VolumeRow row(const std::string& id, double dsc, std::optional<double> mxa) { return {id, dsc, mxa, false}; }

TEST(Boxwhisker, LinearInterpolationBetweenOrderStatistics) {
  const Quartiles q = boxwhisker_stats({5, 1, 4, 2, 3});
  EXPECT_EQ(q, (Quartiles{1, 2, 3, 4, 5}));
  // n = 4: positions 0.75, 1.5, 2.25 over {10, 20, 30, 40}.
  const Quartiles r = boxwhisker_stats({40, 10, 30, 20});
  EXPECT_DOUBLE_EQ(r.q1, 17.5);
  EXPECT_DOUBLE_EQ(r.median, 25.0);
  EXPECT_DOUBLE_EQ(r.q3, 32.5);
  EXPECT_EQ(boxwhisker_stats({7}), (Quartiles{7, 7, 7, 7, 7}));
  EXPECT_THROW(boxwhisker_stats({}), InvalidArgument);
}

TEST(Aggregate, PopulationStdAndEmptyExclusion) {
  std::vector<VolumeRow> rows{row("a", 0.9, 2.0), row("b", 0.95, 4.0)};
  Aggregates a = aggregate_rows(rows);
  EXPECT_EQ(a.count, 2);
  EXPECT_NEAR(a.dsc_mean, 0.925, 1e-15);
  EXPECT_NEAR(a.dsc_std, 0.025, 1e-15);
  EXPECT_DOUBLE_EQ(a.dsc_min, 0.9);
  EXPECT_DOUBLE_EQ(a.mxa_mean, 3.0);
  EXPECT_DOUBLE_EQ(a.mxa_std, 1.0);

  rows.push_back({"c", 0.0, std::nullopt, true});
  a = aggregate_rows(rows);
  EXPECT_EQ(a.count, 2);
  EXPECT_EQ(a.empty_count, 1);
  EXPECT_NEAR(a.dsc_mean, 0.925, 1e-15);

  const Aggregates none = aggregate_rows({{"x", 0.0, std::nullopt, true}});
  EXPECT_TRUE(std::isnan(none.dsc_mean));
  EXPECT_TRUE(std::isnan(none.mxa_mean));
}

RunReport sample_report() {
  RunReport r;
  r.variant = "ugda";
  r.ps_fraction = 0.25;
  r.seed = 3;
  r.per_volume = {row("e000", 0.1 + 0.2, 1.0 / 3.0), row("e001", 0.875, std::sqrt(2.0)), {"e002", 0.0, std::nullopt, true}};
  r.errors = {"e003"};
  r.recompute();
  return r;
}

TEST(ReportJson, RoundTripIsExact) {
  const RunReport r = sample_report();
  const std::string text = report_to_json(r);
  const RunReport back = report_from_json(text);
  EXPECT_EQ(back, r);
  EXPECT_EQ(report_to_json(back), text);

  const fs::path p = fs::temp_directory_path() / "ugda_report_test.json";
  save_report(p.string(), r);
  EXPECT_EQ(load_report(p.string()), r);
  fs::remove(p);
  EXPECT_THROW(report_from_json("{\"format\": \"other\"}"), std::exception);
}

TEST(ReportJson, NanAggregatesBecomeNull) {
  RunReport r;
  r.variant = "dextr";
  r.per_volume = {{"x", 0.0, std::nullopt, true}};
  r.recompute();
  const std::string text = report_to_json(r);
  EXPECT_NE(text.find("null"), std::string::npos);
  EXPECT_EQ(text.find("nan"), std::string::npos);
  EXPECT_TRUE(std::isnan(report_from_json(text).aggregates.dsc_mean));
}

TEST(PerVolumeCsv, RoundTripIsExact) {
  const RunReport r = sample_report();
  EXPECT_EQ(parse_per_volume_csv(per_volume_csv(r)), r.per_volume);
}

RunReport with_rows(const std::string& v, double f, std::vector<VolumeRow> rows, std::optional<unsigned long long> seed = {}) {
  RunReport r;
  r.variant = v;
  r.ps_fraction = f;
  r.seed = seed;
  r.per_volume = std::move(rows);
  r.recompute();
  return r;
}

TEST(Table, RowsInPercentAndDuplicatesRejected) {
  const auto t = make_table({with_rows("supervised_dual", 1.0, {row("a", 0.9, 2.0), row("b", 0.95, 4.0)}),
                             with_rows("ugda", 0.25, {row("a", 0.96, 1.0)}),
                             with_rows("ada_mask_no_ps", 1.0, {row("a", 0.94, 3.0)})});
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t[0].model, "Dual FCN");
  EXPECT_TRUE(std::isnan(t[0].ps_percent));
  EXPECT_NEAR(t[0].dsc_mean, 92.5, 1e-12);
  EXPECT_NEAR(t[0].dsc_std, 2.5, 1e-12);
  EXPECT_EQ(t[1].ps_percent, 25.0);
  EXPECT_EQ(t[2].ps_percent, 0.0);
  EXPECT_THROW(make_table({with_rows("ugda", 1.0, {row("a", 0.9, 1.0)}), with_rows("ugda", 1.0, {row("b", 0.9, 1.0)})}),
               InvalidArgument);
  EXPECT_THROW(make_table({}), InvalidArgument);

  const auto back = parse_table_csv(table_csv(t));
  ASSERT_EQ(back.size(), t.size());
  for (size_t n = 1; n < t.size(); ++n) EXPECT_EQ(back[n], t[n]);
  EXPECT_TRUE(std::isnan(back[0].ps_percent));

  const std::string text = table_text(t);
  EXPECT_NE(text.find("92.5 ± 2.5"), std::string::npos);
  EXPECT_NE(text.find("n/a"), std::string::npos);
  EXPECT_NE(table_markdown(t).find("| UGDA | 25% |"), std::string::npos);
}

TEST(Table, ReferenceRows) {
  const auto ref = reference_table();
  ASSERT_EQ(ref.size(), 7u);
  EXPECT_EQ(ref.back().model, "UGDA");
  EXPECT_EQ(ref.back().dsc_mean, 96.1);
  EXPECT_EQ(ref.back().mxa_mean, 1.1);
  EXPECT_EQ(ref[4].ps_percent, 25.0);
  EXPECT_EQ(ref[4].dsc_mean, 95.8);
  // The robustness gap the phantom benchmark is compared against.
  EXPECT_NEAR(ref.back().dsc_mean - ref[4].dsc_mean, 0.3, 1e-9);
  EXPECT_EQ(ref[0].dsc_mean, 93.0);
}

TEST(Pool, MergesSeedsWithPrefixedIds) {
  const auto pooled = pool_reports({with_rows("ugda", 1.0, {row("a", 0.9, 1.0)}, 0), with_rows("ugda", 1.0, {row("a", 0.8, 2.0)}, 1),
                                    with_rows("dextr", 1.0, {row("a", 0.7, 3.0)}, 0)});
  ASSERT_EQ(pooled.size(), 2u);
  ASSERT_EQ(pooled[0].per_volume.size(), 2u);
  EXPECT_EQ(pooled[0].per_volume[0].study_id, "s0/a");
  EXPECT_EQ(pooled[0].per_volume[1].study_id, "s1/a");
  EXPECT_NEAR(pooled[0].aggregates.dsc_mean, 0.85, 1e-15);
  EXPECT_FALSE(pooled[0].seed.has_value());
}

TEST(Boxplot, EscapesLabelsAndDrawsEverySeries) {
  const std::string svg = boxplot_svg({{"A<B", {0.8, 0.85, 0.9, 0.92, 0.95}}, {"UGDA & co", {0.9, 0.91, 0.93, 0.95, 0.97}}});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("A&lt;B"), std::string::npos);
  EXPECT_NE(svg.find("UGDA &amp; co"), std::string::npos);
  EXPECT_EQ(svg.find("A<B"), std::string::npos);
  EXPECT_THROW(boxplot_svg({}), InvalidArgument);
}

TEST(EvaluateCases, ScoresAgainstHiddenMasks) {
  const fs::path dir = fs::temp_directory_path() / "ugda_eval_cases";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Shape3 shape{12, 10, 8};
  const auto truth = testing::box_mask(shape, {2, 2, 2}, {7, 6, 5});
  const auto pred = testing::translate(truth, 1, 0, 0);
  write_mask((dir / "truth.nii.gz").string(), truth);
  write_mask((dir / "pred.nii.gz").string(), pred);
  write_mask((dir / "empty.nii.gz").string(), SegmentationMask(shape, {1, 1, 1}, "z"));

  const RunReport r = evaluate_cases({{"ok", (dir / "pred.nii.gz").string(), (dir / "truth.nii.gz").string(), ""},
                                      {"empty", (dir / "empty.nii.gz").string(), (dir / "truth.nii.gz").string(), ""},
                                      {"missing", (dir / "nope.nii.gz").string(), (dir / "truth.nii.gz").string(), ""}});
  ASSERT_EQ(r.per_volume.size(), 2u);
  EXPECT_DOUBLE_EQ(r.per_volume[0].dsc, testing::brute_dice(pred, truth));
  EXPECT_DOUBLE_EQ(*r.per_volume[0].mxa_mm, 1.0);  // every extreme point moves one voxel along x
  EXPECT_TRUE(r.per_volume[1].empty_pred);
  EXPECT_FALSE(r.per_volume[1].mxa_mm.has_value());
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].rfind("missing", 0), 0u);
  EXPECT_EQ(r.aggregates.count, 1);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace ugda

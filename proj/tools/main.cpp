// ugda command line: data generation, training, evaluation, inference,
// reporting and the annotation service.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ugda/corpus.hpp"
#include "ugda/errors.hpp"
#include "ugda/extreme_points.hpp"
#include "ugda/measures.hpp"
#include "ugda/nifti.hpp"
#include "ugda/report.hpp"
#include "ugda/service.hpp"
#include "ugda/trainer.hpp"

namespace fs = std::filesystem;
using namespace ugda;

namespace {

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

int gen_data(const std::string& config_path, const std::string& out_override) {
  CorpusConfig c = load_corpus_config(config_path);
  if (!out_override.empty()) c.out_dir = out_override;
  const CorpusManifest m = build_corpus(c);
  std::printf("wrote %zu source, %zu target (%zu with PS), %zu evaluation studies to %s\n", m.source_studies.size(),
              m.target_ps_studies.size() + m.target_unlabelled_studies.size(), m.target_ps_studies.size(),
              m.evaluation_studies.size(), c.out_dir.c_str());
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string variant;
  double ps_fraction = -1.0;
  long long seed = -1;
  std::string out;
  std::string init_ckpt;
  double lambda_adv = -1.0;
  int pretrain_epochs = -1;
  int adapt_epochs = -1;
};

int train(const TrainArgs& a) {
  TrainConfig c = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  if (!a.variant.empty()) c.variant = parse_variant(a.variant);
  if (a.ps_fraction >= 0.0) c.ps_fraction = a.ps_fraction;
  if (a.seed >= 0) c.seed = static_cast<uint64_t>(a.seed);
  if (!a.init_ckpt.empty()) c.init_checkpoint = a.init_ckpt;
  if (a.lambda_adv >= 0.0) c.lambda_adv = a.lambda_adv;
  if (a.pretrain_epochs >= 0) c.pretrain_max_epochs = a.pretrain_epochs;
  if (a.adapt_epochs >= 0) c.adapt_epochs = a.adapt_epochs;
  c.validate();
  const CorpusManifest m = load_manifest(a.manifest);
  const RunReport r = run_variant(m, c, a.out);
  std::printf("%s  ps=%.0f%%  seed=%llu  DSC %.4f ± %.4f  MXA %.3f ± %.3f mm  (min DSC %.4f, n=%d)\n",
              r.variant.c_str(), r.ps_fraction * 100.0, static_cast<unsigned long long>(c.seed), r.aggregates.dsc_mean,
              r.aggregates.dsc_std, r.aggregates.mxa_mean, r.aggregates.mxa_std, r.aggregates.dsc_min,
              r.aggregates.count);
  return 0;
}

int eval(const std::string& run_dir) {
  const RunReport r = evaluate_run_dir(run_dir);
  std::cout << table_text(make_table({r}));
  for (const auto& e : r.errors) std::cerr << "error: " << e << "\n";
  if (r.aggregates.empty_count > 0) std::cerr << "warning: " << r.aggregates.empty_count << " empty predictions\n";
  return r.errors.empty() ? 0 : 1;
}

int infer(const std::string& ckpt, const std::string& volume_path, const std::string& ps_path, const std::string& out,
          bool nearest) {
  LoadedModel m = load_model(ckpt);
  const Volume v = read_volume(volume_path);
  std::optional<ExtremePointSet> points;
  if (!ps_path.empty()) points = read_extreme_points(ps_path);
  HeatmapFeed feed = points ? HeatmapFeed::truth : evaluation_feed(m.config.variant, false);
  if (m.config.variant == Variant::ada_mask_no_ps) feed = HeatmapFeed::zeros;
  const SegmentationMask mask =
      predict_mask(m.models, m.config, v, points, feed, nearest ? Upsample::mask_nearest : Upsample::probability_linear);
  const std::string out_path = out.empty() ? (v.study_id().empty() ? "prediction" : v.study_id()) + ".nii.gz" : out;
  write_mask(out_path, mask);
  std::printf("wrote %s (%lld foreground voxels)", out_path.c_str(), static_cast<long long>(foreground_count(mask)));
  if (points) {
    const auto d = mxa(mask, *points);
    if (d) std::printf(", MXA %.3f mm", *d);
  }
  std::printf("\n");
  return 0;
}

int report(const std::vector<std::string>& runs, const std::string& out_dir, bool pool, bool with_reference) {
  std::vector<RunReport> reports;
  for (const auto& r : runs) {
    const fs::path p = fs::is_directory(r) ? fs::path(r) / "report.json" : fs::path(r);
    if (!fs::exists(p)) {
      std::cerr << "skipping " << r << ": no report.json\n";
      continue;
    }
    reports.push_back(load_report(p.string()));
  }
  if (reports.empty()) throw InvalidArgument("no run reports found");
  if (pool) reports = pool_reports(reports);
  std::sort(reports.begin(), reports.end(), [](const RunReport& a, const RunReport& b) {
    return std::tie(a.variant, a.ps_fraction) < std::tie(b.variant, b.ps_fraction);
  });
  const auto rows = make_table(reports);
  std::cout << table_text(rows);
  if (with_reference) std::cout << "\nreference (clinical CT, full scale):\n" << table_text(reference_table());
  if (!out_dir.empty()) {
    const fs::path out(out_dir);
    write_file(out / "table.csv", table_csv(rows));
    write_file(out / "table.md", table_markdown(rows));
    write_file(out / "table.txt", table_text(rows));
    std::vector<BoxSeries> series;
    for (const auto& r : reports) {
      std::vector<double> dsc;
      for (const auto& row : r.per_volume)
        if (!row.empty_pred) dsc.push_back(row.dsc);
      if (dsc.empty()) continue;
      std::string label = display_name(r.variant);
      if (r.ps_fraction < 1.0) label += " " + std::to_string(static_cast<int>(r.ps_fraction * 100.0 + 0.5)) + "%";
      series.push_back({label, boxwhisker_stats(dsc)});
    }
    if (!series.empty()) write_file(out / "dsc_boxplot.svg", boxplot_svg(series));
    std::cout << "wrote " << (out / "table.csv").string() << ", table.md, table.txt, dsc_boxplot.svg\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ugda: extreme-point guided domain adaptation for 3D segmentation"};
  app.require_subcommand(1);

  std::string config_path, out_override;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic source/target phantom corpus");
  gen->add_option("--config", config_path, "Corpus configuration JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_override, "Override the output directory");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a variant and evaluate it on the hidden evaluation masks");
  tr->add_option("--manifest", ta.manifest, "Corpus manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--config", ta.config, "TrainConfig JSON (flags below override it)")->check(CLI::ExistingFile);
  tr->add_option("--variant", ta.variant, "supervised_dual | dextr | ada_mask_no_ps | ada_mask_with_ps | ugda");
  tr->add_option("--ps-fraction", ta.ps_fraction, "Fraction of target studies whose extreme points are used");
  tr->add_option("--seed", ta.seed, "Run seed");
  tr->add_option("--out", ta.out, "Run directory")->required();
  tr->add_option("--init-ckpt", ta.init_ckpt, "Skip pretraining and start from this checkpoint");
  tr->add_option("--lambda-adv", ta.lambda_adv, "Adversarial loss weight");
  tr->add_option("--pretrain-epochs", ta.pretrain_epochs, "Maximum phase-1 epochs");
  tr->add_option("--adapt-epochs", ta.adapt_epochs, "Phase-2 epochs");

  std::string run_dir;
  auto* ev = app.add_subcommand("eval", "Re-score a run directory against the hidden masks");
  ev->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  std::string ckpt, volume, ps, infer_out;
  bool nearest = false;
  auto* inf = app.add_subcommand("infer", "Segment one volume");
  inf->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--volume", volume, "NIfTI volume")->required()->check(CLI::ExistingFile);
  inf->add_option("--ps", ps, "Extreme points JSON; omitted means predicted heatmaps")->check(CLI::ExistingFile);
  inf->add_option("--out", infer_out, "Output mask path (default <study_id>.nii.gz)");
  inf->add_flag("--nearest", nearest, "Binarize at model resolution and upsample the mask (service behaviour)");

  std::vector<std::string> runs;
  std::string report_out;
  bool pool = false, with_reference = false;
  auto* rep = app.add_subcommand("report", "Tabulate run reports and draw a DSC box plot");
  rep->add_option("--runs", runs, "Run directories or report.json files")->required();
  rep->add_option("--out", report_out, "Directory for table.csv/.md/.txt and dsc_boxplot.svg");
  rep->add_flag("--pool", pool, "Pool runs that share variant and PS fraction (e.g. several seeds)");
  rep->add_flag("--reference", with_reference, "Also print the clinical-scale reference table");

  ServiceOptions so;
  auto* srv = app.add_subcommand("serve", "Run the annotation REST service");
  srv->add_option("--ckpt", so.checkpoint, "Checkpoint used for inference (optional)");
  srv->add_option("--data-dir", so.data_dir, "Corpus directory holding manifest.json")->required();
  srv->add_option("--host", so.host, "Bind address");
  srv->add_option("--port", so.port, "Port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_data(config_path, out_override);
    if (*tr) return train(ta);
    if (*ev) return eval(run_dir);
    if (*inf) return infer(ckpt, volume, ps, infer_out, nearest);
    if (*rep) return report(runs, report_out, pool, with_reference);
    if (*srv) return serve(so);
  } catch (const std::exception& e) {
    std::cerr << "ugda: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "corpus_support.hpp"
#include "ugda/errors.hpp"
#include "ugda/file_audit.hpp"
#include "ugda/trainer.hpp"

namespace ugda {
namespace {

namespace fs = std::filesystem;
using testing::small_corpus_config;
using testing::toy_train_config;

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) out.push_back(p.detach().clone());
  return out;
}

double max_abs_diff(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  double m = 0.0;
  for (size_t n = 0; n < a.size(); ++n) m = std::max(m, (a[n] - b[n]).abs().max().item<double>());
  return m;
}

double optimizer_lr(torch::optim::Adam& opt) {
  return static_cast<torch::optim::AdamOptions&>(opt.param_groups().front().options()).lr();
}

TEST(Scheduler, SnapLandsOnDecimals) {
  EXPECT_EQ(snap_learning_rate(0.003 * 0.1), 0.0003);
  EXPECT_EQ(snap_learning_rate(snap_learning_rate(0.003 * 0.1) * 0.1), 0.00003);
  EXPECT_NE(0.003 * 0.1, 0.0003);  // the reason snapping exists
}

TEST(Scheduler, ScriptedStreakGivesOneReduction) {
  TrainConfig c;
  TrainState s;
  s.lr_main = c.lr_main;
  s.lr_disc = c.lr_disc;
  // 10 improving epochs, a 15-epoch streak without improvement, 15 improving epochs.
  std::vector<double> script;
  for (int e = 0; e < 10; ++e) script.push_back(0.50 + 0.01 * e);
  for (int e = 0; e < 15; ++e) script.push_back(0.55 - 0.001 * e);
  for (int e = 0; e < 15; ++e) script.push_back(0.70 + 0.01 * e);
  ASSERT_EQ(script.size(), 40u);
  int reductions = 0;
  for (size_t e = 0; e < script.size(); ++e) {
    const double before = s.lr_main;
    s = plateau_step(s, script[e], c);
    if (s.lr_main != before) ++reductions;
    EXPECT_EQ(s.lr_disc, 0.0003) << e;
    EXPECT_EQ(s.lr_main, e < 24 ? 0.003 : 0.0003) << e;
  }
  EXPECT_EQ(reductions, 1);
}

TEST(Scheduler, EqualValueIsNotAnImprovement) {
  TrainConfig c;
  c.plateau_patience = 2;
  TrainState s;
  s = plateau_step(s, 0.5, c);
  s = plateau_step(s, 0.5, c);
  EXPECT_EQ(s.lr_main, 0.003);
  s = plateau_step(s, 0.5, c);
  EXPECT_EQ(s.lr_main, 0.0003);
  EXPECT_EQ(s.epochs_since_best, 2);
  EXPECT_EQ(s.plateau_counter, 0);
}

TEST(SourceSplit, SeventyTwentyTen) {
  const auto s = split_source(40, 3);
  EXPECT_EQ(s.train.size(), 28u);
  EXPECT_EQ(s.test.size(), 8u);
  EXPECT_EQ(s.val.size(), 4u);
  std::set<size_t> all(s.train.begin(), s.train.end());
  all.insert(s.test.begin(), s.test.end());
  all.insert(s.val.begin(), s.val.end());
  EXPECT_EQ(all.size(), 40u);
  EXPECT_EQ(*all.rbegin(), 39u);
  const auto again = split_source(40, 3);
  EXPECT_EQ(again.val, s.val);
  EXPECT_EQ(again.train, s.train);
  EXPECT_NE(split_source(40, 4).train, s.train);
  EXPECT_EQ(split_source(1, 0).train.size(), 1u);
}

CorpusManifest id_manifest(int target_ps, int unlabelled, int eval) {
  CorpusManifest m;
  for (int n = 0; n < target_ps; ++n) m.target_ps_studies.push_back({"t" + std::to_string(n), "v", "p"});
  for (int n = 0; n < unlabelled; ++n) m.target_unlabelled_studies.push_back({"u" + std::to_string(n), "v"});
  for (int n = 0; n < eval; ++n) m.evaluation_studies.push_back({"e" + std::to_string(n), "v", "p", "h"});
  return m;
}

TEST(PsSelection, CountsFollowTheFraction) {
  const auto m = id_manifest(40, 0, 10);
  struct Case {
    double f;
    size_t total, eval;
  };
  for (const Case c : {Case{1.0, 50, 10}, Case{0.5, 25, 5}, Case{0.25, 13, 3}, Case{0.1, 5, 1}}) {
    const auto chosen = select_ps_studies(m, c.f, 7);
    EXPECT_EQ(chosen.size(), c.total) << c.f;
    size_t eval = 0;
    for (const auto& id : chosen) eval += id[0] == 'e';
    EXPECT_EQ(eval, c.eval) << c.f;
  }
  EXPECT_EQ(select_ps_studies(m, 0.25, 7), select_ps_studies(m, 0.25, 7));
  EXPECT_NE(select_ps_studies(m, 0.25, 7), select_ps_studies(m, 0.25, 8));
  // Not enough point-carrying targets: evaluation studies make up the rest.
  const auto short_m = id_manifest(2, 8, 10);
  const auto chosen = select_ps_studies(short_m, 0.5, 1);
  EXPECT_EQ(chosen.size(), 10u);
  for (const auto& id : chosen) EXPECT_NE(id[0], 'u');
}

TEST(ModelGrid, PointMappingIsVoxelCentreAligned) {
  const ExtremePointSet p({Index3{0, 10, 3}, Index3{63, 10, 3}, Index3{20, 1, 3}, Index3{20, 62, 3},
                           Index3{20, 10, 0}, Index3{20, 10, 23}},
                          {1.0, 1.0, 2.0}, PointSource::human_click, "s");
  const auto m = to_model_points(p, {64, 64, 24}, {32, 32, 24});
  EXPECT_EQ(m.slot(0), (Index3{0, 5, 3}));
  EXPECT_EQ(m.slot(1), (Index3{31, 5, 3}));
  EXPECT_EQ(m.slot(2), (Index3{10, 0, 3}));
  EXPECT_EQ(m.slot(3), (Index3{10, 31, 3}));
  EXPECT_EQ(m.slot(5), (Index3{10, 5, 23}));
  EXPECT_EQ(m.spacing_mm(), (Spacing3{2.0, 2.0, 2.0}));
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig c = toy_train_config(Variant::ada_mask_with_ps, 9);
  c.ps_fraction = 0.25;
  c.lambda_adv = 0.01;
  c.window_low = -100;
  c.window_high = 240;
  c.disc_source_input = DiscSourceInput::gt;
  c.init_checkpoint = "x/pretrain.ckpt";
  const std::string text = train_config_to_json(c);
  const TrainConfig back = train_config_from_json(text);
  EXPECT_EQ(train_config_to_json(back), text);
  EXPECT_EQ(back.variant, c.variant);
  EXPECT_EQ(back.model_shape, c.model_shape);
  EXPECT_TRUE(back.heatmap_net == c.heatmap_net);
  EXPECT_TRUE(back.discriminator == c.discriminator);
  EXPECT_THROW(train_config_from_json("{\"variant\": \"nope\"}"), InvalidArgument);
  TrainConfig bad = c;
  bad.model_shape = {18, 16, 8};
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = c;
  bad.ps_fraction = 0.0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(TrainStateJson, RoundTripKeepsInfinityAndHistory) {
  TrainState s;
  s.phase = "adapt";
  s.epoch = 3;
  s.global_step = 41;
  s.running["seg"].add(0.25);
  s.running["seg"].add(0.125);
  EpochRecord r;
  r.phase = "pretrain";
  r.val_dsc = 0.1 + 0.2;
  r.losses["ext"] = 1.0 / 3.0;
  s.history.push_back(r);
  const TrainState back = train_state_from_json(train_state_to_json(s));
  EXPECT_EQ(back, s);
  EXPECT_TRUE(std::isinf(back.best_val_dsc));
  s.best_val_dsc = 0.875;
  EXPECT_EQ(train_state_from_json(train_state_to_json(s)), s);
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "ugda_trainer_test";
    fs::remove_all(dir_);
    manifest_ = new CorpusManifest(build_corpus(small_corpus_config((dir_ / "corpus").string(), 0.5, 8, 8, 2)));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    fs::remove_all(dir_);
  }
  static const CorpusManifest& manifest() { return *manifest_; }
  static fs::path dir() { return dir_; }

  static inline fs::path dir_;
  static inline CorpusManifest* manifest_ = nullptr;
};

TEST_F(TrainerTest, TrainingDataRolesAndPsCounts) {
  TrainConfig c = toy_train_config(Variant::ugda);
  c.ps_fraction = 0.5;
  const TrainingData d = load_training_data(manifest(), c);
  EXPECT_EQ(d.source_train.size() + d.source_val.size(), 6u);  // 8 minus two held-out test studies
  EXPECT_EQ(d.target.size(), 10u);
  const auto chosen = select_ps_studies(manifest(), 0.5, c.seed);
  size_t with_ps = 0;
  for (const auto& t : d.target) {
    EXPECT_FALSE(t.mask.defined());
    EXPECT_EQ(t.role.has_ps, chosen.count(t.study_id) == 1);
    with_ps += t.role.has_ps;
    if (t.role.has_ps) EXPECT_EQ(t.heatmaps.sizes(), (std::vector<int64_t>{6, 16, 16, 8}));
  }
  EXPECT_EQ(with_ps, 5u);
  for (const auto& s : d.source_train) EXPECT_EQ(s.image.sizes(), (std::vector<int64_t>{1, 16, 16, 8}));

  EXPECT_TRUE(load_training_data(manifest(), toy_train_config(Variant::supervised_dual)).target.empty());
  for (const auto& t : load_training_data(manifest(), toy_train_config(Variant::ada_mask_no_ps)).target)
    EXPECT_FALSE(t.role.has_ps);
}

TEST_F(TrainerTest, BatchOrderIsAPureFunctionOfSeedAndEpoch) {
  const TrainConfig c = toy_train_config(Variant::ugda, 4);
  const TrainingData d = load_training_data(manifest(), c);
  Trainer a(c, d), b(c, d);
  const auto ids = [](const std::vector<Batch>& batches) {
    std::vector<std::string> out;
    for (const auto& x : batches) out.insert(out.end(), x.study_ids.begin(), x.study_ids.end());
    return out;
  };
  EXPECT_EQ(ids(a.pretrain_batches(3)), ids(b.pretrain_batches(3)));
  EXPECT_NE(ids(a.pretrain_batches(3)), ids(a.pretrain_batches(4)));
  const auto ab = a.adapt_batches(0, 0);
  EXPECT_EQ(static_cast<int>(ab.size()), a.adapt_iterations());
  for (const auto& [src, tgt] : ab) {
    for (const auto& r : src.roles) EXPECT_EQ(r.role, Role::source_labelled);
    for (const auto& r : tgt.roles) EXPECT_NE(r.role, Role::source_labelled);
  }
}

TEST_F(TrainerTest, DeterministicAndDescending) {
  const TrainConfig c = toy_train_config(Variant::supervised_dual, 2);
  const TrainingData d = load_training_data(manifest(), c);
  Trainer a(c, d), b(c, d);
  const Batch batch = a.pretrain_batches(0).front();
  std::vector<double> losses;
  for (int n = 0; n < 40; ++n) {
    losses.push_back(a.pretrain_step(batch).total);
    EXPECT_EQ(b.pretrain_step(batch).total, losses.back());
  }
  EXPECT_EQ(max_abs_diff(snapshot(a.models().main_parameters()), snapshot(b.models().main_parameters())), 0.0);
  EXPECT_LT(losses.back(), 0.8 * losses.front());
}

TEST_F(TrainerTest, EpochUpdatesOptimizerLearningRate) {
  TrainConfig c = toy_train_config(Variant::supervised_dual);
  c.plateau_patience = 1;
  Trainer t(c, load_training_data(manifest(), c));
  for (int e = 0; e < 4; ++e) {
    t.run_pretrain_epoch();
    EXPECT_EQ(optimizer_lr(t.main_optimizer()), t.state().lr_main);
  }
  EXPECT_EQ(t.state().history.size(), 4u);
}

TEST_F(TrainerTest, CheckpointRoundTripAndResume) {
  TrainConfig c = toy_train_config(Variant::ugda, 5);
  const TrainingData d = load_training_data(manifest(), c);
  Trainer a(c, d);
  a.run_pretrain_epoch();
  a.run_adapt_epoch();
  const std::string ckpt = (dir() / "resume.ckpt").string();
  a.save(ckpt);
  EXPECT_FALSE(fs::exists(ckpt + ".tmp"));

  Trainer b(c, d);
  b.load(ckpt);
  EXPECT_EQ(b.state(), a.state());
  EXPECT_EQ(max_abs_diff(snapshot(a.models().main_parameters()), snapshot(b.models().main_parameters())), 0.0);
  EXPECT_EQ(max_abs_diff(snapshot(a.models().discriminator_parameters()),
                         snapshot(b.models().discriminator_parameters())),
            0.0);

  const auto batches = a.adapt_batches(a.state().epoch, a.state().source_cursor);
  ASSERT_GE(batches.size(), 3u);
  for (int n = 0; n < 3; ++n) {
    const auto la = a.adapt_step(batches[n].first, batches[n].second);
    const auto lb = b.adapt_step(batches[n].first, batches[n].second);
    EXPECT_NEAR(la.total, lb.total, 1e-6);
    EXPECT_NEAR(la.disc, lb.disc, 1e-6);
  }
  EXPECT_LE(max_abs_diff(snapshot(a.models().main_parameters()), snapshot(b.models().main_parameters())), 1e-6);
  EXPECT_LE(max_abs_diff(snapshot(a.models().discriminator_parameters()),
                         snapshot(b.models().discriminator_parameters())),
            1e-6);
  EXPECT_EQ(a.state().main_steps, b.state().main_steps);

  // The file itself re-saves to identical weights.
  const LoadedModel m = load_model(ckpt);
  EXPECT_EQ(m.state.phase, "adapt");
  EXPECT_EQ(train_config_to_json(m.config), train_config_to_json(c));
}

TEST_F(TrainerTest, IncompatibleOrBrokenCheckpointsRejected) {
  const TrainConfig c = toy_train_config(Variant::ugda);
  const TrainingData d = load_training_data(manifest(), c);
  Trainer a(c, d);
  const std::string ckpt = (dir() / "compat.ckpt").string();
  a.save(ckpt);

  TrainConfig other = c;
  other.heatmap_sigma = 3.0;
  EXPECT_THROW(Trainer(other, d).load(ckpt), CheckpointError);
  other = c;
  other.seg_net.stage_channels = {4, 8, 16};
  EXPECT_THROW(Trainer(other, d).load_pretrained(ckpt), CheckpointError);
  other = c;
  other.variant = Variant::dextr;
  EXPECT_THROW(Trainer(other, d).load_pretrained(ckpt), CheckpointError);
  other = c;
  other.variant = Variant::ada_mask_with_ps;
  EXPECT_THROW(Trainer(other, d).load(ckpt), CheckpointError);  // same feed, different discriminator input

  const std::string junk = (dir() / "junk.ckpt").string();
  { std::ofstream(junk) << "not a checkpoint"; }
  EXPECT_THROW(Trainer(c, d).load(junk), CheckpointError);
  EXPECT_THROW(load_model(junk), CheckpointError);
  EXPECT_THROW(load_model((dir() / "missing.ckpt").string()), CheckpointError);
}

TEST_F(TrainerTest, PretrainedWeightsSeedAdaptation) {
  const TrainConfig dual = toy_train_config(Variant::supervised_dual, 3);
  Trainer p(dual, load_training_data(manifest(), dual));
  p.run_pretrain_epoch();
  const std::string ckpt = (dir() / "pre.ckpt").string();
  p.save(ckpt);

  const TrainConfig c = toy_train_config(Variant::ugda, 3);
  Trainer t(c, load_training_data(manifest(), c));
  t.load_pretrained(ckpt);
  EXPECT_EQ(t.state().phase, "adapt");
  EXPECT_EQ(max_abs_diff(snapshot(t.models().main_parameters()), snapshot(p.models().main_parameters())), 0.0);
  ASSERT_NE(t.disc_optimizer(), nullptr);
  EXPECT_EQ(optimizer_lr(*t.disc_optimizer()), 3e-4);
}

TEST_F(TrainerTest, MaskAdaWithoutPointsKeepsExtAtZero) {
  TrainConfig c = toy_train_config(Variant::ada_mask_no_ps);
  c.adapt_epochs = 2;
  Trainer t(c, load_training_data(manifest(), c));
  t.pretrain();
  t.adapt();
  int adapt_records = 0;
  for (const auto& r : t.state().history)
    if (r.phase == "adapt") {
      ++adapt_records;
      EXPECT_EQ(r.losses.at("ext"), 0.0);
    }
  EXPECT_EQ(adapt_records, 2);
  EXPECT_EQ(t.state().main_steps, t.state().disc_steps);
  EXPECT_EQ(t.state().main_steps, 2 * t.adapt_iterations());
}

TEST_F(TrainerTest, TrainingNeverOpensHiddenMasks) {
  std::set<std::string> hidden;
  for (const auto& s : manifest().evaluation_studies) hidden.insert(io::canonical_path(manifest().resolve(s.hidden_mask)));
  for (Variant v : {Variant::supervised_dual, Variant::dextr, Variant::ada_mask_no_ps, Variant::ada_mask_with_ps,
                    Variant::ugda}) {
    io::AccessRecorder rec;
    const TrainConfig c = toy_train_config(v);
    Trainer t(c, load_training_data(manifest(), c));
    t.pretrain();
    if (is_adaptive(v)) t.adapt();
    const auto paths = rec.paths();
    EXPECT_FALSE(paths.empty());
    for (const auto& p : paths) EXPECT_EQ(hidden.count(io::canonical_path(p)), 0u) << to_string(v) << ": " << p;
  }
  // Positive control: scoring does read them.
  io::AccessRecorder rec;
  const TrainConfig c = toy_train_config(Variant::supervised_dual);
  Trainer t(c, load_training_data(manifest(), c));
  const std::string preds = (dir() / "audit_preds").string();
  predict_evaluation(t.models(), c, manifest(), preds);
  evaluate_manifest(preds, manifest());
  bool any = false;
  for (const auto& p : rec.paths()) any = any || hidden.count(io::canonical_path(p)) == 1;
  EXPECT_TRUE(any);
}

TEST_F(TrainerTest, RunVariantWritesTheRunDirectory) {
  TrainConfig c = toy_train_config(Variant::ugda, 1);
  c.ps_fraction = 0.5;
  const fs::path out = dir() / "run";
  const RunReport r = run_variant(manifest(), c, out.string());
  for (const char* f : {"config.json", "run.json", "pretrain.ckpt", "model.ckpt", "train_state.json", "report.json",
                        "per_volume.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(r.per_volume.size() + r.errors.size(), 2u);
  EXPECT_EQ(r.variant, "ugda");
  EXPECT_EQ(r.ps_fraction, 0.5);
  for (const auto& s : manifest().evaluation_studies) EXPECT_TRUE(fs::exists(out / "predictions" / (s.study_id + ".nii.gz")));
  const RunReport again = evaluate_run_dir(out.string());
  EXPECT_EQ(again.per_volume, r.per_volume);
  // NaN aggregates (all-empty toy predictions) defeat ==, so compare the canonical text.
  EXPECT_EQ(report_to_json(load_report((out / "report.json").string())), report_to_json(r));
}

}  // namespace
}  // namespace ugda

#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ugda/corpus.hpp"
#include "ugda/grid.hpp"
#include "ugda/heatmap.hpp"
#include "ugda/objective.hpp"
#include "ugda/report.hpp"

namespace ugda {

struct TrainConfig {
  Variant variant = Variant::ugda;
  double ps_fraction = 1.0;
  double lambda_adv = kDefaultLambdaAdv;
  double lr_main = 3e-3;
  double lr_disc = 3e-4;
  double plateau_factor = 0.1;
  int plateau_patience = 15;
  /// Phase 1 stops after 2 x patience epochs without improvement or here.
  int pretrain_max_epochs = 60;
  int adapt_epochs = 20;
  uint64_t seed = 0;
  int source_batch = 2;
  int target_batch = 2;
  /// Grid the networks run on; volumes are resampled to it.
  Shape3 model_shape{32, 32, 24};
  double heatmap_sigma = kDefaultHeatmapSigma;
  /// Intensity window mapped to [0, 1]. Phantom intensities already lie there.
  double window_low = 0.0;
  double window_high = 1.0;
  PhnnConfig heatmap_net = PhnnConfig::heatmap_net();
  PhnnConfig seg_net = PhnnConfig::seg_net();
  DiscriminatorConfig discriminator;
  DiscSourceInput disc_source_input = DiscSourceInput::pred;
  /// Single-threaded kernels for bitwise-reproducible runs.
  bool deterministic = true;
  /// When set, phase 1 is skipped and h/s start from this checkpoint.
  std::string init_checkpoint;

  void validate() const;
  LossWeights loss_weights() const;
  AdaptationSettings adaptation_settings() const;
};

std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::string& path);

struct RunningMean {
  double mean = 0.0;
  int64_t count = 0;
  void add(double x) {
    ++count;
    mean += (x - mean) / static_cast<double>(count);
  }
  bool operator==(const RunningMean&) const = default;
};

struct EpochRecord {
  std::string phase;
  int epoch = 0;
  double val_dsc = 0.0;
  double lr_main = 0.0;
  double lr_disc = 0.0;
  std::map<std::string, double> losses;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainState {
  std::string phase = "pretrain";
  int epoch = 0;  // completed epochs in `phase`
  int64_t global_step = 0;
  int64_t main_steps = 0;
  int64_t disc_steps = 0;
  /// Position in the endless source stream used during adaptation.
  int64_t source_cursor = 0;
  double best_val_dsc = -std::numeric_limits<double>::infinity();
  int plateau_counter = 0;
  int epochs_since_best = 0;
  double lr_main = 3e-3;
  double lr_disc = 3e-4;
  std::map<std::string, RunningMean> running;
  std::vector<EpochRecord> history;

  bool operator==(const TrainState&) const = default;
};

std::string train_state_to_json(const TrainState& s);
TrainState train_state_from_json(const std::string& text);

/// Rounds to 12 significant digits so repeated decay lands on exact decimals.
double snap_learning_rate(double lr);

/// Once-per-epoch reduce-on-plateau rule on lr_main. lr_disc is left alone.
TrainState plateau_step(TrainState state, double val_dsc, const TrainConfig& config);

/// Deterministic 70/20/10 partition of source indices.
struct SourceSplit {
  std::vector<size_t> train;
  std::vector<size_t> test;
  std::vector<size_t> val;
};
SourceSplit split_source(size_t count, uint64_t seed);

/// Study ids whose extreme points are used during adaptation: ceil(f * N)
/// over all target studies (evaluation included), taking the same fraction
/// of evaluation studies as of the rest.
std::set<std::string> select_ps_studies(const CorpusManifest& manifest, double fraction, uint64_t seed);

/// Maps native voxel indices onto the model grid (voxel-centre aligned).
ExtremePointSet to_model_points(const ExtremePointSet& points, const Shape3& native, const Shape3& model);

/// (1, X, Y, Z) windowed image at model resolution.
torch::Tensor model_image(const Volume& v, const TrainConfig& config);
/// (6, X, Y, Z) heatmaps at model resolution for native-grid points.
torch::Tensor model_heatmaps(const ExtremePointSet& points, const Shape3& native, const TrainConfig& config);

struct TrainingItem {
  std::string study_id;
  BatchRole role;
  torch::Tensor image;     // (1, X, Y, Z)
  torch::Tensor heatmaps;  // (6, X, Y, Z), undefined without points
  torch::Tensor mask;      // (1, X, Y, Z), undefined without a mask
};

/// Everything the training phases read. Built without touching hidden masks.
struct TrainingData {
  std::vector<TrainingItem> source_train;
  std::vector<TrainingItem> source_val;
  std::vector<TrainingItem> target;
};

TrainingData load_training_data(const CorpusManifest& manifest, const TrainConfig& config);

Batch collate(const std::vector<const TrainingItem*>& items, const torch::Device& device);

/// Compute device from UGDA_DEVICE ("cpu" default, "cuda", "cuda:N").
torch::Device resolve_device();

struct StepLosses {
  double seg = 0.0;
  double ext = 0.0;
  double adv = 0.0;
  double disc = 0.0;
  double sup = 0.0;
  double total = 0.0;
};

class Trainer {
 public:
  Trainer(TrainConfig config, TrainingData data);

  const TrainConfig& config() const { return config_; }
  const TrainState& state() const { return state_; }
  ModelSet& models() { return models_; }
  const TrainingData& data() const { return data_; }
  torch::optim::Adam& main_optimizer() { return *main_opt_; }
  torch::optim::Adam* disc_optimizer() { return disc_opt_.get(); }

  /// One supervised step on a source batch.
  StepLosses pretrain_step(const Batch& source);
  /// One discriminator step followed by one main step.
  StepLosses adapt_step(const Batch& source, const Batch& target);

  /// Batches of epoch `epoch`, a pure function of (seed, epoch).
  std::vector<Batch> pretrain_batches(int epoch) const;
  /// Source and target batches of an adaptation epoch starting at `source_cursor`.
  std::vector<std::pair<Batch, Batch>> adapt_batches(int epoch, int64_t source_cursor) const;
  int adapt_iterations() const;

  /// Mean DSC on the internal source validation split at model resolution.
  double validate();

  /// Phase 1 with the convergence gate; ends holding the best-validation weights.
  void pretrain();
  /// Phase 2; keeps the final weights.
  void adapt();
  void run_pretrain_epoch();
  void run_adapt_epoch();

  void save(const std::string& path) const;
  /// Restores weights, optimizers, state and RNG. Throws CheckpointError on
  /// an incompatible configuration.
  void load(const std::string& path);
  /// Copies h and s weights from a phase-1 checkpoint and enters phase 2.
  void load_pretrained(const std::string& path);

 private:
  void begin_adaptation();
  void set_lr(torch::optim::Adam& opt, double lr);
  void finish_epoch(double val_dsc);

  TrainConfig config_;
  TrainingData data_;
  torch::Device device_;
  ModelSet models_;
  std::unique_ptr<torch::optim::Adam> main_opt_;
  std::unique_ptr<torch::optim::Adam> disc_opt_;
  TrainState state_;
};

/// Contents of a checkpoint file, for inference.
struct LoadedModel {
  TrainConfig config;
  TrainState state;
  ModelSet models;
};

LoadedModel load_model(const std::string& path);

/// Throws CheckpointError when h/s of `checkpoint` cannot be used by `config`.
void require_compatible(const TrainConfig& checkpoint, const TrainConfig& config);

enum class Upsample { probability_linear, mask_nearest };

HeatmapFeed evaluation_feed(Variant v, bool points_available);

/// Binarized native-grid prediction for one volume.
SegmentationMask predict_mask(ModelSet& models, const TrainConfig& config, const Volume& volume,
                              const std::optional<ExtremePointSet>& points, HeatmapFeed feed,
                              Upsample upsample = Upsample::probability_linear);

/// Writes predictions/<id>.nii.gz for every evaluation study.
void predict_evaluation(ModelSet& models, const TrainConfig& config, const CorpusManifest& manifest,
                        const std::string& out_dir);

/// Scores predictions in `pred_dir` against the manifest's hidden masks.
RunReport evaluate_manifest(const std::string& pred_dir, const CorpusManifest& manifest);

/// Full pipeline into `out_dir`: config.json, run.json, pretrain.ckpt,
/// model.ckpt, predictions/, report.json, per_volume.csv.
RunReport run_variant(const CorpusManifest& manifest, const TrainConfig& config, const std::string& out_dir);

/// Re-scores an existing run directory.
RunReport evaluate_run_dir(const std::string& run_dir);

}  // namespace ugda

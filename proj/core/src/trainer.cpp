#include "ugda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ugda/errors.hpp"
#include "ugda/file_audit.hpp"
#include "ugda/intensity.hpp"
#include "ugda/measures.hpp"
#include "ugda/nifti.hpp"

namespace ugda {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kCheckpointFormat = "ugda-checkpoint";
constexpr int64_t kCheckpointVersion = 1;

std::string read_text(const std::string& path) {
  io::record_open(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::mt19937_64 stream_rng(uint64_t seed, const std::string& tag, int64_t index) {
  return std::mt19937_64(study_seed(seed, tag + "/" + std::to_string(index)));
}

std::vector<size_t> permutation(size_t n, std::mt19937_64 rng) {
  std::vector<size_t> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

ordered_json phnn_to_json(const PhnnConfig& c) {
  return {{"in_channels", c.in_channels},   {"out_channels", c.out_channels},
          {"stage_channels", c.stage_channels}, {"convs_per_stage", c.convs_per_stage},
          {"deep_supervision", c.deep_supervision}};
}

PhnnConfig phnn_from_json(const json& j, PhnnConfig c) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.stage_channels = j.value("stage_channels", c.stage_channels);
  c.convs_per_stage = j.value("convs_per_stage", c.convs_per_stage);
  c.deep_supervision = j.value("deep_supervision", c.deep_supervision);
  return c;
}

ordered_json disc_to_json(const DiscriminatorConfig& c) {
  return {{"in_channels", c.in_channels}, {"strided_channels", c.strided_channels}, {"dilations", c.dilations},
          {"dilated_channels", c.dilated_channels}, {"leaky_slope", c.leaky_slope}};
}

DiscriminatorConfig disc_from_json(const json& j, DiscriminatorConfig c) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.strided_channels = j.value("strided_channels", c.strided_channels);
  c.dilations = j.value("dilations", c.dilations);
  c.dilated_channels = j.value("dilated_channels", c.dilated_channels);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  return c;
}

ordered_json double_or_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

/// Grid (x fastest) to a (X, Y, Z) tensor.
template <typename G>
torch::Tensor grid_tensor(const G& g) {
  const auto& s = g.shape();
  std::vector<float> values(g.voxels().begin(), g.voxels().end());
  return torch::tensor(values, torch::kFloat).view({s.nz, s.ny, s.nx}).permute({2, 1, 0}).contiguous();
}

/// (X, Y, Z) tensor back to a grid.
ProbabilityMap tensor_probability(const torch::Tensor& t, const Shape3& shape, const Spacing3& spacing,
                                  const std::string& id) {
  const auto cpu = t.detach().to(torch::kCPU, torch::kFloat).reshape({shape.nx, shape.ny, shape.nz});
  const auto xfast = cpu.permute({2, 1, 0}).contiguous();
  ProbabilityMap p(shape, spacing, id);
  std::copy_n(xfast.data_ptr<float>(), p.size(), p.voxels().begin());
  return p;
}

/// Model-grid spacing covering the same extent as the native grid.
Spacing3 model_spacing(const Shape3& native, const Spacing3& spacing, const Shape3& model) {
  return {spacing[0] * static_cast<double>(native.nx) / static_cast<double>(model.nx),
          spacing[1] * static_cast<double>(native.ny) / static_cast<double>(model.ny),
          spacing[2] * static_cast<double>(native.nz) / static_cast<double>(model.nz)};
}

void set_num_threads_for(const TrainConfig& c) {
  if (c.deterministic) at::set_num_threads(1);
}

ModelSet create_models(const TrainConfig& c) {
  return ModelSet::create(c.variant, c.heatmap_net, c.seg_net, c.discriminator);
}

template <typename Fn>
auto checkpoint_guard(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint " + path + " (format " + kCheckpointFormat + " v" +
                          std::to_string(kCheckpointVersion) + "): " + e.what());
  }
}

struct ArchiveHeader {
  TrainConfig config;
  TrainState state;
};

ArchiveHeader read_header(torch::serialize::InputArchive& in, const std::string& path) {
  c10::IValue format, version, config, state;
  if (!in.try_read("format", format) || !format.isString() || format.toStringRef() != kCheckpointFormat)
    throw CheckpointError(path + ": not a ugda checkpoint");
  if (!in.try_read("version", version) || !version.isInt())
    throw CheckpointError(path + ": checkpoint version missing");
  if (version.toInt() != kCheckpointVersion)
    throw CheckpointError(path + ": checkpoint version " + std::to_string(version.toInt()) + ", expected " +
                          std::to_string(kCheckpointVersion));
  in.read("config", config);
  in.read("state", state);
  return {train_config_from_json(config.toStringRef()), train_state_from_json(state.toStringRef())};
}

bool has_key(torch::serialize::InputArchive& in, const std::string& key) {
  const auto keys = in.keys();
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

void load_module(torch::serialize::InputArchive& in, const std::string& key, torch::nn::Module& m) {
  torch::serialize::InputArchive sub;
  if (!in.try_read(key, sub)) throw CheckpointError("checkpoint lacks '" + key + "' weights");
  m.load(sub);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(ps_fraction > 0.0 && ps_fraction <= 1.0)) throw InvalidArgument("ps_fraction must lie in (0, 1]");
  if (!(lr_main > 0.0) || !(lr_disc > 0.0)) throw InvalidArgument("learning rates must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw InvalidArgument("plateau_factor must lie in (0, 1)");
  if (plateau_patience < 1) throw InvalidArgument("plateau_patience must be at least 1");
  if (pretrain_max_epochs < 0 || adapt_epochs < 0) throw InvalidArgument("epoch counts must be non-negative");
  if (source_batch < 1 || target_batch < 1) throw InvalidArgument("batch sizes must be positive");
  if (!model_shape.valid()) throw InvalidArgument("model_shape must be positive");
  if (!(heatmap_sigma > 0.0)) throw InvalidArgument("heatmap_sigma must be positive");
  if (!(window_low < window_high)) throw InvalidArgument("window_low must be below window_high");
  loss_weights().validate();
  heatmap_net.validate();
  seg_net.validate();
  if (heatmap_net.in_channels != 1 || heatmap_net.out_channels != 6)
    throw InvalidArgument("heatmap net must map 1 channel to 6");
  if (seg_net.in_channels != 2 || seg_net.out_channels != 1) throw InvalidArgument("seg net must map 2 channels to 1");
  for (const auto* net : {&heatmap_net, &seg_net}) {
    const int64_t f = net->stride_product();
    if (model_shape.nx % f || model_shape.ny % f || model_shape.nz % f)
      throw InvalidArgument("model_shape must be divisible by the network stride " + std::to_string(f));
  }
  if (is_adaptive(variant)) {
    DiscriminatorConfig d = discriminator;
    d.in_channels = discriminator_channels(variant);
    d.validate();
  }
}

LossWeights TrainConfig::loss_weights() const {
  LossWeights w;
  w.lambda_adv = lambda_adv;
  return w;
}

AdaptationSettings TrainConfig::adaptation_settings() const {
  return {variant, loss_weights(), disc_source_input};
}

std::string train_config_to_json(const TrainConfig& c) {
  ordered_json j;
  j["variant"] = std::string(to_string(c.variant));
  j["ps_fraction"] = c.ps_fraction;
  j["lambda_adv"] = c.lambda_adv;
  j["lr_main"] = c.lr_main;
  j["lr_disc"] = c.lr_disc;
  j["plateau_factor"] = c.plateau_factor;
  j["plateau_patience"] = c.plateau_patience;
  j["optimizer"] = "adam";
  j["pretrain_max_epochs"] = c.pretrain_max_epochs;
  j["adapt_epochs"] = c.adapt_epochs;
  j["seed"] = c.seed;
  j["source_batch"] = c.source_batch;
  j["target_batch"] = c.target_batch;
  j["model_shape"] = {c.model_shape.nx, c.model_shape.ny, c.model_shape.nz};
  j["heatmap_sigma"] = c.heatmap_sigma;
  j["window"] = {c.window_low, c.window_high};
  j["heatmap_net"] = phnn_to_json(c.heatmap_net);
  j["seg_net"] = phnn_to_json(c.seg_net);
  j["discriminator"] = disc_to_json(c.discriminator);
  j["disc_source_input"] = std::string(to_string(c.disc_source_input));
  j["deterministic"] = c.deterministic;
  j["init_checkpoint"] = c.init_checkpoint;
  return j.dump(2) + "\n";
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw InvalidArgument(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw InvalidArgument("train config must be a JSON object");
  TrainConfig c;
  try {
    if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
    c.ps_fraction = j.value("ps_fraction", c.ps_fraction);
    c.lambda_adv = j.value("lambda_adv", c.lambda_adv);
    c.lr_main = j.value("lr_main", c.lr_main);
    c.lr_disc = j.value("lr_disc", c.lr_disc);
    c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    if (j.value("optimizer", std::string("adam")) != "adam") throw InvalidArgument("only the adam optimizer is supported");
    c.pretrain_max_epochs = j.value("pretrain_max_epochs", c.pretrain_max_epochs);
    c.adapt_epochs = j.value("adapt_epochs", c.adapt_epochs);
    c.seed = j.value("seed", c.seed);
    c.source_batch = j.value("source_batch", c.source_batch);
    c.target_batch = j.value("target_batch", c.target_batch);
    if (j.contains("model_shape")) {
      const auto s = j["model_shape"].get<std::vector<int64_t>>();
      if (s.size() != 3) throw InvalidArgument("model_shape needs three entries");
      c.model_shape = {s[0], s[1], s[2]};
    }
    c.heatmap_sigma = j.value("heatmap_sigma", c.heatmap_sigma);
    if (j.contains("window")) {
      const auto w = j["window"].get<std::vector<double>>();
      if (w.size() != 2) throw InvalidArgument("window needs two entries");
      c.window_low = w[0];
      c.window_high = w[1];
    }
    if (j.contains("heatmap_net")) c.heatmap_net = phnn_from_json(j["heatmap_net"], c.heatmap_net);
    if (j.contains("seg_net")) c.seg_net = phnn_from_json(j["seg_net"], c.seg_net);
    if (j.contains("discriminator")) c.discriminator = disc_from_json(j["discriminator"], c.discriminator);
    if (j.contains("disc_source_input"))
      c.disc_source_input = parse_disc_source_input(j["disc_source_input"].get<std::string>());
    c.deterministic = j.value("deterministic", c.deterministic);
    c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) { return train_config_from_json(read_text(path)); }

std::string train_state_to_json(const TrainState& s) {
  ordered_json j;
  j["phase"] = s.phase;
  j["epoch"] = s.epoch;
  j["global_step"] = s.global_step;
  j["main_steps"] = s.main_steps;
  j["disc_steps"] = s.disc_steps;
  j["source_cursor"] = s.source_cursor;
  j["best_val_dsc"] = double_or_null(s.best_val_dsc);
  j["plateau_counter"] = s.plateau_counter;
  j["epochs_since_best"] = s.epochs_since_best;
  j["lr_main"] = s.lr_main;
  j["lr_disc"] = s.lr_disc;
  ordered_json running = ordered_json::object();
  for (const auto& [k, v] : s.running) running[k] = {{"mean", v.mean}, {"count", v.count}};
  j["running"] = running;
  ordered_json history = ordered_json::array();
  for (const auto& h : s.history) {
    history.push_back({{"phase", h.phase},
                       {"epoch", h.epoch},
                       {"val_dsc", h.val_dsc},
                       {"lr_main", h.lr_main},
                       {"lr_disc", h.lr_disc},
                       {"losses", h.losses}});
  }
  j["history"] = history;
  return j.dump(2) + "\n";
}

TrainState train_state_from_json(const std::string& text) {
  const json j = json::parse(text);
  TrainState s;
  s.phase = j.at("phase").get<std::string>();
  s.epoch = j.at("epoch").get<int>();
  s.global_step = j.at("global_step").get<int64_t>();
  s.main_steps = j.at("main_steps").get<int64_t>();
  s.disc_steps = j.at("disc_steps").get<int64_t>();
  s.source_cursor = j.at("source_cursor").get<int64_t>();
  s.best_val_dsc = j.at("best_val_dsc").is_null() ? -std::numeric_limits<double>::infinity()
                                                  : j.at("best_val_dsc").get<double>();
  s.plateau_counter = j.at("plateau_counter").get<int>();
  s.epochs_since_best = j.at("epochs_since_best").get<int>();
  s.lr_main = j.at("lr_main").get<double>();
  s.lr_disc = j.at("lr_disc").get<double>();
  for (const auto& [k, v] : j.at("running").items()) s.running[k] = {v.at("mean").get<double>(), v.at("count").get<int64_t>()};
  for (const auto& h : j.at("history")) {
    s.history.push_back({h.at("phase").get<std::string>(), h.at("epoch").get<int>(), h.at("val_dsc").get<double>(),
                         h.at("lr_main").get<double>(), h.at("lr_disc").get<double>(),
                         h.at("losses").get<std::map<std::string, double>>()});
  }
  return s;
}

double snap_learning_rate(double lr) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", lr);
  return std::strtod(buf, nullptr);
}

TrainState plateau_step(TrainState state, double val_dsc, const TrainConfig& config) {
  if (val_dsc > state.best_val_dsc) {
    state.best_val_dsc = val_dsc;
    state.plateau_counter = 0;
    state.epochs_since_best = 0;
    return state;
  }
  ++state.epochs_since_best;
  if (++state.plateau_counter >= config.plateau_patience) {
    state.lr_main = snap_learning_rate(state.lr_main * config.plateau_factor);
    state.plateau_counter = 0;
  }
  return state;
}

SourceSplit split_source(size_t count, uint64_t seed) {
  const auto order = permutation(count, stream_rng(seed, "source-split", 0));
  const size_t n_val = count >= 2 ? std::max<size_t>(1, static_cast<size_t>(std::lround(0.1 * count))) : 0;
  const size_t n_test = count >= 3 ? static_cast<size_t>(std::lround(0.2 * count)) : 0;
  SourceSplit s;
  for (size_t n = 0; n < count; ++n) {
    if (n < n_test) {
      s.test.push_back(order[n]);
    } else if (n < n_test + n_val) {
      s.val.push_back(order[n]);
    } else {
      s.train.push_back(order[n]);
    }
  }
  for (auto* v : {&s.train, &s.test, &s.val}) std::sort(v->begin(), v->end());
  return s;
}

std::set<std::string> select_ps_studies(const CorpusManifest& manifest, double fraction, uint64_t seed) {
  const int n_target = static_cast<int>(manifest.target_count());
  const int n_eval_all = static_cast<int>(manifest.evaluation_studies.size());
  const int n_non_all = static_cast<int>(manifest.target_ps_studies.size());
  const int n_total = ps_labelled_count(n_target, fraction);
  int n_eval = std::min(n_eval_all, ps_labelled_count(n_eval_all, fraction));
  int n_non = n_total - n_eval;
  if (n_non > n_non_all) {
    n_eval = std::min(n_eval_all, n_eval + (n_non - n_non_all));
    n_non = n_non_all;
  }
  std::set<std::string> chosen;
  const auto non_order = permutation(manifest.target_ps_studies.size(), stream_rng(seed, "ps-select-target", 0));
  for (int n = 0; n < n_non; ++n) chosen.insert(manifest.target_ps_studies[non_order[static_cast<size_t>(n)]].study_id);
  const auto eval_order = permutation(manifest.evaluation_studies.size(), stream_rng(seed, "ps-select-eval", 0));
  for (int n = 0; n < n_eval; ++n) chosen.insert(manifest.evaluation_studies[eval_order[static_cast<size_t>(n)]].study_id);
  return chosen;
}

ExtremePointSet to_model_points(const ExtremePointSet& points, const Shape3& native, const Shape3& model) {
  const auto map = [](int64_t c, int64_t n, int64_t m) {
    const auto v = static_cast<int64_t>(std::floor((static_cast<double>(c) + 0.5) * static_cast<double>(m) /
                                                   static_cast<double>(n)));
    return std::clamp<int64_t>(v, 0, m - 1);
  };
  std::array<Index3, kExtremePointCount> out{};
  for (int s = 0; s < kExtremePointCount; ++s) {
    const Index3& p = points.slot(s);
    out[static_cast<size_t>(s)] = {map(p.i, native.nx, model.nx), map(p.j, native.ny, model.ny),
                                   map(p.k, native.nz, model.nz)};
  }
  return ExtremePointSet(out, model_spacing(native, points.spacing_mm(), model), points.source(), points.study_id());
}

torch::Tensor model_image(const Volume& v, const TrainConfig& config) {
  const Volume windowed = window_normalize(v, config.window_low, config.window_high);
  const Volume resampled =
      v.shape() == config.model_shape ? windowed : resample_volume(windowed, config.model_shape, Interpolation::linear);
  return grid_tensor(resampled).unsqueeze(0);
}

torch::Tensor model_heatmaps(const ExtremePointSet& points, const Shape3& native, const TrainConfig& config) {
  const HeatmapVolume h =
      render_heatmaps(to_model_points(points, native, config.model_shape), config.model_shape, config.heatmap_sigma);
  std::vector<torch::Tensor> channels;
  for (const auto& c : h.channels) channels.push_back(grid_tensor(c));
  return torch::stack(channels, 0);
}

TrainingData load_training_data(const CorpusManifest& manifest, const TrainConfig& config) {
  config.validate();
  manifest.validate();
  if (manifest.source_studies.empty()) throw InvalidArgument("training needs at least one source study");

  TrainingData data;
  const SourceSplit split = split_source(manifest.source_studies.size(), manifest.seed);
  const auto load_source = [&](size_t index) {
    const SourceStudy& s = manifest.source_studies[index];
    const Volume v = read_volume(manifest.resolve(s.volume));
    const SegmentationMask m = read_mask(manifest.resolve(s.mask));
    require_same_shape(v, m, "source study");
    TrainingItem item;
    item.study_id = s.study_id;
    item.role = BatchRole::source();
    item.image = model_image(v, config);
    item.heatmaps = model_heatmaps(extract_extreme_points(m), m.shape(), config);
    const SegmentationMask small = m.shape() == config.model_shape ? m : resample_mask(m, config.model_shape);
    item.mask = grid_tensor(small).unsqueeze(0);
    return item;
  };
  for (size_t i : split.train) data.source_train.push_back(load_source(i));
  for (size_t i : split.val) data.source_val.push_back(load_source(i));

  // Only adversarial variants look at the target domain at all.
  if (!is_adaptive(config.variant)) return data;
  const bool use_points = config.variant != Variant::ada_mask_no_ps;
  const std::set<std::string> with_ps =
      use_points ? select_ps_studies(manifest, config.ps_fraction, config.seed) : std::set<std::string>{};
  const auto load_target = [&](const std::string& id, const std::string& volume, const std::string& ps) {
    const Volume v = read_volume(manifest.resolve(volume));
    TrainingItem item;
    item.study_id = id;
    item.image = model_image(v, config);
    if (!ps.empty() && with_ps.count(id)) {
      const ExtremePointSet points = read_extreme_points(manifest.resolve(ps));
      points.require_inside(v.shape());
      item.heatmaps = model_heatmaps(points, v.shape(), config);
      item.role = BatchRole::target_with_ps();
    } else {
      item.role = BatchRole::target_unlabelled();
    }
    data.target.push_back(std::move(item));
  };
  for (const auto& s : manifest.target_ps_studies) load_target(s.study_id, s.volume, s.ps);
  for (const auto& s : manifest.target_unlabelled_studies) load_target(s.study_id, s.volume, {});
  // Evaluation volumes take part with their masks left untouched.
  for (const auto& s : manifest.evaluation_studies) load_target(s.study_id, s.volume, s.ps);
  return data;
}

Batch collate(const std::vector<const TrainingItem*>& items, const torch::Device& device) {
  if (items.empty()) throw InvalidArgument("collate: empty batch");
  Batch b;
  std::vector<torch::Tensor> images, heatmaps, masks;
  const auto like = items.front()->image;
  for (const auto* item : items) {
    images.push_back(item->image);
    heatmaps.push_back(item->heatmaps.defined() ? item->heatmaps : torch::zeros({6, like.size(1), like.size(2), like.size(3)}));
    masks.push_back(item->mask.defined() ? item->mask : torch::zeros_like(like));
    b.roles.push_back(item->role);
    b.study_ids.push_back(item->study_id);
  }
  b.image = torch::stack(images, 0).to(device);
  b.heatmaps = torch::stack(heatmaps, 0).to(device);
  b.mask = torch::stack(masks, 0).to(device);
  return b;
}

torch::Device resolve_device() {
  const char* env = std::getenv("UGDA_DEVICE");
  const std::string name = env && *env ? env : "cpu";
  try {
    torch::Device d(name);
    if (d.is_cuda() && !torch::cuda::is_available()) throw InvalidArgument("UGDA_DEVICE=" + name + " but CUDA is unavailable");
    return d;
  } catch (const c10::Error&) {
    throw InvalidArgument("UGDA_DEVICE: unknown device '" + name + "'");
  }
}

Trainer::Trainer(TrainConfig config, TrainingData data)
    : config_(std::move(config)), data_(std::move(data)), device_(resolve_device()) {
  config_.validate();
  if (data_.source_train.empty()) throw InvalidArgument("training needs at least one source study");
  set_num_threads_for(config_);
  torch::manual_seed(config_.seed);
  models_ = create_models(config_);
  models_.h->to(device_);
  models_.s->to(device_);
  if (models_.d) models_.d->to(device_);
  main_opt_ = std::make_unique<torch::optim::Adam>(models_.main_parameters(), torch::optim::AdamOptions(config_.lr_main));
  state_.lr_main = config_.lr_main;
  state_.lr_disc = config_.lr_disc;
}

void Trainer::set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

StepLosses Trainer::pretrain_step(const Batch& source) {
  models_.train();
  const SupervisedTerms terms = pretrain_loss(models_, source, config_.variant, config_.loss_weights());
  const torch::Tensor total = terms.total();
  main_opt_->zero_grad();
  total.backward();
  main_opt_->step();
  ++state_.global_step;
  StepLosses l;
  l.seg = terms.seg.item<double>();
  l.ext = terms.ext.item<double>();
  l.sup = l.total = total.item<double>();
  state_.running["seg"].add(l.seg);
  state_.running["ext"].add(l.ext);
  state_.running["sup"].add(l.sup);
  return l;
}

StepLosses Trainer::adapt_step(const Batch& source, const Batch& target) {
  if (!disc_opt_) throw InvalidArgument("adapt_step: trainer is not in the adaptation phase");
  models_.train();
  const AdaptationSettings settings = config_.adaptation_settings();
  const AdaptationForward fwd = adaptation_forward(models_, source, target, config_.variant);

  const torch::Tensor ld = discriminator_loss(models_, fwd, source, settings);
  disc_opt_->zero_grad();
  ld.backward();
  disc_opt_->step();
  ++state_.disc_steps;

  // The main networks are untouched by the step above, so `fwd` is still
  // their output; only the discriminator sees its new weights.
  const MainTerms terms = main_loss(models_, fwd, source, target, settings);
  main_opt_->zero_grad();
  terms.total.backward();
  main_opt_->step();
  ++state_.main_steps;
  ++state_.global_step;

  StepLosses l;
  l.seg = terms.seg.item<double>();
  l.ext = terms.ext.item<double>();
  l.adv = terms.adv.item<double>();
  l.sup = terms.sup.item<double>();
  l.total = terms.total.item<double>();
  l.disc = ld.item<double>();
  for (const auto& [k, v] : {std::pair{"seg", l.seg}, {"ext", l.ext}, {"adv", l.adv}, {"sup", l.sup}, {"disc", l.disc}})
    state_.running[k].add(v);
  return l;
}

std::vector<Batch> Trainer::pretrain_batches(int epoch) const {
  const auto order = permutation(data_.source_train.size(), stream_rng(config_.seed, "pretrain", epoch));
  std::vector<Batch> batches;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config_.source_batch)) {
    std::vector<const TrainingItem*> items;
    for (size_t n = start; n < std::min(order.size(), start + static_cast<size_t>(config_.source_batch)); ++n)
      items.push_back(&data_.source_train[order[n]]);
    batches.push_back(collate(items, device_));
  }
  return batches;
}

int Trainer::adapt_iterations() const {
  const auto n = static_cast<int>(data_.target.size());
  return (n + config_.target_batch - 1) / config_.target_batch;
}

std::vector<std::pair<Batch, Batch>> Trainer::adapt_batches(int epoch, int64_t source_cursor) const {
  if (data_.target.empty()) throw InvalidArgument("adaptation needs target studies");
  std::vector<size_t> labelled, unlabelled;
  for (size_t n = 0; n < data_.target.size(); ++n) (data_.target[n].role.has_ps ? labelled : unlabelled).push_back(n);
  const auto pl = permutation(labelled.size(), stream_rng(config_.seed, "target-ps", epoch));
  const auto pu = permutation(unlabelled.size(), stream_rng(config_.seed, "target-unlabelled", epoch));

  // Spread labelled items evenly through the epoch.
  const size_t total = data_.target.size();
  std::vector<size_t> order;
  size_t il = 0, iu = 0;
  for (size_t k = 0; k < total; ++k) {
    const bool take_labelled = (k + 1) * labelled.size() / total > k * labelled.size() / total;
    order.push_back(take_labelled ? labelled[pl[il++]] : unlabelled[pu[iu++]]);
  }

  const size_t n_source = data_.source_train.size();
  std::vector<std::pair<Batch, Batch>> out;
  int64_t cursor = source_cursor;
  for (int it = 0; it < adapt_iterations(); ++it) {
    std::vector<const TrainingItem*> src, tgt;
    for (int b = 0; b < config_.source_batch; ++b, ++cursor) {
      const int64_t cycle = cursor / static_cast<int64_t>(n_source);
      const auto perm = permutation(n_source, stream_rng(config_.seed, "adapt-source", cycle));
      src.push_back(&data_.source_train[perm[static_cast<size_t>(cursor % static_cast<int64_t>(n_source))]]);
    }
    for (size_t n = static_cast<size_t>(it) * config_.target_batch;
         n < std::min(total, static_cast<size_t>(it + 1) * config_.target_batch); ++n)
      tgt.push_back(&data_.target[order[n]]);
    out.emplace_back(collate(src, device_), collate(tgt, device_));
  }
  return out;
}

double Trainer::validate() {
  const auto& items = data_.source_val.empty() ? data_.source_train : data_.source_val;
  torch::NoGradGuard guard;
  models_.eval();
  double sum = 0.0;
  for (const auto& item : items) {
    const Batch b = collate({&item}, device_);
    const DualForward f = forward_dual(models_, b, evaluation_feed(config_.variant, true));
    const auto pred = (f.seg.final >= 0.5).to(torch::kFloat);
    const double inter = (pred * b.mask).sum().item<double>();
    const double denom = pred.sum().item<double>() + b.mask.sum().item<double>();
    sum += denom == 0.0 ? 1.0 : 2.0 * inter / denom;
  }
  models_.train();
  return sum / static_cast<double>(items.size());
}

void Trainer::finish_epoch(double val_dsc) {
  EpochRecord rec;
  rec.phase = state_.phase;
  rec.epoch = state_.epoch;
  rec.val_dsc = val_dsc;
  rec.lr_main = state_.lr_main;
  rec.lr_disc = state_.lr_disc;
  for (const auto& [k, v] : state_.running) rec.losses[k] = v.mean;
  state_.history.push_back(std::move(rec));
  state_.running.clear();
  state_ = plateau_step(std::move(state_), val_dsc, config_);
  set_lr(*main_opt_, state_.lr_main);
  if (disc_opt_) set_lr(*disc_opt_, state_.lr_disc);
  ++state_.epoch;
}

void Trainer::run_pretrain_epoch() {
  for (const auto& b : pretrain_batches(state_.epoch)) pretrain_step(b);
  finish_epoch(validate());
}

void Trainer::pretrain() {
  if (state_.phase != "pretrain") throw InvalidArgument("pretrain: trainer already left phase 1");
  std::vector<torch::Tensor> best;
  const auto snapshot = [&] {
    best.clear();
    for (const auto& p : models_.main_parameters()) best.push_back(p.detach().clone());
  };
  while (state_.epoch < config_.pretrain_max_epochs) {
    run_pretrain_epoch();
    if (state_.epochs_since_best == 0) snapshot();
    if (state_.epochs_since_best >= 2 * config_.plateau_patience) break;
  }
  if (!best.empty()) {
    torch::NoGradGuard guard;
    auto params = models_.main_parameters();
    for (size_t n = 0; n < params.size(); ++n) params[n].copy_(best[n]);
  }
}

void Trainer::begin_adaptation() {
  if (!is_adaptive(config_.variant) || !models_.d)
    throw InvalidArgument("variant " + std::string(to_string(config_.variant)) + " has no adaptation phase");
  if (data_.target.empty()) throw InvalidArgument("adaptation needs target studies");
  state_.phase = "adapt";
  state_.epoch = 0;
  state_.main_steps = state_.disc_steps = 0;
  state_.source_cursor = 0;
  state_.best_val_dsc = -std::numeric_limits<double>::infinity();
  state_.plateau_counter = state_.epochs_since_best = 0;
  state_.lr_main = config_.lr_main;
  state_.lr_disc = config_.lr_disc;
  state_.running.clear();
  main_opt_ = std::make_unique<torch::optim::Adam>(models_.main_parameters(), torch::optim::AdamOptions(config_.lr_main));
  disc_opt_ = std::make_unique<torch::optim::Adam>(models_.discriminator_parameters(),
                                                   torch::optim::AdamOptions(config_.lr_disc));
}

void Trainer::run_adapt_epoch() {
  if (state_.phase != "adapt") begin_adaptation();
  const auto batches = adapt_batches(state_.epoch, state_.source_cursor);
  for (const auto& [src, tgt] : batches) {
    adapt_step(src, tgt);
    state_.source_cursor += config_.source_batch;
  }
  finish_epoch(validate());
}

void Trainer::adapt() {
  if (state_.phase != "adapt") begin_adaptation();
  while (state_.epoch < config_.adapt_epochs) run_adapt_epoch();
}

void Trainer::save(const std::string& path) const {
  torch::serialize::OutputArchive out;
  out.write("format", c10::IValue(std::string(kCheckpointFormat)));
  out.write("version", c10::IValue(kCheckpointVersion));
  out.write("config", c10::IValue(train_config_to_json(config_)));
  out.write("state", c10::IValue(train_state_to_json(state_)));
  const auto sub = [&](const std::string& key, const auto& saver) {
    torch::serialize::OutputArchive a;
    saver(a);
    out.write(key, a);
  };
  sub("h", [&](auto& a) { models_.h->save(a); });
  sub("s", [&](auto& a) { models_.s->save(a); });
  if (models_.d) sub("d", [&](auto& a) { models_.d->save(a); });
  sub("optim_main", [&](auto& a) { main_opt_->save(a); });
  if (disc_opt_) sub("optim_disc", [&](auto& a) { disc_opt_->save(a); });
  out.write("rng_cpu", at::detail::getDefaultCPUGenerator().get_state());

  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  out.save_to(tmp);
  fs::rename(tmp, p);
}

void require_compatible(const TrainConfig& checkpoint, const TrainConfig& config) {
  std::vector<std::string> issues;
  if (!(checkpoint.heatmap_net == config.heatmap_net)) issues.push_back("heatmap_net");
  if (!(checkpoint.seg_net == config.seg_net)) issues.push_back("seg_net");
  if (checkpoint.model_shape != config.model_shape) issues.push_back("model_shape");
  if (checkpoint.heatmap_sigma != config.heatmap_sigma) issues.push_back("heatmap_sigma");
  if (checkpoint.window_low != config.window_low || checkpoint.window_high != config.window_high)
    issues.push_back("window");
  if (pretrain_feed(checkpoint.variant) != pretrain_feed(config.variant))
    issues.push_back("variant (" + std::string(to_string(checkpoint.variant)) + " trains s on a different heatmap input than " +
                     std::string(to_string(config.variant)) + ")");
  if (issues.empty()) return;
  std::string msg = "incompatible checkpoint configuration:";
  for (const auto& i : issues) msg += " " + i;
  throw CheckpointError(msg);
}

void Trainer::load(const std::string& path) {
  checkpoint_guard(path, [&] {
    if (!fs::exists(path)) throw CheckpointError(path + ": no such checkpoint");
    torch::serialize::InputArchive in;
    in.load_from(path);
    const ArchiveHeader header = read_header(in, path);
    require_compatible(header.config, config_);
    if (header.config.variant != config_.variant)
      throw CheckpointError("checkpoint variant " + std::string(to_string(header.config.variant)) + " differs from " +
                            std::string(to_string(config_.variant)));
    if (!(header.config.discriminator == config_.discriminator)) throw CheckpointError("discriminator config differs");
    load_module(in, "h", *models_.h);
    load_module(in, "s", *models_.s);
    if (models_.d) load_module(in, "d", *models_.d);
    state_ = header.state;
    if (state_.phase == "adapt") {
      disc_opt_ = std::make_unique<torch::optim::Adam>(models_.discriminator_parameters(),
                                                       torch::optim::AdamOptions(state_.lr_disc));
      torch::serialize::InputArchive od;
      if (!in.try_read("optim_disc", od)) throw CheckpointError("checkpoint lacks discriminator optimizer state");
      disc_opt_->load(od);
    } else {
      disc_opt_.reset();
    }
    main_opt_ = std::make_unique<torch::optim::Adam>(models_.main_parameters(), torch::optim::AdamOptions(state_.lr_main));
    torch::serialize::InputArchive om;
    if (!in.try_read("optim_main", om)) throw CheckpointError("checkpoint lacks optimizer state");
    main_opt_->load(om);
    set_lr(*main_opt_, state_.lr_main);
    if (disc_opt_) set_lr(*disc_opt_, state_.lr_disc);
    torch::Tensor rng;
    if (in.try_read("rng_cpu", rng)) {
      at::Generator gen = at::detail::getDefaultCPUGenerator();
      gen.set_state(rng);
    }
    return 0;
  });
}

void Trainer::load_pretrained(const std::string& path) {
  checkpoint_guard(path, [&] {
    if (!fs::exists(path)) throw CheckpointError(path + ": no such checkpoint");
    torch::serialize::InputArchive in;
    in.load_from(path);
    const ArchiveHeader header = read_header(in, path);
    require_compatible(header.config, config_);
    load_module(in, "h", *models_.h);
    load_module(in, "s", *models_.s);
    state_.history = header.state.history;
    state_.global_step = header.state.global_step;
    state_.epoch = header.state.epoch;
    state_.best_val_dsc = header.state.best_val_dsc;
    return 0;
  });
  if (is_adaptive(config_.variant)) begin_adaptation();
}

LoadedModel load_model(const std::string& path) {
  return checkpoint_guard(path, [&] {
    if (!fs::exists(path)) throw CheckpointError(path + ": no such checkpoint");
    torch::serialize::InputArchive in;
    in.load_from(path);
    ArchiveHeader header = read_header(in, path);
    LoadedModel m{header.config, header.state, create_models(header.config)};
    load_module(in, "h", *m.models.h);
    load_module(in, "s", *m.models.s);
    if (m.models.d && has_key(in, "d")) load_module(in, "d", *m.models.d);
    const torch::Device device = resolve_device();
    m.models.h->to(device);
    m.models.s->to(device);
    if (m.models.d) m.models.d->to(device);
    m.models.eval();
    return m;
  });
}

HeatmapFeed evaluation_feed(Variant v, bool points_available) {
  switch (v) {
    case Variant::dextr:
      if (!points_available) throw InvalidArgument("dextr inference needs extreme points");
      return HeatmapFeed::truth;
    case Variant::ada_mask_no_ps: return HeatmapFeed::zeros;
    default: return HeatmapFeed::predicted;
  }
}

SegmentationMask predict_mask(ModelSet& models, const TrainConfig& config, const Volume& volume,
                              const std::optional<ExtremePointSet>& points, HeatmapFeed feed, Upsample upsample) {
  torch::NoGradGuard guard;
  models.eval();
  const torch::Device device = models.s->parameters().front().device();
  Batch b;
  b.image = model_image(volume, config).unsqueeze(0).to(device);
  if (feed == HeatmapFeed::truth) {
    if (!points) throw InvalidArgument("predict: truth heatmaps need extreme points");
    points->require_inside(volume.shape());
    b.heatmaps = model_heatmaps(*points, volume.shape(), config).unsqueeze(0).to(device);
  }
  b.roles = {BatchRole::target_unlabelled()};
  const DualForward f = forward_dual(models, b, feed);
  const Spacing3 small_spacing = model_spacing(volume.shape(), volume.spacing(), config.model_shape);
  const ProbabilityMap prob = tensor_probability(f.seg.final, config.model_shape, small_spacing, volume.study_id());
  SegmentationMask out;
  if (upsample == Upsample::probability_linear) {
    ProbabilityMap native = prob.shape() == volume.shape() ? prob : resample_probability(prob, volume.shape());
    out = binarize(native, 0.5);
  } else {
    const SegmentationMask small = binarize(prob, 0.5);
    out = small.shape() == volume.shape() ? small : resample_mask(small, volume.shape());
  }
  out.set_spacing(volume.spacing());
  out.set_study_id(volume.study_id());
  return out;
}

void predict_evaluation(ModelSet& models, const TrainConfig& config, const CorpusManifest& manifest,
                        const std::string& out_dir) {
  fs::create_directories(out_dir);
  for (const auto& s : manifest.evaluation_studies) {
    const Volume v = read_volume(manifest.resolve(s.volume));
    std::optional<ExtremePointSet> points;
    const HeatmapFeed feed = evaluation_feed(config.variant, !s.ps.empty());
    if (feed == HeatmapFeed::truth) points = read_extreme_points(manifest.resolve(s.ps));
    SegmentationMask m = predict_mask(models, config, v, points, feed);
    m.set_study_id(s.study_id);
    write_mask((fs::path(out_dir) / (s.study_id + ".nii.gz")).string(), m);
  }
}

RunReport evaluate_manifest(const std::string& pred_dir, const CorpusManifest& manifest) {
  std::vector<EvaluationCase> cases;
  for (const auto& s : manifest.evaluation_studies) {
    if (s.hidden_mask.empty()) throw InvalidArgument("evaluation study " + s.study_id + " has no hidden mask");
    cases.push_back({s.study_id, (fs::path(pred_dir) / (s.study_id + ".nii.gz")).string(),
                     manifest.resolve(s.hidden_mask), s.ps.empty() ? std::string() : manifest.resolve(s.ps)});
  }
  return evaluate_cases(cases);
}

namespace {

RunReport score_and_save(const std::string& out_dir, const CorpusManifest& manifest, const TrainConfig& config) {
  const fs::path out(out_dir);
  RunReport report = evaluate_manifest((out / "predictions").string(), manifest);
  report.variant = std::string(to_string(config.variant));
  report.ps_fraction = config.ps_fraction;
  report.seed = config.seed;
  save_report((out / "report.json").string(), report);
  write_text(out / "per_volume.csv", per_volume_csv(report));
  return report;
}

}  // namespace

RunReport run_variant(const CorpusManifest& manifest, const TrainConfig& config, const std::string& out_dir) {
  config.validate();
  for (const auto& s : manifest.evaluation_studies)
    if (s.hidden_mask.empty()) throw InvalidArgument("evaluation study " + s.study_id + " has no hidden mask");
  const fs::path out(out_dir);
  fs::create_directories(out);
  write_text(out / "config.json", train_config_to_json(config));
  ordered_json run;
  run["manifest"] = io::canonical_path((manifest.root / "manifest.json").string());
  write_text(out / "run.json", run.dump(2) + "\n");

  Trainer trainer(config, load_training_data(manifest, config));
  if (!config.init_checkpoint.empty()) {
    trainer.load_pretrained(config.init_checkpoint);
  } else {
    trainer.pretrain();
    trainer.save((out / "pretrain.ckpt").string());
  }
  if (is_adaptive(config.variant)) trainer.adapt();
  trainer.save((out / "model.ckpt").string());
  write_text(out / "train_state.json", train_state_to_json(trainer.state()));

  predict_evaluation(trainer.models(), config, manifest, (out / "predictions").string());
  return score_and_save(out_dir, manifest, config);
}

RunReport evaluate_run_dir(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const json run = json::parse(read_text((dir / "run.json").string()));
  const CorpusManifest manifest = load_manifest(run.at("manifest").get<std::string>());
  const TrainConfig config = load_train_config((dir / "config.json").string());
  if (!fs::exists(dir / "predictions")) {
    LoadedModel m = load_model((dir / "model.ckpt").string());
    predict_evaluation(m.models, m.config, manifest, (dir / "predictions").string());
  }
  return score_and_save(run_dir, manifest, config);
}

}  // namespace ugda

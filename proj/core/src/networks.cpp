#include "ugda/networks.hpp"

#include "ugda/errors.hpp"

namespace ugda {

namespace nn = torch::nn;

PhnnConfig PhnnConfig::heatmap_net() {
  PhnnConfig c;
  c.in_channels = 1;
  c.out_channels = 6;
  return c;
}

PhnnConfig PhnnConfig::seg_net() {
  PhnnConfig c;
  c.in_channels = 2;
  c.out_channels = 1;
  return c;
}

void PhnnConfig::validate() const {
  if (stage_channels.size() < 2) throw InvalidArgument("network: at least two stages required");
  if (in_channels < 1 || out_channels < 1) throw InvalidArgument("network: channel counts must be positive");
  if (convs_per_stage < 1) throw InvalidArgument("network: convs_per_stage must be positive");
  for (auto c : stage_channels)
    if (c < 1) throw InvalidArgument("network: stage channels must be positive");
}

PhnnImpl::PhnnImpl(PhnnConfig config) : config_(std::move(config)) {
  config_.validate();
  int64_t in = config_.in_channels;
  for (int s = 0; s < config_.stage_count(); ++s) {
    nn::Sequential stage;
    if (s > 0) stage->push_back(nn::MaxPool3d(nn::MaxPool3dOptions(2).stride(2)));
    const int64_t ch = config_.stage_channels[static_cast<size_t>(s)];
    for (int c = 0; c < config_.convs_per_stage; ++c) {
      stage->push_back(nn::Conv3d(nn::Conv3dOptions(in, ch, 3).padding(1)));
      stage->push_back(nn::ReLU(nn::ReLUOptions(true)));
      in = ch;
    }
    stages_.push_back(register_module("stage" + std::to_string(s), stage));
    sides_.push_back(
        register_module("side" + std::to_string(s), nn::Conv3d(nn::Conv3dOptions(ch, config_.out_channels, 1))));
  }
}

PhnnOutput PhnnImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != config_.in_channels)
    throw InvalidArgument("network: expected (batch, " + std::to_string(config_.in_channels) + ", X, Y, Z) input");
  const int64_t stride = config_.stride_product();
  for (int d = 2; d < 5; ++d)
    if (x.size(d) % stride != 0)
      throw InvalidArgument("network: spatial dims must be divisible by " + std::to_string(stride));
  const std::vector<int64_t> size{x.size(2), x.size(3), x.size(4)};

  PhnnOutput out;
  torch::Tensor feat = x;
  torch::Tensor running;
  for (size_t s = 0; s < stages_.size(); ++s) {
    feat = stages_[s]->forward(feat);
    torch::Tensor side = sides_[s]->forward(feat);
    if (s > 0)
      side = torch::nn::functional::interpolate(
          side, torch::nn::functional::InterpolateFuncOptions().size(size).mode(torch::kTrilinear).align_corners(false));
    running = s == 0 ? side : running + side;
    if (config_.deep_supervision || s + 1 == stages_.size()) out.stages.push_back(running);
  }
  out.final = running;
  return out;
}

HeatmapNetImpl::HeatmapNetImpl(PhnnConfig config) {
  if (config.in_channels != 1 || config.out_channels != 6)
    throw InvalidArgument("heatmap network: needs 1 input and 6 output channels");
  net_ = register_module("net", Phnn(std::move(config)));
}

PhnnOutput HeatmapNetImpl::forward(const torch::Tensor& image) { return net_->forward(image); }

SegNetImpl::SegNetImpl(PhnnConfig config) {
  if (config.in_channels != 2 || config.out_channels != 1)
    throw InvalidArgument("segmentation network: needs 2 input and 1 output channel");
  net_ = register_module("net", Phnn(std::move(config)));
}

PhnnOutput SegNetImpl::forward(const torch::Tensor& image, const torch::Tensor& heatmap_sum) {
  if (image.dim() != 5 || heatmap_sum.dim() != 5 || image.size(1) != 1 || heatmap_sum.size(1) != 1 ||
      image.sizes() != heatmap_sum.sizes())
    throw InvalidArgument("segmentation network: image and heatmap must be aligned (batch, 1, X, Y, Z)");
  PhnnOutput raw = net_->forward(torch::cat({image, heatmap_sum}, 1));
  PhnnOutput out;
  for (auto& t : raw.stages) out.stages.push_back(torch::sigmoid(t));
  out.logits = std::move(raw.stages);
  out.final = out.stages.back();
  return out;
}

void DiscriminatorConfig::validate() const {
  if (in_channels < 1) throw InvalidArgument("discriminator: in_channels must be positive");
  if (strided_channels.empty()) throw InvalidArgument("discriminator: at least one strided layer required");
  for (auto d : dilations)
    if (d < 1) throw InvalidArgument("discriminator: dilation must be positive");
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorConfig config) : config_(std::move(config)) {
  config_.validate();
  nn::Sequential body;
  int64_t in = config_.in_channels;
  for (auto ch : config_.strided_channels) {
    body->push_back(nn::Conv3d(nn::Conv3dOptions(in, ch, 4).stride(2).padding(1)));
    body->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(config_.leaky_slope)));
    in = ch;
  }
  for (auto d : config_.dilations) {
    body->push_back(nn::Conv3d(nn::Conv3dOptions(in, config_.dilated_channels, 3).padding(d).dilation(d)));
    body->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(config_.leaky_slope)));
    in = config_.dilated_channels;
  }
  body->push_back(nn::Conv3d(nn::Conv3dOptions(in, 1, 1)));
  body_ = register_module("body", body);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& input) {
  if (input.dim() != 5 || input.size(1) != config_.in_channels)
    throw InvalidArgument("discriminator: expected (batch, " + std::to_string(config_.in_channels) + ", X, Y, Z) input");
  const int64_t f = config_.downsample_factor();
  for (int d = 2; d < 5; ++d)
    if (input.size(d) % f != 0)
      throw InvalidArgument("discriminator: spatial dims must be divisible by " + std::to_string(f));
  return body_->forward(input);
}

torch::Tensor sum_heatmaps(const torch::Tensor& six_channels) {
  if (six_channels.dim() != 5 || six_channels.size(1) != 6)
    throw InvalidArgument("sum_heatmaps: expected (batch, 6, X, Y, Z)");
  return torch::clamp(six_channels.sum(1, /*keepdim=*/true), 0.0, 1.0);
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace ugda

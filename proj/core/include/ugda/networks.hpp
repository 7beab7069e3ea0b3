#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

namespace ugda {

/// Decoder-free, deeply supervised 3D FCN in the progressive-holistic
/// style: a plain conv backbone split into stages separated by 2x max
/// pooling, a 1x1x1 side output per stage upsampled to the input size, and
/// progressively summed side outputs. Partial sum k is supervised; the last
/// partial sum is the network output.
struct PhnnConfig {
  int64_t in_channels = 1;
  int64_t out_channels = 6;
  std::vector<int64_t> stage_channels{8, 16, 32, 32};
  int convs_per_stage = 2;
  bool deep_supervision = true;

  static PhnnConfig heatmap_net();
  static PhnnConfig seg_net();

  int stage_count() const { return static_cast<int>(stage_channels.size()); }
  /// Spatial dims must be divisible by this for the full-resolution contract.
  int64_t stride_product() const { return int64_t{1} << (stage_count() - 1); }
  void validate() const;
  bool operator==(const PhnnConfig&) const = default;
};

using HeatmapNetConfig = PhnnConfig;
using SegNetConfig = PhnnConfig;

struct PhnnOutput {
  torch::Tensor final;
  /// Progressive partial sums, one per stage; back() is `final`. Holds
  /// only `final` when deep supervision is off.
  std::vector<torch::Tensor> stages;
  /// Pre-sigmoid partial sums of s(.), aligned with `stages`; empty for h(.).
  std::vector<torch::Tensor> logits;
};

class PhnnImpl : public torch::nn::Module {
 public:
  explicit PhnnImpl(PhnnConfig config);
  PhnnOutput forward(const torch::Tensor& x);
  const PhnnConfig& config() const { return config_; }

 private:
  PhnnConfig config_;
  std::vector<torch::nn::Sequential> stages_;
  std::vector<torch::nn::Conv3d> sides_;
};
TORCH_MODULE(Phnn);

/// h(.): image -> six extreme-point heatmaps (unbounded regression).
class HeatmapNetImpl : public torch::nn::Module {
 public:
  explicit HeatmapNetImpl(PhnnConfig config = PhnnConfig::heatmap_net());
  PhnnOutput forward(const torch::Tensor& image);
  const PhnnConfig& config() const { return net_->config(); }

 private:
  Phnn net_{nullptr};
};
TORCH_MODULE(HeatmapNet);

/// s(.): (image, summed heatmap) -> foreground probability. Every stage
/// output is passed through a sigmoid.
class SegNetImpl : public torch::nn::Module {
 public:
  explicit SegNetImpl(PhnnConfig config = PhnnConfig::seg_net());
  PhnnOutput forward(const torch::Tensor& image, const torch::Tensor& heatmap_sum);
  const PhnnConfig& config() const { return net_->config(); }

 private:
  Phnn net_{nullptr};
};
TORCH_MODULE(SegNet);

/// Patch discriminator: strided convs followed by atrous (dilated) convs
/// and a 1x1x1 logit head. Output spatial size is input / 2^strided_layers.
struct DiscriminatorConfig {
  int64_t in_channels = 2;
  std::vector<int64_t> strided_channels{8, 16};
  std::vector<int64_t> dilations{2, 4};
  int64_t dilated_channels = 16;
  double leaky_slope = 0.2;

  int64_t downsample_factor() const { return int64_t{1} << strided_channels.size(); }
  void validate() const;
  bool operator==(const DiscriminatorConfig&) const = default;
};

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorConfig config = {});
  /// Raw patch logits (no activation).
  torch::Tensor forward(const torch::Tensor& input);
  const DiscriminatorConfig& config() const { return config_; }

 private:
  DiscriminatorConfig config_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Sum of the six heatmap channels clamped to [0, 1], keeping a channel dim.
torch::Tensor sum_heatmaps(const torch::Tensor& six_channels);

int64_t parameter_count(const torch::nn::Module& module);

}  // namespace ugda

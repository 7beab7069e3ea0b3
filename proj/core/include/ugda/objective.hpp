#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "ugda/losses.hpp"
#include "ugda/networks.hpp"

namespace ugda {

enum class Variant { supervised_dual, dextr, ada_mask_no_ps, ada_mask_with_ps, ugda };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);
bool is_adaptive(Variant v);
/// Variants whose discriminator sees the mask only.
bool is_mask_only_discriminator(Variant v);

/// Which pair the discriminator sees for source items.
enum class DiscSourceInput { pred, gt };

std::string_view to_string(DiscSourceInput v);
DiscSourceInput parse_disc_source_input(std::string_view s);

/// What feeds the heatmap channel of s(.).
enum class HeatmapFeed { predicted, truth, zeros };

/// Input channels the discriminator expects for a variant.
int64_t discriminator_channels(Variant v);

/// The three networks of one run. `d` is present only for adaptive variants.
struct ModelSet {
  HeatmapNet h{nullptr};
  SegNet s{nullptr};
  Discriminator d{nullptr};

  static ModelSet create(Variant variant, const PhnnConfig& heat, const PhnnConfig& seg, DiscriminatorConfig disc);
  std::vector<torch::Tensor> main_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;
  void train(bool on = true);
  void eval() { train(false); }
  void to(torch::Dtype dtype);
};

/// One batch at model resolution. Tensors are (B, C, X, Y, Z).
struct Batch {
  torch::Tensor image;     // C = 1
  torch::Tensor heatmaps;  // C = 6, zeros for items without points
  torch::Tensor mask;      // C = 1, zeros for items without a mask
  std::vector<BatchRole> roles;
  std::vector<std::string> study_ids;

  int64_t size() const { return image.defined() ? image.size(0) : 0; }
  /// (B, 1, 1, 1, 1) boolean tensor, true where the item has points.
  torch::Tensor ps_present() const;
};

struct DualForward {
  PhnnOutput heat;          // h(X); empty when the feed is not `predicted`
  torch::Tensor heat_sum;   // what s(.) consumed
  PhnnOutput seg;           // s(X, heat_sum)
};

/// Runs h then s. With `anchor_ps_items`, items carrying points feed s(.) a
/// gradient-blocked copy of their predicted heatmap so nothing downstream of
/// s(.) reaches h(.) through them.
DualForward forward_dual(ModelSet& m, const Batch& batch, HeatmapFeed feed, bool anchor_ps_items = false);

/// Discriminator input for a variant: {mask, summed heatmap} for ugda, the
/// mask alone for mask-based ADA.
torch::Tensor discriminator_input(Variant v, const torch::Tensor& prob, const torch::Tensor& heat_sum);

struct AdaptationSettings {
  Variant variant = Variant::ugda;
  LossWeights weights;
  DiscSourceInput disc_source_input = DiscSourceInput::pred;
};

struct MainTerms {
  torch::Tensor seg;
  torch::Tensor ext;
  torch::Tensor adv;
  torch::Tensor sup;
  torch::Tensor total;
};

/// Forward pass shared by the discriminator step and the main step of one
/// adaptation iteration (the main networks do not change in between).
struct AdaptationForward {
  DualForward source;
  DualForward target;
};

AdaptationForward adaptation_forward(ModelSet& m, const Batch& source, const Batch& target, Variant variant);

/// L_d on gradient-blocked predictions; only discriminator parameters can
/// receive gradient.
torch::Tensor discriminator_loss(ModelSet& m, const AdaptationForward& fwd, const Batch& source,
                                 const AdaptationSettings& settings);

/// L_sup + lambda * L_adv with the discriminator frozen. Target items with
/// points contribute L_ext (unless the variant ignores points) and their
/// heatmap prediction is blocked from the adversarial gradient.
MainTerms main_loss(ModelSet& m, const AdaptationForward& fwd, const Batch& source, const Batch& target,
                    const AdaptationSettings& settings);

/// Supervised-only loss for phase-1 training on source batches.
SupervisedTerms pretrain_loss(ModelSet& m, const Batch& source, Variant variant, const LossWeights& w);

/// Feed used by a variant during source pretraining.
HeatmapFeed pretrain_feed(Variant v);

}  // namespace ugda

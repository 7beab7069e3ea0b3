#pragma once

#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "ugda/networks.hpp"

namespace ugda {

inline constexpr double kDefaultLambdaAdv = 1e-4;
inline constexpr double kProbabilityClip = 1e-7;
inline constexpr double kDiceSmoothing = 1e-5;

struct LossWeights {
  double lambda_adv = kDefaultLambdaAdv;
  /// Weight per deep-supervision partial sum; empty means 1.0 for each.
  std::vector<double> stage_weights;

  double stage_weight(size_t stage) const { return stage < stage_weights.size() ? stage_weights[stage] : 1.0; }
  void validate() const;
};

enum class Role { source_labelled, target_ps, target_unlabelled };

std::string_view to_string(Role r);

/// Domain membership of one batch item.
struct BatchRole {
  Role role = Role::source_labelled;
  bool has_mask = false;
  bool has_ps = false;

  /// Source items always carry a mask and mask-derived points.
  static BatchRole source() { return {Role::source_labelled, true, true}; }
  static BatchRole target_with_ps() { return {Role::target_ps, false, true}; }
  static BatchRole target_unlabelled() { return {Role::target_unlabelled, false, false}; }
  void validate() const;
};

/// Mean squared error over all elements.
torch::Tensor heatmap_mse(const torch::Tensor& pred, const torch::Tensor& truth);

/// Per-item mean BCE (probabilities clipped to [1e-7, 1 - 1e-7]) plus
/// soft-Dice loss 1 - (2 sum(p y) + eps) / (sum p + sum y + eps). Returns a
/// (batch,) tensor.
torch::Tensor seg_loss_per_item(const torch::Tensor& prob, const torch::Tensor& mask);
torch::Tensor ext_loss_per_item(const torch::Tensor& pred, const torch::Tensor& truth);

/// seg_loss_per_item evaluated on sigmoid(logits). The value is identical;
/// the cross-entropy gradient is taken in logit space (p - y) so saturated
/// voxels beyond the 1e-7 clip still receive gradient.
torch::Tensor seg_loss_per_item_logits(const torch::Tensor& logits, const torch::Tensor& mask);

/// L_ext for a single prediction tensor.
torch::Tensor loss_ext(const torch::Tensor& pred, const torch::Tensor& truth);
/// L_ext with deep supervision: weighted sum over partial sums.
torch::Tensor loss_ext(const PhnnOutput& pred, const torch::Tensor& truth, const LossWeights& w);

/// L_seg for a single probability tensor; rejects values outside [0, 1].
torch::Tensor loss_seg(const torch::Tensor& prob, const torch::Tensor& mask);
/// Deep-supervised L_seg; uses the logit path when `prob.logits` is filled.
torch::Tensor loss_seg(const PhnnOutput& prob, const torch::Tensor& mask, const LossWeights& w);

/// Predictions and targets of one batch with per-item roles. Items without a
/// mask or points may carry zeros in the matching target tensor.
struct SupervisedBatch {
  const PhnnOutput* heatmaps = nullptr;  // h(X), may be null if no item has points
  const PhnnOutput* masks = nullptr;     // s(X, .), may be null if no item has a mask
  torch::Tensor heatmap_truth;           // (B, 6, ...)
  torch::Tensor mask_truth;              // (B, 1, ...)
  std::vector<BatchRole> roles;
};

struct SupervisedTerms {
  torch::Tensor seg;  // 0 when no item carries a mask
  torch::Tensor ext;  // 0 when no item carries points
  torch::Tensor total() const { return seg + ext; }
};

/// L_sup = L_seg over mask-carrying items + L_ext over point-carrying items,
/// each a mean over the contributing items.
SupervisedTerms loss_sup(const SupervisedBatch& batch, const LossWeights& w);

/// Mean BCE(source logits, 1) + mean BCE(target logits, 0).
torch::Tensor loss_disc(const torch::Tensor& source_logits, const torch::Tensor& target_logits);

/// Mean BCE(target logits, 1). Throws ContractViolation when any role is a
/// source item.
torch::Tensor loss_adv(const torch::Tensor& target_logits, const std::vector<BatchRole>& roles);

/// L_sup + lambda_adv * L_adv.
torch::Tensor total_loss(const torch::Tensor& sup, const torch::Tensor& adv, double lambda_adv);
double total_loss(double sup, double adv, double lambda_adv);

}  // namespace ugda

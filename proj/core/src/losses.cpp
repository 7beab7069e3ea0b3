#include "ugda/losses.hpp"

#include "ugda/errors.hpp"

namespace ugda {

namespace F = torch::nn::functional;

namespace {

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw InvalidArgument(std::string(what) + ": shape mismatch");
}

torch::Tensor select_items(const torch::Tensor& t, const std::vector<int64_t>& idx) {
  return t.index_select(0, torch::tensor(idx, torch::TensorOptions().dtype(torch::kLong).device(t.device())));
}

}  // namespace

void LossWeights::validate() const {
  if (lambda_adv < 0.0) throw InvalidArgument("lambda_adv must be non-negative");
  for (double w : stage_weights)
    if (w < 0.0) throw InvalidArgument("stage weights must be non-negative");
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::source_labelled: return "source_labelled";
    case Role::target_ps: return "target_ps";
    case Role::target_unlabelled: return "target_unlabelled";
  }
  return "?";
}

void BatchRole::validate() const {
  if (role == Role::source_labelled && !has_mask) throw InvalidArgument("source items must carry a mask");
  if (role == Role::target_unlabelled && has_ps) throw InvalidArgument("unlabelled target items cannot carry points");
  if (role != Role::source_labelled && has_mask) throw InvalidArgument("target masks are never used for training");
}

torch::Tensor heatmap_mse(const torch::Tensor& pred, const torch::Tensor& truth) {
  require_same(pred, truth, "loss_ext");
  return (pred - truth).pow(2).mean();
}

torch::Tensor ext_loss_per_item(const torch::Tensor& pred, const torch::Tensor& truth) {
  require_same(pred, truth, "loss_ext");
  return (pred - truth).pow(2).flatten(1).mean(1);
}

torch::Tensor seg_loss_per_item(const torch::Tensor& prob, const torch::Tensor& mask) {
  require_same(prob, mask, "loss_seg");
  const auto p = prob.flatten(1);
  const auto y = mask.flatten(1).to(prob.dtype());
  const auto pc = p.clamp(kProbabilityClip, 1.0 - kProbabilityClip);
  const auto bce = -(y * pc.log() + (1.0 - y) * (1.0 - pc).log()).mean(1);
  const auto dice = 1.0 - (2.0 * (p * y).sum(1) + kDiceSmoothing) / (p.sum(1) + y.sum(1) + kDiceSmoothing);
  return bce + dice;
}

torch::Tensor seg_loss_per_item_logits(const torch::Tensor& logits, const torch::Tensor& mask) {
  require_same(logits, mask, "loss_seg");
  const auto z = logits.flatten(1);
  const auto y = mask.flatten(1).to(logits.dtype());
  const auto p = torch::sigmoid(z);
  torch::Tensor clipped;
  {
    torch::NoGradGuard guard;
    const auto pc = p.clamp(kProbabilityClip, 1.0 - kProbabilityClip);
    clipped = -(y * pc.log() + (1.0 - y) * (1.0 - pc).log()).mean(1);
  }
  const auto carrier = F::binary_cross_entropy_with_logits(
      z, y, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone)).mean(1);
  const auto bce = carrier + (clipped - carrier).detach();
  const auto dice = 1.0 - (2.0 * (p * y).sum(1) + kDiceSmoothing) / (p.sum(1) + y.sum(1) + kDiceSmoothing);
  return bce + dice;
}

torch::Tensor loss_ext(const torch::Tensor& pred, const torch::Tensor& truth) { return heatmap_mse(pred, truth); }

torch::Tensor loss_ext(const PhnnOutput& pred, const torch::Tensor& truth, const LossWeights& w) {
  torch::Tensor total = torch::zeros({}, truth.options());
  for (size_t s = 0; s < pred.stages.size(); ++s) total = total + w.stage_weight(s) * heatmap_mse(pred.stages[s], truth);
  return total;
}

torch::Tensor loss_seg(const torch::Tensor& prob, const torch::Tensor& mask) {
  require_same(prob, mask, "loss_seg");
  {
    torch::NoGradGuard guard;
    if (prob.numel() > 0 && (prob.min().item<double>() < 0.0 || prob.max().item<double>() > 1.0))
      throw InvalidArgument("loss_seg: probabilities must lie in [0, 1]");
  }
  return seg_loss_per_item(prob, mask).mean();
}

torch::Tensor loss_seg(const PhnnOutput& prob, const torch::Tensor& mask, const LossWeights& w) {
  torch::Tensor total = torch::zeros({}, mask.options().dtype(prob.final.dtype()));
  const bool use_logits = prob.logits.size() == prob.stages.size();
  for (size_t s = 0; s < prob.stages.size(); ++s) {
    const auto term = use_logits ? seg_loss_per_item_logits(prob.logits[s], mask).mean() : loss_seg(prob.stages[s], mask);
    total = total + w.stage_weight(s) * term;
  }
  return total;
}

SupervisedTerms loss_sup(const SupervisedBatch& batch, const LossWeights& w) {
  std::vector<int64_t> with_mask, with_ps;
  for (size_t n = 0; n < batch.roles.size(); ++n) {
    batch.roles[n].validate();
    if (batch.roles[n].has_mask) with_mask.push_back(static_cast<int64_t>(n));
    if (batch.roles[n].has_ps) with_ps.push_back(static_cast<int64_t>(n));
  }
  const auto options = batch.masks ? batch.masks->final.options()
                                   : (batch.heatmaps ? batch.heatmaps->final.options() : torch::TensorOptions());
  SupervisedTerms terms{torch::zeros({}, options), torch::zeros({}, options)};
  if (!with_mask.empty()) {
    if (!batch.masks) throw InvalidArgument("loss_sup: mask predictions missing");
    const auto y = select_items(batch.mask_truth, with_mask);
    const bool use_logits = batch.masks->logits.size() == batch.masks->stages.size();
    for (size_t s = 0; s < batch.masks->stages.size(); ++s) {
      const auto term = use_logits ? seg_loss_per_item_logits(select_items(batch.masks->logits[s], with_mask), y).mean()
                                   : loss_seg(select_items(batch.masks->stages[s], with_mask), y);
      terms.seg = terms.seg + w.stage_weight(s) * term;
    }
  }
  if (!with_ps.empty() && batch.heatmaps) {
    const auto e = select_items(batch.heatmap_truth, with_ps);
    for (size_t s = 0; s < batch.heatmaps->stages.size(); ++s)
      terms.ext = terms.ext + w.stage_weight(s) * heatmap_mse(select_items(batch.heatmaps->stages[s], with_ps), e);
  }
  return terms;
}

torch::Tensor loss_disc(const torch::Tensor& source_logits, const torch::Tensor& target_logits) {
  return F::binary_cross_entropy_with_logits(source_logits, torch::ones_like(source_logits)) +
         F::binary_cross_entropy_with_logits(target_logits, torch::zeros_like(target_logits));
}

torch::Tensor loss_adv(const torch::Tensor& target_logits, const std::vector<BatchRole>& roles) {
  for (const auto& r : roles)
    if (r.role == Role::source_labelled) throw ContractViolation("loss_adv: applied to a source-domain item");
  if (!roles.empty() && static_cast<int64_t>(roles.size()) != target_logits.size(0))
    throw InvalidArgument("loss_adv: one role per batch item required");
  return F::binary_cross_entropy_with_logits(target_logits, torch::ones_like(target_logits));
}

torch::Tensor total_loss(const torch::Tensor& sup, const torch::Tensor& adv, double lambda_adv) {
  if (lambda_adv < 0.0) throw InvalidArgument("lambda_adv must be non-negative");
  return sup + lambda_adv * adv;
}

double total_loss(double sup, double adv, double lambda_adv) {
  if (lambda_adv < 0.0) throw InvalidArgument("lambda_adv must be non-negative");
  return sup + lambda_adv * adv;
}

}  // namespace ugda

#include "ugda/objective.hpp"

#include <array>

#include "ugda/errors.hpp"

namespace ugda {

namespace {

constexpr std::array<std::string_view, 5> kVariantNames{"supervised_dual", "dextr", "ada_mask_no_ps",
                                                        "ada_mask_with_ps", "ugda"};

/// Restores requires_grad on a parameter list when it goes out of scope.
class FrozenParameters {
 public:
  explicit FrozenParameters(std::vector<torch::Tensor> params) : params_(std::move(params)) {
    for (auto& p : params_) {
      previous_.push_back(p.requires_grad());
      p.requires_grad_(false);
    }
  }
  ~FrozenParameters() {
    for (size_t n = 0; n < params_.size(); ++n) params_[n].requires_grad_(previous_[n]);
  }
  FrozenParameters(const FrozenParameters&) = delete;
  FrozenParameters& operator=(const FrozenParameters&) = delete;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<bool> previous_;
};

}  // namespace

std::string_view to_string(Variant v) { return kVariantNames[static_cast<size_t>(v)]; }

Variant parse_variant(std::string_view s) {
  for (size_t n = 0; n < kVariantNames.size(); ++n)
    if (kVariantNames[n] == s) return static_cast<Variant>(n);
  throw InvalidArgument("unknown variant '" + std::string(s) + "'");
}

bool is_adaptive(Variant v) {
  return v == Variant::ada_mask_no_ps || v == Variant::ada_mask_with_ps || v == Variant::ugda;
}

bool is_mask_only_discriminator(Variant v) { return v == Variant::ada_mask_no_ps || v == Variant::ada_mask_with_ps; }

std::string_view to_string(DiscSourceInput v) { return v == DiscSourceInput::pred ? "pred" : "gt"; }

DiscSourceInput parse_disc_source_input(std::string_view s) {
  if (s == "pred") return DiscSourceInput::pred;
  if (s == "gt") return DiscSourceInput::gt;
  throw InvalidArgument("disc_source_input must be 'pred' or 'gt'");
}

int64_t discriminator_channels(Variant v) { return is_mask_only_discriminator(v) ? 1 : 2; }

HeatmapFeed pretrain_feed(Variant v) {
  switch (v) {
    case Variant::dextr: return HeatmapFeed::truth;
    case Variant::ada_mask_no_ps: return HeatmapFeed::zeros;
    default: return HeatmapFeed::predicted;
  }
}

ModelSet ModelSet::create(Variant variant, const PhnnConfig& heat, const PhnnConfig& seg, DiscriminatorConfig disc) {
  ModelSet m;
  m.h = HeatmapNet(heat);
  m.s = SegNet(seg);
  if (is_adaptive(variant)) {
    disc.in_channels = discriminator_channels(variant);
    m.d = Discriminator(disc);
  }
  return m;
}

std::vector<torch::Tensor> ModelSet::main_parameters() const {
  auto p = h->parameters();
  for (auto& t : s->parameters()) p.push_back(t);
  return p;
}

std::vector<torch::Tensor> ModelSet::discriminator_parameters() const {
  return d ? d->parameters() : std::vector<torch::Tensor>{};
}

void ModelSet::train(bool on) {
  h->train(on);
  s->train(on);
  if (d) d->train(on);
}

void ModelSet::to(torch::Dtype dtype) {
  h->to(dtype);
  s->to(dtype);
  if (d) d->to(dtype);
}

torch::Tensor Batch::ps_present() const {
  std::vector<uint8_t> flags;
  for (const auto& r : roles) flags.push_back(r.has_ps ? 1 : 0);
  return torch::tensor(flags, torch::kBool).view({static_cast<int64_t>(flags.size()), 1, 1, 1, 1});
}

DualForward forward_dual(ModelSet& m, const Batch& batch, HeatmapFeed feed, bool anchor_ps_items) {
  DualForward out;
  switch (feed) {
    case HeatmapFeed::predicted: {
      out.heat = m.h->forward(batch.image);
      out.heat_sum = sum_heatmaps(out.heat.final);
      if (anchor_ps_items) out.heat_sum = torch::where(batch.ps_present(), out.heat_sum.detach(), out.heat_sum);
      break;
    }
    case HeatmapFeed::truth:
      if (!batch.heatmaps.defined()) throw InvalidArgument("forward_dual: truth heatmaps missing");
      out.heat_sum = sum_heatmaps(batch.heatmaps);
      break;
    case HeatmapFeed::zeros:
      out.heat_sum = torch::zeros_like(batch.image);
      break;
  }
  out.seg = m.s->forward(batch.image, out.heat_sum);
  return out;
}

torch::Tensor discriminator_input(Variant v, const torch::Tensor& prob, const torch::Tensor& heat_sum) {
  if (is_mask_only_discriminator(v)) return prob;
  if (prob.sizes() != heat_sum.sizes()) throw InvalidArgument("discriminator input: misaligned mask and heatmap");
  return torch::cat({prob, heat_sum}, 1);
}

AdaptationForward adaptation_forward(ModelSet& m, const Batch& source, const Batch& target, Variant variant) {
  if (!is_adaptive(variant)) throw InvalidArgument("adaptation requires an adversarial variant");
  for (const auto& r : source.roles)
    if (r.role != Role::source_labelled) throw ContractViolation("source batch holds a target item");
  for (const auto& r : target.roles)
    if (r.role == Role::source_labelled) throw ContractViolation("target batch holds a source item");
  const HeatmapFeed feed = variant == Variant::ada_mask_no_ps ? HeatmapFeed::zeros : HeatmapFeed::predicted;
  AdaptationForward fwd;
  fwd.source = forward_dual(m, source, feed);
  fwd.target = forward_dual(m, target, feed, /*anchor_ps_items=*/true);
  return fwd;
}

torch::Tensor discriminator_loss(ModelSet& m, const AdaptationForward& fwd, const Batch& source,
                                 const AdaptationSettings& settings) {
  if (!m.d) throw InvalidArgument("discriminator_loss: variant has no discriminator");
  torch::Tensor src_in;
  if (settings.disc_source_input == DiscSourceInput::gt) {
    src_in = discriminator_input(settings.variant, source.mask.to(fwd.source.seg.final.dtype()),
                                 sum_heatmaps(source.heatmaps));
  } else {
    src_in = discriminator_input(settings.variant, fwd.source.seg.final.detach(), fwd.source.heat_sum.detach());
  }
  const auto tgt_in = discriminator_input(settings.variant, fwd.target.seg.final.detach(), fwd.target.heat_sum.detach());
  return loss_disc(m.d->forward(src_in), m.d->forward(tgt_in));
}

MainTerms main_loss(ModelSet& m, const AdaptationForward& fwd, const Batch& source, const Batch& target,
                    const AdaptationSettings& settings) {
  if (!m.d) throw InvalidArgument("main_loss: variant has no discriminator");
  const bool use_points = settings.variant != Variant::ada_mask_no_ps;

  // L_seg on source items, L_ext on every item with points.
  std::vector<BatchRole> roles = source.roles;
  for (const auto& r : target.roles) {
    BatchRole t = r;
    if (!use_points) t.has_ps = false;
    roles.push_back(t);
  }
  MainTerms terms;
  const LossWeights& w = settings.weights;
  terms.seg = loss_seg(fwd.source.seg, source.mask.to(fwd.source.seg.final.dtype()), w);
  terms.ext = torch::zeros({}, terms.seg.options());
  if (use_points) {
    std::vector<int64_t> items;
    for (size_t n = 0; n < roles.size(); ++n)
      if (roles[n].has_ps) items.push_back(static_cast<int64_t>(n));
    if (!items.empty()) {
      const auto idx = torch::tensor(items, torch::kLong);
      const auto truth = torch::cat({source.heatmaps, target.heatmaps}, 0).index_select(0, idx);
      for (size_t s = 0; s < fwd.source.heat.stages.size(); ++s) {
        const auto pred = torch::cat({fwd.source.heat.stages[s], fwd.target.heat.stages[s]}, 0).index_select(0, idx);
        terms.ext = terms.ext + w.stage_weight(s) * heatmap_mse(pred, truth);
      }
    }
  }
  terms.sup = terms.seg + terms.ext;

  {
    FrozenParameters frozen(m.d->parameters());
    const auto logits = m.d->forward(discriminator_input(settings.variant, fwd.target.seg.final, fwd.target.heat_sum));
    terms.adv = loss_adv(logits, target.roles);
  }
  terms.total = total_loss(terms.sup, terms.adv, w.lambda_adv);
  return terms;
}

SupervisedTerms pretrain_loss(ModelSet& m, const Batch& source, Variant variant, const LossWeights& w) {
  const HeatmapFeed feed = pretrain_feed(variant);
  const DualForward fwd = forward_dual(m, source, feed);
  SupervisedBatch sb;
  sb.masks = &fwd.seg;
  // h(.) is only trained when s(.) consumes its output.
  sb.heatmaps = feed == HeatmapFeed::predicted ? &fwd.heat : nullptr;
  sb.heatmap_truth = source.heatmaps;
  sb.mask_truth = source.mask.to(fwd.seg.final.dtype());
  sb.roles = source.roles;
  return loss_sup(sb, w);
}

}  // namespace ugda

#pragma once

// Small on-disk corpora and toy training configurations for tests that go
// through files.

#include <string>

#include "model_support.hpp"
#include "ugda/corpus.hpp"
#include "ugda/trainer.hpp"

namespace ugda::testing {

/// 32x32x16 phantoms with organs shrunk to fit.
inline CorpusConfig small_corpus_config(const std::string& dir, double fraction, int sources = 8, int targets = 8,
                                        int evals = 2, uint64_t seed = 17) {
  CorpusConfig c;
  c.out_dir = dir;
  c.source_count = sources;
  c.target_count = targets;
  c.eval_count = evals;
  c.ps_fraction = fraction;
  c.seed = seed;
  for (auto* p : {&c.source_params, &c.target_params}) {
    p->shape = {32, 32, 16};
    p->radius_min = {7, 6, 2.5};
    p->radius_max = {9, 8, 3.5};
    p->max_center_offset = {2, 2, 1};
    p->lesion_radius_min = 1.5;
    p->lesion_radius_max = 2.5;
  }
  return c;
}

/// Toy networks on a 16x16x8 model grid; a few steps take milliseconds.
inline TrainConfig toy_train_config(Variant v, uint64_t seed = 0) {
  TrainConfig c;
  c.variant = v;
  c.seed = seed;
  c.model_shape = {16, 16, 8};
  c.heatmap_sigma = 2.0;
  c.heatmap_net = toy_phnn(1, 6);
  c.seg_net = toy_phnn(2, 1);
  c.discriminator = toy_disc();
  c.pretrain_max_epochs = 2;
  c.adapt_epochs = 1;
  return c;
}

}  // namespace ugda::testing

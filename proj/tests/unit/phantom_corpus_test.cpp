#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "test_support.hpp"
#include "ugda/corpus.hpp"
#include "ugda/measures.hpp"
#include "ugda/nifti.hpp"

namespace ugda {
namespace {

namespace fs = std::filesystem;

TEST(Phantom, DeterministicGivenSeedAndParams) {
  const auto params = PhantomParams::defaults(Domain::target);
  const auto a = generate_study(42, params, "s");
  const auto b = generate_study(42, params, "s");
  EXPECT_EQ(a.volume, b.volume);
  EXPECT_EQ(a.mask, b.mask);
}

TEST(Phantom, UndeformedOrganMatchesAnalyticEllipsoid) {
  auto params = PhantomParams::defaults(Domain::source);
  params.deformation_amplitude = 0.0;
  params.lesion_count_min = params.lesion_count_max = 0;
  params.noise_sigma = 0.0;
  for (uint64_t seed : {1u, 2u, 3u}) {
    const auto s = generate_study(seed, params, "e");
    const auto& g = s.geometry;
    const double c = std::cos(g.rotation), sn = std::sin(g.rotation);
    int64_t mismatches = 0;
    for (int64_t k = 0; k < params.shape.nz; ++k)
      for (int64_t j = 0; j < params.shape.ny; ++j)
        for (int64_t i = 0; i < params.shape.nx; ++i) {
          const double dx = i - g.center[0], dy = j - g.center[1], dz = k - g.center[2];
          const double u = (c * dx + sn * dy) / g.radii[0];
          const double v = (-sn * dx + c * dy) / g.radii[1];
          const double w = dz / g.radii[2];
          const bool inside = u * u + v * v + w * w <= 1.0;
          mismatches += (inside != (s.mask(i, j, k) != 0));
        }
    EXPECT_EQ(mismatches, 0);
    EXPECT_GT(foreground_count(s.mask), 0);
  }
}

TEST(Phantom, DifferentSeedsGiveDifferentMasks) {
  const auto params = PhantomParams::defaults(Domain::source);
  const auto a = generate_study(1, params);
  const auto b = generate_study(2, params);
  EXPECT_LT(dice_score(a.mask, b.mask), 1.0);
}

TEST(Phantom, MarginViolationRejected) {
  auto params = PhantomParams::defaults(Domain::source);
  params.radius_max = {40, 40, 40};
  EXPECT_THROW(generate_study(1, params), InvalidArgument);
  params = PhantomParams::defaults(Domain::source);
  params.noise_sigma = -1;
  EXPECT_THROW(generate_study(1, params), InvalidArgument);
}

TEST(Phantom, MaskKeepsTwoVoxelMargin) {
  for (Domain d : {Domain::source, Domain::target}) {
    const auto params = PhantomParams::defaults(d);
    for (uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = generate_study(seed, params);
      const auto ext = testing::brute_extrema(s.mask);
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(ext[size_t(2 * a)], 2);
        EXPECT_LE(ext[size_t(2 * a + 1)], params.shape[a] - 3);
      }
    }
  }
}

// Source-calibrated threshold segmenter: the midpoint between the mean
// background and mean organ intensity of the source population.
TEST(Phantom, TargetDomainIsMeasurablyShifted) {
  const auto src = PhantomParams::defaults(Domain::source);
  const auto tgt = PhantomParams::defaults(Domain::target);
  double organ = 0, bg = 0;
  int64_t no = 0, nb = 0;
  for (uint64_t seed = 0; seed < 6; ++seed) {
    const auto s = generate_study(seed, src);
    for (size_t n = 0; n < s.mask.size(); ++n) {
      if (s.mask.voxels()[n]) organ += s.volume.voxels()[n], ++no;
      else bg += s.volume.voxels()[n], ++nb;
    }
  }
  const double thr = 0.5 * (organ / double(no) + bg / double(nb));
  auto mean_dsc = [&](const PhantomParams& p, uint64_t base) {
    double total = 0;
    for (uint64_t seed = base; seed < base + 8; ++seed) {
      const auto s = generate_study(seed, p);
      SegmentationMask pred(s.mask.shape(), s.mask.spacing());
      for (size_t n = 0; n < s.mask.size(); ++n) pred.voxels()[n] = s.volume.voxels()[n] >= thr ? 1 : 0;
      total += dice_score(largest_component(pred), s.mask);
    }
    return total / 8;
  };
  const double on_source = mean_dsc(src, 100);
  const double on_target = mean_dsc(tgt, 200);
  EXPECT_GT(on_source, on_target) << "source " << on_source << " target " << on_target;
}

TEST(SimulatePs, ZeroJitterMatchesExtraction) {
  const auto m = testing::box_mask({12, 14, 16}, {2, 3, 4}, {6, 9, 11});
  const auto e = simulate_ps(m, 0.0, 3);
  EXPECT_EQ(e, extract_extreme_points(m));
  EXPECT_EQ(e.at(Axis::x, Side::min), (Index3{2, 6, 7}));
  EXPECT_EQ(e.source(), PointSource::derived_from_mask);
}

TEST(SimulatePs, JitterStaysInsideMaskAndOnExtremalSlice) {
  std::mt19937_64 rng(4);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = testing::random_mask(rng, {20, 20, 20});
    const auto ext = testing::brute_extrema(m);
    const auto e = simulate_ps(m, 2.0, seed);
    for (int s = 0; s < 6; ++s) {
      EXPECT_EQ(m[e.slot(s)], 1);
      EXPECT_EQ(e.slot(s)[s / 2], ext[size_t(s)]);
    }
  }
  SegmentationMask empty({4, 4, 4}, {1, 1, 1});
  EXPECT_THROW(simulate_ps(empty, 0.0, 1), EmptyMaskError);
  EXPECT_THROW(simulate_ps(testing::box_mask({4, 4, 4}, {1, 1, 1}, {2, 2, 2}), -1.0, 1), InvalidArgument);
}

TEST(Corpus, PsCountRounding) {
  EXPECT_EQ(ps_labelled_count(16, 0.5), 8);
  EXPECT_EQ(ps_labelled_count(16, 1.0), 16);
  EXPECT_EQ(ps_labelled_count(30, 0.1), 3);
  EXPECT_EQ(ps_labelled_count(10, 0.25), 3);
  EXPECT_THROW(ps_labelled_count(10, 0.0), InvalidArgument);
  EXPECT_THROW(ps_labelled_count(10, 1.5), InvalidArgument);
}

class CorpusTest : public ::testing::Test {
 protected:
  fs::path dir = fs::temp_directory_path() / "ugda_corpus_test";
  void SetUp() override { fs::remove_all(dir); }
  void TearDown() override { fs::remove_all(dir); }

  CorpusConfig small_config(double fraction) {
    CorpusConfig c;
    c.out_dir = dir.string();
    c.source_count = 8;
    c.target_count = 16;
    c.eval_count = 4;
    c.ps_fraction = fraction;
    c.seed = 17;
    for (auto* p : {&c.source_params, &c.target_params}) p->shape = {32, 32, 16};
    for (auto* p : {&c.source_params, &c.target_params}) {
      p->radius_min = {7, 6, 2.5};
      p->radius_max = {9, 8, 3.5};
      p->max_center_offset = {2, 2, 1};
      p->lesion_radius_min = 1.5;
      p->lesion_radius_max = 2.5;
    }
    return c;
  }
};

TEST_F(CorpusTest, CountsSplitsAndPsValidity) {
  const CorpusManifest m = build_corpus(small_config(0.5));
  EXPECT_EQ(m.source_studies.size(), 8u);
  EXPECT_EQ(m.target_ps_studies.size(), 8u);
  EXPECT_EQ(m.target_unlabelled_studies.size(), 8u);
  EXPECT_EQ(m.evaluation_studies.size(), 4u);
  EXPECT_EQ(m.target_count(), 20u);

  std::set<std::string> ids;
  for (const auto& s : m.source_studies) ids.insert(s.study_id);
  for (const auto& s : m.target_ps_studies) ids.insert(s.study_id);
  for (const auto& s : m.target_unlabelled_studies) ids.insert(s.study_id);
  for (const auto& s : m.evaluation_studies) ids.insert(s.study_id);
  EXPECT_EQ(ids.size(), 28u);

  // Every evaluation PS attains the true extrema of its hidden mask.
  for (const auto& s : m.evaluation_studies) {
    const auto mask = read_mask(m.resolve(s.hidden_mask));
    const auto ps = read_extreme_points(m.resolve(s.ps));
    const auto ext = testing::brute_extrema(mask);
    for (int k = 0; k < 6; ++k) {
      EXPECT_EQ(mask[ps.slot(k)], 1);
      EXPECT_EQ(ps.slot(k)[k / 2], ext[size_t(k)]);
    }
    EXPECT_NE(s.hidden_mask.find("eval/hidden_mask/"), std::string::npos);
  }
  // Target PS re-derive from the regenerated masks (the masks are not written).
  const CorpusConfig cfg = small_config(0.5);
  for (const auto& s : m.target_ps_studies) {
    const auto study = generate_study(study_seed(cfg.seed, s.study_id), cfg.target_params, s.study_id);
    const auto ps = read_extreme_points(m.resolve(s.ps));
    const auto ext = testing::brute_extrema(study.mask);
    for (int k = 0; k < 6; ++k) EXPECT_EQ(ps.slot(k)[k / 2], ext[size_t(k)]);
  }

  // Manifest file round-trips and generated volumes re-read bit-equal.
  const CorpusManifest loaded = load_manifest((dir / "manifest.json").string());
  EXPECT_EQ(manifest_to_json(loaded), manifest_to_json(m));
  const auto& s0 = m.source_studies.front();
  const auto regenerated = generate_study(study_seed(cfg.seed, s0.study_id), cfg.source_params, s0.study_id);
  EXPECT_EQ(read_volume(m.resolve(s0.volume)), regenerated.volume);
}

TEST_F(CorpusTest, FullFractionHasNoUnlabelled) {
  const CorpusManifest m = build_corpus(small_config(1.0));
  EXPECT_EQ(m.target_ps_studies.size(), 16u);
  EXPECT_TRUE(m.target_unlabelled_studies.empty());
}

TEST_F(CorpusTest, AssembleFromDirectoryLayout) {
  const CorpusManifest built = build_corpus(small_config(0.5));
  const CorpusManifest assembled = assemble_manifest(dir.string(), 17);
  EXPECT_EQ(manifest_to_json(assembled), manifest_to_json(built));
}

TEST_F(CorpusTest, UnwritableOutputIsIoError) {
  auto c = small_config(1.0);
  fs::create_directories(dir);
  { std::ofstream(dir / "blocker") << "x"; }
  c.out_dir = (dir / "blocker" / "sub").string();
  EXPECT_THROW(build_corpus(c), IoError);
}

TEST(Manifest, DuplicateIdsRejected) {
  CorpusManifest m;
  m.source_studies.push_back({"a", "v", "m"});
  m.target_unlabelled_studies.push_back({"a", "v2"});
  EXPECT_THROW(m.validate(), InvalidArgument);
}

}  // namespace
}  // namespace ugda

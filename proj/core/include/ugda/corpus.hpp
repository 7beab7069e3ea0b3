#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ugda/phantom.hpp"

namespace ugda {

struct SourceStudy {
  std::string study_id;
  std::string volume;
  std::string mask;
};

struct TargetPsStudy {
  std::string study_id;
  std::string volume;
  std::string ps;
};

struct TargetUnlabelledStudy {
  std::string study_id;
  std::string volume;
};

struct EvaluationStudy {
  std::string study_id;
  std::string volume;
  std::string ps;
  std::string hidden_mask;
};

/// Declarative listing of a source/target corpus. Paths are stored relative
/// to the manifest file; `resolve` turns them into usable paths.
struct CorpusManifest {
  uint64_t seed = 0;
  std::vector<SourceStudy> source_studies;
  std::vector<TargetPsStudy> target_ps_studies;
  std::vector<TargetUnlabelledStudy> target_unlabelled_studies;
  std::vector<EvaluationStudy> evaluation_studies;
  /// Directory the relative paths are anchored to. Not serialised.
  std::filesystem::path root;

  std::string resolve(const std::string& relative) const;
  std::size_t target_count() const {
    return target_ps_studies.size() + target_unlabelled_studies.size() + evaluation_studies.size();
  }

  /// Throws InvalidArgument on duplicate study ids or a hidden mask that is
  /// also listed as a training input.
  void validate() const;
};

CorpusManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const CorpusManifest& manifest);
std::string manifest_to_json(const CorpusManifest& manifest);

struct CorpusConfig {
  std::string out_dir = "corpus";
  int source_count = 8;
  int target_count = 16;
  int eval_count = 4;
  double ps_fraction = 1.0;
  double jitter_vox = 0.0;
  uint64_t seed = 0;
  PhantomParams source_params = PhantomParams::defaults(Domain::source);
  PhantomParams target_params = PhantomParams::defaults(Domain::target);
};

/// Reads the gen-data configuration file. Phantom parameters may be
/// overridden per domain under "source_params" / "target_params".
CorpusConfig load_corpus_config(const std::string& path);

/// Number of PS-labelled studies for `count` targets at `fraction`.
int ps_labelled_count(int count, double fraction);

/// Generates phantoms, writes source/{vol,mask}, target/{vol,ps},
/// eval/{vol,ps,hidden_mask} and manifest.json under config.out_dir.
CorpusManifest build_corpus(const CorpusConfig& config);

/// Builds a manifest over existing NIfTI data laid out in the same
/// directory structure; unlabelled target volumes are target/vol files with
/// no matching target/ps JSON.
CorpusManifest assemble_manifest(const std::string& root, uint64_t seed = 0);

}  // namespace ugda

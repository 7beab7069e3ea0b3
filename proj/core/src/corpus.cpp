#include "ugda/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ugda/file_audit.hpp"
#include "ugda/nifti.hpp"

namespace ugda {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string read_text(const std::string& path) {
  io::record_open(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T, size_t N>
void read_array(const json& j, const char* key, std::array<T, N>& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != N) throw InvalidArgument(std::string("config: ") + key + " needs " + std::to_string(N) + " entries");
  for (size_t n = 0; n < N; ++n) out[n] = a[n].get<T>();
}

void apply_overrides(const json& j, PhantomParams& p) {
  if (j.contains("shape")) {
    std::array<int64_t, 3> s{};
    read_array(j, "shape", s);
    p.shape = {s[0], s[1], s[2]};
  }
  read_array(j, "spacing_mm", p.spacing_mm);
  read_array(j, "radius_min", p.radius_min);
  read_array(j, "radius_max", p.radius_max);
  read_array(j, "max_center_offset", p.max_center_offset);
  auto num = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  num("max_rotation", p.max_rotation);
  num("deformation_amplitude", p.deformation_amplitude);
  num("deformation_frequency", p.deformation_frequency);
  num("lesion_count_min", p.lesion_count_min);
  num("lesion_count_max", p.lesion_count_max);
  num("lesion_radius_min", p.lesion_radius_min);
  num("lesion_radius_max", p.lesion_radius_max);
  num("lesion_contrast_min", p.lesion_contrast_min);
  num("lesion_contrast_max", p.lesion_contrast_max);
  num("background_intensity", p.background_intensity);
  num("organ_intensity", p.organ_intensity);
  num("distractor_intensity", p.distractor_intensity);
  num("distractor_gap", p.distractor_gap);
  num("noise_sigma", p.noise_sigma);
  num("bias_amplitude", p.bias_amplitude);
}

std::string relative_to(const fs::path& p, const fs::path& root) { return p.lexically_relative(root).generic_string(); }

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string());
}

}  // namespace

std::string CorpusManifest::resolve(const std::string& relative) const {
  const fs::path p(relative);
  if (p.is_absolute() || root.empty()) return p.string();
  return (root / p).lexically_normal().string();
}

void CorpusManifest::validate() const {
  std::set<std::string> ids;
  auto add = [&](const std::string& id) {
    if (!ids.insert(id).second) throw InvalidArgument("manifest: duplicate study id " + id);
  };
  std::set<std::string> training_paths;
  for (const auto& s : source_studies) {
    add(s.study_id);
    training_paths.insert(s.volume);
    training_paths.insert(s.mask);
  }
  for (const auto& s : target_ps_studies) {
    add(s.study_id);
    training_paths.insert(s.volume);
    training_paths.insert(s.ps);
  }
  for (const auto& s : target_unlabelled_studies) {
    add(s.study_id);
    training_paths.insert(s.volume);
  }
  for (const auto& s : evaluation_studies) {
    add(s.study_id);
    training_paths.insert(s.volume);
    training_paths.insert(s.ps);
  }
  for (const auto& s : evaluation_studies)
    if (training_paths.count(s.hidden_mask)) throw InvalidArgument("manifest: hidden mask doubles as a training input");
}

std::string manifest_to_json(const CorpusManifest& m) {
  ordered_json doc;
  doc["version"] = 1;
  doc["seed"] = m.seed;
  doc["source_studies"] = ordered_json::array();
  for (const auto& s : m.source_studies)
    doc["source_studies"].push_back({{"study_id", s.study_id}, {"volume", s.volume}, {"mask", s.mask}});
  doc["target_ps_studies"] = ordered_json::array();
  for (const auto& s : m.target_ps_studies)
    doc["target_ps_studies"].push_back({{"study_id", s.study_id}, {"volume", s.volume}, {"ps", s.ps}});
  doc["target_unlabelled_studies"] = ordered_json::array();
  for (const auto& s : m.target_unlabelled_studies)
    doc["target_unlabelled_studies"].push_back({{"study_id", s.study_id}, {"volume", s.volume}});
  doc["evaluation_studies"] = ordered_json::array();
  for (const auto& s : m.evaluation_studies)
    doc["evaluation_studies"].push_back(
        {{"study_id", s.study_id}, {"volume", s.volume}, {"ps", s.ps}, {"hidden_mask", s.hidden_mask}});
  return doc.dump(2) + "\n";
}

void save_manifest(const std::string& path, const CorpusManifest& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << manifest_to_json(m);
  if (!out) throw IoError("write failed for " + path);
}

CorpusManifest load_manifest(const std::string& path) {
  const std::string text = read_text(path);
  CorpusManifest m;
  try {
    const json doc = json::parse(text);
    if (doc.value("version", 1) != 1) throw InvalidArgument("manifest: unsupported version");
    m.seed = doc.value("seed", uint64_t{0});
    for (const auto& e : doc.at("source_studies"))
      m.source_studies.push_back({e.at("study_id"), e.at("volume"), e.at("mask")});
    for (const auto& e : doc.at("target_ps_studies"))
      m.target_ps_studies.push_back({e.at("study_id"), e.at("volume"), e.at("ps")});
    for (const auto& e : doc.at("target_unlabelled_studies"))
      m.target_unlabelled_studies.push_back({e.at("study_id"), e.at("volume")});
    for (const auto& e : doc.at("evaluation_studies"))
      m.evaluation_studies.push_back({e.at("study_id"), e.at("volume"), e.at("ps"), e.at("hidden_mask")});
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("manifest ") + path + ": " + e.what());
  }
  m.root = fs::absolute(fs::path(path)).parent_path();
  m.validate();
  return m;
}

CorpusConfig load_corpus_config(const std::string& path) {
  const std::string text = read_text(path);
  CorpusConfig c;
  try {
    const json j = json::parse(text);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.source_count = j.value("source_count", c.source_count);
    c.target_count = j.value("target_count", c.target_count);
    c.eval_count = j.value("eval_count", c.eval_count);
    c.ps_fraction = j.value("ps_fraction", c.ps_fraction);
    c.jitter_vox = j.value("jitter_vox", c.jitter_vox);
    c.seed = j.value("seed", c.seed);
    // Shared geometry applies to both domains before per-domain overrides.
    apply_overrides(j, c.source_params);
    apply_overrides(j, c.target_params);
    if (j.contains("source_params")) apply_overrides(j.at("source_params"), c.source_params);
    if (j.contains("target_params")) apply_overrides(j.at("target_params"), c.target_params);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("corpus config ") + path + ": " + e.what());
  }
  return c;
}

int ps_labelled_count(int count, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("ps_fraction must lie in (0, 1]");
  // Guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
  const double exact = fraction * static_cast<double>(count);
  return std::min(count, static_cast<int>(std::ceil(exact - 1e-9)));
}

CorpusManifest build_corpus(const CorpusConfig& config) {
  if (config.source_count < 1 || config.target_count < 1 || config.eval_count < 1)
    throw InvalidArgument("build_corpus: every split needs at least one study");
  const int n_ps = ps_labelled_count(config.target_count, config.ps_fraction);
  if (config.jitter_vox < 0.0) throw InvalidArgument("build_corpus: jitter must be non-negative");
  config.source_params.validate();
  config.target_params.validate();

  const fs::path root = fs::absolute(fs::path(config.out_dir)).lexically_normal();
  for (const char* sub : {"source/vol", "source/mask", "target/vol", "target/ps", "eval/vol", "eval/ps", "eval/hidden_mask"})
    ensure_dir(root / sub);

  CorpusManifest m;
  m.seed = config.seed;
  m.root = root;
  char id[32];

  for (int n = 0; n < config.source_count; ++n) {
    std::snprintf(id, sizeof(id), "src_%03d", n);
    const PhantomStudy s = generate_study(study_seed(config.seed, id), config.source_params, id);
    const fs::path vol = root / "source/vol" / (std::string(id) + ".nii.gz");
    const fs::path mask = root / "source/mask" / (std::string(id) + ".nii.gz");
    write_volume(vol.string(), s.volume);
    write_mask(mask.string(), s.mask);
    m.source_studies.push_back({id, relative_to(vol, root), relative_to(mask, root)});
  }
  for (int n = 0; n < config.target_count; ++n) {
    std::snprintf(id, sizeof(id), "tgt_%03d", n);
    const PhantomStudy s = generate_study(study_seed(config.seed, id), config.target_params, id);
    const fs::path vol = root / "target/vol" / (std::string(id) + ".nii.gz");
    write_volume(vol.string(), s.volume);
    if (n < n_ps) {
      const fs::path ps = root / "target/ps" / (std::string(id) + ".json");
      write_extreme_points(ps.string(), simulate_ps(s.mask, config.jitter_vox, study_seed(config.seed ^ 0x5053ULL, id)));
      m.target_ps_studies.push_back({id, relative_to(vol, root), relative_to(ps, root)});
    } else {
      m.target_unlabelled_studies.push_back({id, relative_to(vol, root)});
    }
  }
  for (int n = 0; n < config.eval_count; ++n) {
    std::snprintf(id, sizeof(id), "eval_%03d", n);
    const PhantomStudy s = generate_study(study_seed(config.seed, id), config.target_params, id);
    const fs::path vol = root / "eval/vol" / (std::string(id) + ".nii.gz");
    const fs::path ps = root / "eval/ps" / (std::string(id) + ".json");
    const fs::path mask = root / "eval/hidden_mask" / (std::string(id) + ".nii.gz");
    write_volume(vol.string(), s.volume);
    write_mask(mask.string(), s.mask);
    write_extreme_points(ps.string(), simulate_ps(s.mask, config.jitter_vox, study_seed(config.seed ^ 0x5053ULL, id)));
    m.evaluation_studies.push_back({id, relative_to(vol, root), relative_to(ps, root), relative_to(mask, root)});
  }
  m.validate();
  save_manifest((root / "manifest.json").string(), m);
  return m;
}

CorpusManifest assemble_manifest(const std::string& root_dir, uint64_t seed) {
  const fs::path root = fs::absolute(fs::path(root_dir)).lexically_normal();
  CorpusManifest m;
  m.seed = seed;
  m.root = root;
  auto stem_of = [](const fs::path& p) {
    std::string name = p.filename().string();
    for (const char* ext : {".nii.gz", ".nii", ".json"}) {
      const std::string e(ext);
      if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0)
        return name.substr(0, name.size() - e.size());
    }
    return name;
  };
  auto list = [&](const fs::path& dir) {
    std::vector<fs::path> out;
    if (fs::is_directory(dir))
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
  };
  auto find = [&](const fs::path& dir, const std::string& stem) -> std::optional<fs::path> {
    for (const char* ext : {".nii.gz", ".nii", ".json"}) {
      const fs::path p = dir / (stem + ext);
      if (fs::exists(p)) return p;
    }
    return std::nullopt;
  };
  for (const auto& vol : list(root / "source/vol")) {
    const std::string id = stem_of(vol);
    const auto mask = find(root / "source/mask", id);
    if (!mask) throw InvalidArgument("assemble_manifest: source study " + id + " has no mask");
    m.source_studies.push_back({id, relative_to(vol, root), relative_to(*mask, root)});
  }
  for (const auto& vol : list(root / "target/vol")) {
    const std::string id = stem_of(vol);
    if (const auto ps = find(root / "target/ps", id))
      m.target_ps_studies.push_back({id, relative_to(vol, root), relative_to(*ps, root)});
    else
      m.target_unlabelled_studies.push_back({id, relative_to(vol, root)});
  }
  for (const auto& vol : list(root / "eval/vol")) {
    const std::string id = stem_of(vol);
    const auto ps = find(root / "eval/ps", id);
    const auto mask = find(root / "eval/hidden_mask", id);
    if (!ps || !mask) throw InvalidArgument("assemble_manifest: evaluation study " + id + " is incomplete");
    m.evaluation_studies.push_back({id, relative_to(vol, root), relative_to(*ps, root), relative_to(*mask, root)});
  }
  m.validate();
  return m;
}

}  // namespace ugda

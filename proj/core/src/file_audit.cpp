#include "ugda/file_audit.hpp"

#include <algorithm>
#include <filesystem>

namespace ugda::io {

namespace {

std::mutex g_registry_mutex;
std::vector<AccessRecorder*> g_recorders;

}  // namespace

AccessRecorder::AccessRecorder() {
  std::lock_guard lock(g_registry_mutex);
  g_recorders.push_back(this);
}

AccessRecorder::~AccessRecorder() {
  std::lock_guard lock(g_registry_mutex);
  g_recorders.erase(std::remove(g_recorders.begin(), g_recorders.end(), this), g_recorders.end());
}

std::vector<std::string> AccessRecorder::paths() const {
  std::lock_guard lock(mutex_);
  return paths_;
}

bool AccessRecorder::opened(const std::string& path) const {
  const std::string want = canonical_path(path);
  std::lock_guard lock(mutex_);
  return std::find(paths_.begin(), paths_.end(), want) != paths_.end();
}

void AccessRecorder::add(const std::string& path) {
  std::lock_guard lock(mutex_);
  paths_.push_back(path);
}

void record_open(const std::string& path) {
  std::lock_guard lock(g_registry_mutex);
  if (g_recorders.empty()) return;
  const std::string canon = canonical_path(path);
  for (auto* r : g_recorders) r->add(canon);
}

std::string canonical_path(const std::string& path) {
  return std::filesystem::absolute(std::filesystem::path(path)).lexically_normal().string();
}

}  // namespace ugda::io

#pragma once

#include <mutex>
#include <string>
#include <vector>

namespace ugda::io {

/// Records every path opened through the ugda readers while an
/// AccessRecorder is alive. Used to prove which files a code path touched.
class AccessRecorder {
 public:
  AccessRecorder();
  ~AccessRecorder();
  AccessRecorder(const AccessRecorder&) = delete;
  AccessRecorder& operator=(const AccessRecorder&) = delete;

  std::vector<std::string> paths() const;
  bool opened(const std::string& path) const;

 private:
  friend void record_open(const std::string& path);
  void add(const std::string& path);

  mutable std::mutex mutex_;
  std::vector<std::string> paths_;
};

/// Called by every reader before opening `path` for input.
void record_open(const std::string& path);

/// Lexically normalised absolute form used for comparisons.
std::string canonical_path(const std::string& path);

}  // namespace ugda::io

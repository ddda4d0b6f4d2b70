#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "delib/tensor.hpp"

namespace delib {

#ifndef DELIB_BUILD_ID
#define DELIB_BUILD_ID "unknown"
#endif

inline void write_text_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw UsageError("cannot open '" + tmp.string() + "' for writing");
    out << content;
    if (!out) throw UsageError("failed writing '" + path + "'");
  }
  fs::rename(tmp, target);
}

/// One manifest per run, written alongside the outputs: the resolved config
/// snapshot makes every default auditable.
struct RunManifest {
  std::string subcommand;
  nlohmann::json resolved_config;
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  double wall_time_s = 0.0;

  void write(const std::string& path) const {
    nlohmann::json j = {{"subcommand", subcommand},
                        {"config", resolved_config},
                        {"seed", seed},
                        {"artifacts", artifacts},
                        {"build_id", DELIB_BUILD_ID},
                        {"wall_time_s", wall_time_s}};
    write_text_atomic(path, j.dump(2) + "\n");
  }
};

class WallClock {
 public:
  WallClock() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace delib

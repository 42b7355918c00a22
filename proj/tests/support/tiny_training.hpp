// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "wnet/config.hpp"

namespace wnet::testing {

/// Narrow networks on a 3-style x 4-char corpus: the full training path in
/// well under a second per iteration.
inline TrainConfig tiny_train_config(std::uint64_t seed = 3) {
  TrainConfig c;
  c.seed = seed;
  c.batch = 4;
  c.generator.widths = {4, 4, 8, 8, 8, 512};
  c.generator.blocks = 1;
  c.generator.kernel = 3;
  c.critic.widths = {4, 8};
  c.critic.kernel = 3;
  c.phi.widths = {4, 4, 8, 8, 8};
  c.phi_train.max_epochs = 60;
  return c;
}

inline CorpusIndex tiny_corpus() { return synth_corpus(3, 4, 5); }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("wnet-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace wnet::testing

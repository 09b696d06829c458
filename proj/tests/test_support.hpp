#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include "obs/embedding.hpp"

#ifndef OBS_FIXTURE_DIR
#error "OBS_FIXTURE_DIR must be defined by the build"
#endif

inline std::filesystem::path fixture_path(const std::string& name) {
  return std::filesystem::path(OBS_FIXTURE_DIR) / name;
}

/// Scratch directory removed on destruction.
class TempDir {
public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("obs_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

inline obs::Embedding random_vector(std::mt19937_64& rng, int dim, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  obs::Embedding v(dim);
  for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  return v;
}

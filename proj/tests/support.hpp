#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "xplain/imaging.hpp"
#include "xplain/rng.hpp"

namespace xplain::testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("xplain-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline imaging::ImageTensor random_image(int h, int w, imaging::RangeTag tag, std::uint64_t seed) {
  Rng rng(seed);
  const bool raw = tag == imaging::RangeTag::Raw255;
  imaging::ImageTensor img(h, w, raw ? tag : imaging::RangeTag::Unit);
  for (float& v : img.data) v = static_cast<float>(rng.uniform()) * (raw ? 255.0f : 1.0f);
  return tag == imaging::RangeTag::Normalized ? imaging::normalize(img) : img;
}

}  // namespace xplain::testing

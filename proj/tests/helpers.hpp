#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "protodetect/core_types.hpp"

namespace fs = std::filesystem;

namespace testing_util {

using namespace protodetect;

inline FeatureMap random_map(std::mt19937_64& gen, int gh, int gw, int ps, int ih, int iw, int dim) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> data(static_cast<std::size_t>(gh) * gw * dim);
  for (float& v : data) v = n(gen);
  return FeatureMap({gh, gw, ps, ih, iw}, dim, std::move(data));
}

inline PixelBox random_box(std::mt19937_64& gen, double w, double h, bool integer) {
  std::uniform_real_distribution<double> ux(0, w), uy(0, h);
  for (;;) {
    double x0 = ux(gen), x1 = ux(gen), y0 = uy(gen), y1 = uy(gen);
    if (integer) {
      x0 = std::floor(x0), x1 = std::floor(x1), y0 = std::floor(y0), y1 = std::floor(y1);
    }
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    if (x1 - x0 >= 1 && y1 - y0 >= 1) return {x0, y0, x1, y1};
  }
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("protodetect-" + tag + "-" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

}  // namespace testing_util

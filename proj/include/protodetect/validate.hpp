#pragma once

#include <set>
#include <string>

#include "protodetect/io.hpp"

namespace protodetect {

namespace detail {

inline void check_feature_file(const ManifestEntry& e, const std::filesystem::path& path,
                               Diagnostics& out) {
  try {
    const FeatureMap fm = io::read_feature_map(path);
    if (fm.image_h() != e.image_h || fm.image_w() != e.image_w) {
      out.push_back({Severity::kFatal, e.image_id, "image size mismatch",
                     path.string() + " describes a " + std::to_string(fm.image_h()) + "x" +
                         std::to_string(fm.image_w()) + " image, manifest says " +
                         std::to_string(e.image_h) + "x" + std::to_string(e.image_w)});
    }
  } catch (const Error& ex) {
    out.push_back({Severity::kFatal, e.image_id, "unreadable feature file", ex.what()});
  }
}

inline void check_box(const ManifestEntry& e, const PixelBox& b, const std::string& what,
                      Diagnostics& out) {
  if (b.degenerate()) {
    out.push_back({Severity::kFatal, e.image_id, "degenerate box",
                   what + " [" + std::to_string(b.x_min) + ", " + std::to_string(b.y_min) +
                       ", " + std::to_string(b.x_max) + ", " + std::to_string(b.y_max) +
                       "] has no area inside the image"});
  }
}

}  // namespace detail

/// Checks every manifest invariant. Empty result means the manifest is usable.
inline Diagnostics validate_manifest(const DatasetManifest& m, bool check_features = true) {
  Diagnostics out;
  std::set<std::string> seen;
  const int j = m.class_table.object_count();
  for (const auto& e : m.entries) {
    if (!seen.insert(e.image_id).second) {
      out.push_back({Severity::kFatal, e.image_id, "duplicate image id", ""});
    }
    if (e.image_h < 1 || e.image_w < 1) {
      out.push_back({Severity::kFatal, e.image_id, "invalid image size", ""});
      continue;
    }
    if (check_features) {
      detail::check_feature_file(e, e.feature_file, out);
      for (const auto& v : e.feature_variants) detail::check_feature_file(e, v, out);
    }
    for (std::size_t i = 0; i < e.annotations.size(); ++i) {
      const auto& a = e.annotations[i];
      const std::string what = "annotation " + std::to_string(i);
      if (a.class_id < 0 || a.class_id >= j) {
        out.push_back({Severity::kFatal, e.image_id, "unknown class",
                       what + " has class index " + std::to_string(a.class_id)});
      }
      detail::check_box(e, a.box, what, out);
      if (a.mask && !a.box.degenerate()) {
        const auto [w, h] = mask_extent(a.box);
        if (a.mask->width != w || a.mask->height != h) {
          out.push_back({Severity::kFatal, e.image_id, "mask extent",
                         what + " mask is " + std::to_string(a.mask->height) + "x" +
                             std::to_string(a.mask->width) + ", box needs " +
                             std::to_string(h) + "x" + std::to_string(w)});
        } else if (a.mask->foreground() == 0) {
          out.push_back({Severity::kFatal, e.image_id, "empty mask", what});
        }
      }
    }
    for (std::size_t i = 0; i < e.proposals.size(); ++i) {
      detail::check_box(e, e.proposals[i], "proposal " + std::to_string(i), out);
    }
  }
  return out;
}

/// Reads a manifest and returns it with parse-time and validation diagnostics.
inline io::ManifestLoad load_and_validate(const std::filesystem::path& path,
                                         bool check_features = true) {
  io::ManifestLoad load = io::read_manifest(path);
  for (auto& d : validate_manifest(load.manifest, check_features)) {
    load.diagnostics.push_back(std::move(d));
  }
  return load;
}

}  // namespace protodetect

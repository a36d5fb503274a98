#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace protodetect {

using Vector = std::vector<double>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Diagnostics

enum class Severity { kWarning, kFatal };

struct Diagnostic {
  Severity severity{Severity::kFatal};
  std::string entry;  // image id, file path, or "" for manifest-level issues
  std::string rule;   // short machine-readable tag, e.g. "degenerate box"
  std::string message;

  bool fatal() const { return severity == Severity::kFatal; }
};

using Diagnostics = std::vector<Diagnostic>;

inline bool has_fatal(const Diagnostics& diags) {
  for (const auto& d : diags) {
    if (d.fatal()) return true;
  }
  return false;
}

inline std::string to_string(const Diagnostic& d) {
  std::string out = d.fatal() ? "error" : "warning";
  if (!d.entry.empty()) out += " [" + d.entry + "]";
  out += " " + d.rule;
  if (!d.message.empty()) out += ": " + d.message;
  return out;
}

// ---------------------------------------------------------------------------
// Boxes and masks

/// Axis-aligned box in continuous pixel coordinates, half-open
/// [x_min, x_max) x [y_min, y_max).
struct PixelBox {
  double x_min{0}, y_min{0}, x_max{0}, y_max{0};

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const {
    return (x_max > x_min && y_max > y_min) ? width() * height() : 0.0;
  }
  bool degenerate() const { return !(x_min < x_max && y_min < y_max); }

  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

inline PixelBox clip_box(const PixelBox& b, double image_w, double image_h) {
  return {std::clamp(b.x_min, 0.0, image_w), std::clamp(b.y_min, 0.0, image_h),
          std::clamp(b.x_max, 0.0, image_w), std::clamp(b.y_max, 0.0, image_h)};
}

/// Binary foreground mask covering the integer pixel envelope of a box:
/// column 0 is pixel floor(x_min), row 0 is pixel floor(y_min).
struct Mask {
  int width{0};
  int height{0};
  std::vector<std::uint8_t> bits;  // row-major, 0 or 1

  bool at(int row, int col) const {
    return bits[static_cast<std::size_t>(row) * width + col] != 0;
  }
  std::size_t foreground() const {
    std::size_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Mask extent expected for a box.
inline std::pair<int, int> mask_extent(const PixelBox& b) {
  const int w = static_cast<int>(std::ceil(b.x_max) - std::floor(b.x_min));
  const int h = static_cast<int>(std::ceil(b.y_max) - std::floor(b.y_min));
  return {w, h};
}

struct Annotation {
  PixelBox box;
  int class_id{0};
  std::optional<Mask> mask;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

// ---------------------------------------------------------------------------
// Classes

enum class ClassRole { kBase, kNovel };

inline const char* to_string(ClassRole r) {
  return r == ClassRole::kBase ? "base" : "novel";
}

struct ObjectClass {
  std::string name;
  ClassRole role{ClassRole::kNovel};
  friend bool operator==(const ObjectClass&, const ObjectClass&) = default;
};

/// Maps class names (files) to dense indices (memory). Rows [0, J) are object
/// classes, rows [J, J+K) background clusters.
class ClassTable {
 public:
  ClassTable() = default;
  ClassTable(std::vector<ObjectClass> objects, int background_count)
      : objects_(std::move(objects)), background_count_(background_count) {
    if (objects_.empty()) throw Error("class table needs at least one object class");
    if (background_count_ < 0) throw Error("negative background count");
    for (std::size_t i = 0; i < objects_.size(); ++i) {
      for (std::size_t j = i + 1; j < objects_.size(); ++j) {
        if (objects_[i].name == objects_[j].name) {
          throw Error("duplicate class name '" + objects_[i].name + "'");
        }
      }
    }
  }

  int object_count() const { return static_cast<int>(objects_.size()); }
  int background_count() const { return background_count_; }
  int total_rows() const { return object_count() + background_count_; }
  bool is_background_row(int row) const { return row >= object_count(); }

  const std::vector<ObjectClass>& objects() const { return objects_; }
  const ObjectClass& object(int id) const { return objects_.at(id); }

  std::optional<int> find(const std::string& name) const {
    for (std::size_t i = 0; i < objects_.size(); ++i) {
      if (objects_[i].name == name) return static_cast<int>(i);
    }
    return std::nullopt;
  }

  std::string row_label(int row) const {
    if (row < object_count()) return objects_[row].name;
    return "bg" + std::to_string(row - object_count());
  }

  std::vector<int> ids_with_role(ClassRole role) const {
    std::vector<int> out;
    for (int i = 0; i < object_count(); ++i) {
      if (objects_[i].role == role) out.push_back(i);
    }
    return out;
  }

  ClassTable with_background(int k) const { return ClassTable(objects_, k); }

  friend bool operator==(const ClassTable&, const ClassTable&) = default;

 private:
  std::vector<ObjectClass> objects_;
  int background_count_{0};
};

// ---------------------------------------------------------------------------
// Feature maps

struct GridGeometry {
  int grid_h{0}, grid_w{0};
  int patch_size{1};
  int image_h{0}, image_w{0};

  int cells() const { return grid_h * grid_w; }
  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

inline bool grid_covers_image(int grid, int patch, int image) {
  return static_cast<long>(grid) * patch >= image &&
         static_cast<long>(grid - 1) * patch < image;
}

/// Dense grid of per-patch embeddings, row-major (row, col, channel).
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(GridGeometry geom, int dim, std::vector<float> data)
      : geom_(geom), dim_(dim), data_(std::move(data)) {
    if (dim_ < 1) throw Error("feature dim must be >= 1");
    if (geom_.grid_h < 1 || geom_.grid_w < 1 || geom_.patch_size < 1 ||
        geom_.image_h < 1 || geom_.image_w < 1) {
      throw Error("feature map sizes must be positive");
    }
    if (!grid_covers_image(geom_.grid_h, geom_.patch_size, geom_.image_h) ||
        !grid_covers_image(geom_.grid_w, geom_.patch_size, geom_.image_w)) {
      throw Error("feature grid does not match image size (grid " +
                  std::to_string(geom_.grid_h) + "x" +
                  std::to_string(geom_.grid_w) + ", patch " +
                  std::to_string(geom_.patch_size) + ", image " +
                  std::to_string(geom_.image_h) + "x" +
                  std::to_string(geom_.image_w) + ")");
    }
    if (data_.size() != static_cast<std::size_t>(geom_.cells()) * dim_) {
      throw Error("feature payload size mismatch");
    }
    for (float v : data_) {
      if (!std::isfinite(v)) throw Error("non-finite feature value");
    }
  }

  const GridGeometry& geometry() const { return geom_; }
  int grid_h() const { return geom_.grid_h; }
  int grid_w() const { return geom_.grid_w; }
  int patch_size() const { return geom_.patch_size; }
  int image_h() const { return geom_.image_h; }
  int image_w() const { return geom_.image_w; }
  int dim() const { return dim_; }

  std::span<const float> cell(int row, int col) const {
    return {data_.data() + (static_cast<std::size_t>(row) * geom_.grid_w + col) * dim_,
            static_cast<std::size_t>(dim_)};
  }
  const std::vector<float>& data() const { return data_; }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  GridGeometry geom_;
  int dim_{0};
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Prototypes

enum class Provenance { kAveraged, kFinetuned };

inline const char* to_string(Provenance p) {
  return p == Provenance::kAveraged ? "averaged" : "finetuned";
}

inline double l2_norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double l2_norm(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

/// J object rows followed by K background rows, each unit L2 norm.
class PrototypeSet {
 public:
  PrototypeSet() = default;

  /// Normalizes every row on the way in; a zero-norm row is an error.
  PrototypeSet(ClassTable table, int dim, const std::vector<double>& rows,
               double temperature, Provenance provenance)
      : table_(std::move(table)),
        dim_(dim),
        temperature_(temperature),
        provenance_(provenance) {
    check_shape(rows.size());
    vectors_.resize(rows.size());
    for (int r = 0; r < table_.total_rows(); ++r) {
      std::span<const double> row(rows.data() + static_cast<std::size_t>(r) * dim_,
                                  static_cast<std::size_t>(dim_));
      const double n = l2_norm(row);
      if (!(n > 0) || !std::isfinite(n)) {
        throw Error("degenerate prototype for row '" + table_.row_label(r) + "'");
      }
      for (int d = 0; d < dim_; ++d) {
        vectors_[static_cast<std::size_t>(r) * dim_ + d] = static_cast<float>(row[d] / n);
      }
    }
  }

  /// Float rows read from disk. Unit rows are kept bit for bit; any other
  /// row is renormalized.
  static PrototypeSet from_stored(ClassTable table, int dim, std::vector<float> rows,
                                  double temperature, Provenance provenance) {
    PrototypeSet p;
    p.table_ = std::move(table);
    p.dim_ = dim;
    p.temperature_ = temperature;
    p.provenance_ = provenance;
    p.check_shape(rows.size());
    for (float v : rows) {
      if (!std::isfinite(v)) throw Error("non-finite prototype value");
    }
    for (int r = 0; r < p.table_.total_rows(); ++r) {
      std::span<float> row(rows.data() + static_cast<std::size_t>(r) * dim,
                           static_cast<std::size_t>(dim));
      const double n = l2_norm(std::span<const float>(row));
      if (!(n > 0)) throw Error("degenerate prototype for row '" + p.table_.row_label(r) + "'");
      if (std::abs(n - 1.0) <= 1e-6) continue;
      for (float& v : row) v = static_cast<float>(v / n);
    }
    p.vectors_ = std::move(rows);
    return p;
  }

  const ClassTable& class_table() const { return table_; }
  int dim() const { return dim_; }
  int rows() const { return table_.total_rows(); }
  double temperature() const { return temperature_; }
  Provenance provenance() const { return provenance_; }

  std::span<const float> row(int r) const {
    return {vectors_.data() + static_cast<std::size_t>(r) * dim_,
            static_cast<std::size_t>(dim_)};
  }
  const std::vector<float>& data() const { return vectors_; }

  std::vector<double> rows_as_double() const {
    return {vectors_.begin(), vectors_.end()};
  }

  friend bool operator==(const PrototypeSet&, const PrototypeSet&) = default;

 private:
  void check_shape(std::size_t n) const {
    if (dim_ < 1) throw Error("prototype dim must be >= 1");
    if (!(temperature_ > 0)) throw Error("temperature must be positive");
    if (n != static_cast<std::size_t>(table_.total_rows()) * dim_) {
      throw Error("prototype matrix size does not match class table");
    }
  }

  ClassTable table_;
  int dim_{0};
  double temperature_{0.1};
  Provenance provenance_{Provenance::kAveraged};
  std::vector<float> vectors_;
};

// ---------------------------------------------------------------------------
// Detections and manifests

struct Detection {
  PixelBox box;
  int class_id{0};
  double score{0};
  friend bool operator==(const Detection&, const Detection&) = default;
};

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path feature_file;
  // Photometrically augmented exports of the same image, optional.
  std::vector<std::filesystem::path> feature_variants;
  int image_h{0};
  int image_w{0};
  std::vector<Annotation> annotations;
  std::vector<PixelBox> proposals;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

enum class SplitRole { kTrainShots, kTest };

inline const char* to_string(SplitRole r) {
  return r == SplitRole::kTrainShots ? "train_shots" : "test";
}

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  ClassTable class_table;
  SplitRole split_role{SplitRole::kTest};

  const ManifestEntry* find(const std::string& image_id) const {
    for (const auto& e : entries) {
      if (e.image_id == image_id) return &e;
    }
    return nullptr;
  }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

}  // namespace protodetect

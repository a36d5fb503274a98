#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "protodetect/core_types.hpp"
#include "protodetect/geometry.hpp"
#include "protodetect/io.hpp"
#include "protodetect/random.hpp"

namespace protodetect {

/// Area-weighted mean of the patch embeddings under a box. With a mask, cells
/// are additionally weighted by their foreground fraction; a mask with no
/// foreground inside the box falls back to plain box pooling and records a
/// warning in `diags`.
inline Vector pool_box_embedding(const FeatureMap& fm, const PixelBox& box,
                                 const Mask* mask = nullptr, Diagnostics* diags = nullptr) {
  bool fallback = false;
  const auto cells = pooling_weights(box, fm.geometry(), mask, &fallback);
  if (fallback && diags != nullptr) {
    diags->push_back({Severity::kWarning, "", "empty mask overlap",
                      "mask has no foreground inside the box; pooled without mask"});
  }
  Vector out(static_cast<std::size_t>(fm.dim()), 0.0);
  for (const auto& c : cells) {
    const auto f = fm.cell(c.row, c.col);
    for (int d = 0; d < fm.dim(); ++d) out[d] += c.weight * f[d];
  }
  return out;
}

struct ObjectPrototypeOptions {
  bool use_masks{false};
  double temperature{0.1};
};

/// One row per object class: the mean of the per-box pooled embeddings of
/// that class's annotations, L2-normalized.
inline PrototypeSet build_object_prototypes(const DatasetManifest& manifest,
                                            const io::FeatureLoader& load,
                                            const ObjectPrototypeOptions& opts = {},
                                            Diagnostics* diags = nullptr) {
  const ClassTable& table = manifest.class_table;
  const int j = table.object_count();
  int dim = 0;
  std::vector<Vector> sums(static_cast<std::size_t>(j));
  std::vector<int> counts(static_cast<std::size_t>(j), 0);

  for (const auto& entry : manifest.entries) {
    if (entry.annotations.empty()) continue;
    const FeatureMap fm = load(entry.feature_file);
    if (dim == 0) {
      dim = fm.dim();
      for (auto& s : sums) s.assign(static_cast<std::size_t>(dim), 0.0);
    } else if (fm.dim() != dim) {
      throw Error("feature dim mismatch in '" + entry.image_id + "'");
    }
    for (const auto& a : entry.annotations) {
      Diagnostics local;
      const Mask* mask = (opts.use_masks && a.mask) ? &*a.mask : nullptr;
      const Vector e = pool_box_embedding(fm, a.box, mask, &local);
      if (diags != nullptr) {
        for (auto& d : local) {
          d.entry = entry.image_id;
          diags->push_back(std::move(d));
        }
      }
      for (int d = 0; d < dim; ++d) sums[a.class_id][d] += e[d];
      ++counts[a.class_id];
    }
  }

  for (int c = 0; c < j; ++c) {
    if (counts[c] == 0) throw Error("class '" + table.object(c).name + "' has no annotated shots");
  }
  std::vector<double> rows;
  rows.reserve(static_cast<std::size_t>(j) * dim);
  for (int c = 0; c < j; ++c) {
    for (int d = 0; d < dim; ++d) rows.push_back(sums[c][d] / counts[c]);
  }
  return PrototypeSet(table.with_background(0), dim, rows, opts.temperature,
                      Provenance::kAveraged);
}

// ---------------------------------------------------------------------------
// Background crops

struct CropSample {
  std::string image_id;
  PixelBox box;
  Vector embedding;
};

struct SizeRange {
  double min_w{1}, max_w{1}, min_h{1}, max_h{1};
};

/// Width/height range spanned by the manifest's annotations. Without
/// annotations, 1/8 to 1/2 of the smallest image side.
inline SizeRange annotation_size_range(const DatasetManifest& m) {
  SizeRange r{std::numeric_limits<double>::max(), 0, std::numeric_limits<double>::max(), 0};
  bool any = false;
  int min_side = std::numeric_limits<int>::max();
  for (const auto& e : m.entries) {
    min_side = std::min({min_side, e.image_w, e.image_h});
    for (const auto& a : e.annotations) {
      if (a.box.degenerate()) continue;
      any = true;
      r.min_w = std::min(r.min_w, a.box.width());
      r.max_w = std::max(r.max_w, a.box.width());
      r.min_h = std::min(r.min_h, a.box.height());
      r.max_h = std::max(r.max_h, a.box.height());
    }
  }
  if (!any) {
    const double side = m.entries.empty() ? 1.0 : min_side;
    return {side / 8, side / 2, side / 8, side / 2};
  }
  return r;
}

inline constexpr int kCropAttempts = 50;

/// Up to `count` boxes with zero intersection area with every `occupied`
/// box. Each crop gets at most kCropAttempts rejection-sampling tries.
inline std::vector<PixelBox> sample_object_free_boxes(double image_w, double image_h,
                                                      const std::vector<PixelBox>& occupied,
                                                      int count, const SizeRange& sizes, Rng& rng) {
  std::vector<PixelBox> out;
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < kCropAttempts; ++attempt) {
      const double w = std::min(rng.uniform(sizes.min_w, sizes.max_w), image_w);
      const double h = std::min(rng.uniform(sizes.min_h, sizes.max_h), image_h);
      const double x = rng.uniform(0.0, image_w - w);
      const double y = rng.uniform(0.0, image_h - h);
      const PixelBox cand{x, y, x + w, y + h};
      if (cand.degenerate()) continue;
      const bool clear = std::none_of(occupied.begin(), occupied.end(), [&](const PixelBox& o) {
        return intersection_area(cand, o) > 0;
      });
      if (clear) {
        out.push_back(cand);
        break;
      }
    }
  }
  return out;
}

inline std::vector<CropSample> sample_background_crops(const DatasetManifest& manifest,
                                                       int crops_per_image, std::uint64_t seed,
                                                       const io::FeatureLoader& load,
                                                       Diagnostics* diags = nullptr) {
  const SizeRange sizes = annotation_size_range(manifest);
  Rng rng(seed);
  std::vector<CropSample> out;
  for (const auto& entry : manifest.entries) {
    std::vector<PixelBox> occupied;
    for (const auto& a : entry.annotations) occupied.push_back(a.box);
    const auto boxes =
        sample_object_free_boxes(entry.image_w, entry.image_h, occupied, crops_per_image, sizes, rng);
    if (static_cast<int>(boxes.size()) < crops_per_image && diags != nullptr) {
      diags->push_back({Severity::kWarning, entry.image_id, "few background crops",
                        std::to_string(boxes.size()) + " of " + std::to_string(crops_per_image) +
                            " crops found free of annotations"});
    }
    if (boxes.empty()) continue;
    const FeatureMap fm = load(entry.feature_file);
    for (const auto& b : boxes) out.push_back({entry.image_id, b, pool_box_embedding(fm, b)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// K-Means

struct KMeansResult {
  std::vector<Vector> centroids;
  std::vector<int> assignments;
  double inertia{0};
  std::vector<double> inertia_history;  // after each assignment step
  int iterations{0};
};

struct KMeansOptions {
  int max_iters{100};
  double tol{1e-5};  // on the largest centroid displacement
};

namespace detail {

inline double squared_distance(const Vector& a, const Vector& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Nearest centroid, ties to the lowest index. Returns inertia.
inline double assign_points(const std::vector<Vector>& points, const std::vector<Vector>& centroids,
                            std::vector<int>& assignments, std::vector<double>& dist) {
  double inertia = 0;
  for (std::size_t p = 0; p < points.size(); ++p) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = squared_distance(points[p], centroids[c]);
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    assignments[p] = arg;
    dist[p] = best;
    inertia += best;
  }
  return inertia;
}

}  // namespace detail

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// re-seeded at the point farthest from its centroid. k larger than the
/// number of points is reduced (with a warning in `diags`).
inline KMeansResult kmeans(const std::vector<Vector>& points, int k, std::uint64_t seed,
                           const KMeansOptions& opts = {}, Diagnostics* diags = nullptr) {
  if (points.empty()) throw Error("kmeans needs at least one point");
  if (k < 1) throw Error("kmeans needs k >= 1");
  const std::size_t n = points.size();
  if (static_cast<std::size_t>(k) > n) {
    if (diags != nullptr) {
      diags->push_back({Severity::kWarning, "", "k reduced",
                        "requested " + std::to_string(k) + " clusters for " + std::to_string(n) +
                            " points; using " + std::to_string(n)});
    }
    k = static_cast<int>(n);
  }

  Rng rng(seed);
  KMeansResult res;
  std::vector<char> chosen(n, 0);
  std::size_t first = rng.below(n);
  res.centroids.push_back(points[first]);
  chosen[first] = 1;
  std::vector<double> d2(n);
  for (std::size_t p = 0; p < n; ++p) d2[p] = detail::squared_distance(points[p], points[first]);
  while (static_cast<int>(res.centroids.size()) < k) {
    double total = 0;
    for (std::size_t p = 0; p < n; ++p) total += chosen[p] ? 0.0 : d2[p];
    std::size_t pick = n;
    if (total > 0) {
      double target = rng.uniform() * total;
      for (std::size_t p = 0; p < n; ++p) {
        if (chosen[p] || d2[p] <= 0) continue;
        pick = p;
        target -= d2[p];
        if (target < 0) break;
      }
    } else {
      // All remaining points coincide with a centroid; take any unchosen one.
      std::vector<std::size_t> left;
      for (std::size_t p = 0; p < n; ++p) {
        if (!chosen[p]) left.push_back(p);
      }
      pick = left[rng.below(left.size())];
    }
    chosen[pick] = 1;
    res.centroids.push_back(points[pick]);
    for (std::size_t p = 0; p < n; ++p) {
      d2[p] = std::min(d2[p], detail::squared_distance(points[p], points[pick]));
    }
  }

  const std::size_t dim = points.front().size();
  res.assignments.assign(n, 0);
  std::vector<double> dist(n);
  for (int it = 0; it < opts.max_iters; ++it) {
    res.inertia = detail::assign_points(points, res.centroids, res.assignments, dist);
    res.inertia_history.push_back(res.inertia);
    res.iterations = it + 1;

    std::vector<Vector> sums(static_cast<std::size_t>(k), Vector(dim, 0.0));
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t p = 0; p < n; ++p) {
      const int c = res.assignments[p];
      for (std::size_t d = 0; d < dim; ++d) sums[c][d] += points[p][d];
      ++counts[c];
    }
    double shift = 0;
    std::vector<char> taken(n, 0);
    for (int c = 0; c < k; ++c) {
      Vector next(dim);
      if (counts[c] > 0) {
        for (std::size_t d = 0; d < dim; ++d) next[d] = sums[c][d] / counts[c];
      } else {
        std::size_t far = 0;
        double best = -1;
        for (std::size_t p = 0; p < n; ++p) {
          if (!taken[p] && dist[p] > best) {
            best = dist[p];
            far = p;
          }
        }
        taken[far] = 1;
        next = points[far];
      }
      shift = std::max(shift, std::sqrt(detail::squared_distance(next, res.centroids[c])));
      res.centroids[c] = std::move(next);
    }
    if (shift < opts.tol) break;
  }
  // Final assignment against the converged centroids.
  res.inertia = detail::assign_points(points, res.centroids, res.assignments, dist);
  res.inertia_history.push_back(res.inertia);
  return res;
}

/// K-Means over crop embeddings; each cluster's mean becomes one normalized
/// background row. Fewer than `k` rows come back when crops are scarce.
inline std::vector<Vector> build_background_prototypes(const std::vector<CropSample>& crops, int k,
                                                       std::uint64_t seed,
                                                       const KMeansOptions& opts = {},
                                                       Diagnostics* diags = nullptr) {
  if (crops.empty()) throw Error("no background crops to cluster");
  std::vector<Vector> points;
  points.reserve(crops.size());
  for (const auto& c : crops) points.push_back(c.embedding);
  const KMeansResult km = kmeans(points, k, seed, opts, diags);

  const std::size_t dim = points.front().size();
  const std::size_t kk = km.centroids.size();
  std::vector<Vector> means(kk, Vector(dim, 0.0));
  std::vector<int> counts(kk, 0);
  for (std::size_t p = 0; p < points.size(); ++p) {
    const int c = km.assignments[p];
    for (std::size_t d = 0; d < dim; ++d) means[c][d] += points[p][d];
    ++counts[c];
  }
  std::vector<Vector> rows;
  for (std::size_t c = 0; c < kk; ++c) {
    Vector v = counts[c] > 0 ? means[c] : km.centroids[c];
    if (counts[c] > 0) {
      for (double& x : v) x /= counts[c];
    }
    const double norm = l2_norm(v);
    if (!(norm > 0)) {
      if (diags != nullptr) {
        diags->push_back({Severity::kWarning, "", "degenerate background cluster",
                          "cluster " + std::to_string(c) + " has a zero mean; dropped"});
      }
      continue;
    }
    for (double& x : v) x /= norm;
    rows.push_back(std::move(v));
  }
  if (rows.empty()) throw Error("every background cluster is degenerate");
  return rows;
}

/// Object rows of `objects` followed by `background` rows. Any background
/// rows already in `objects` are replaced.
inline PrototypeSet with_background_rows(const PrototypeSet& objects,
                                         const std::vector<Vector>& background) {
  const int j = objects.class_table().object_count();
  std::vector<double> rows;
  rows.reserve(static_cast<std::size_t>(j + background.size()) * objects.dim());
  for (int r = 0; r < j; ++r) {
    for (float v : objects.row(r)) rows.push_back(v);
  }
  for (const auto& b : background) {
    if (static_cast<int>(b.size()) != objects.dim()) throw Error("background row dim mismatch");
    rows.insert(rows.end(), b.begin(), b.end());
  }
  return PrototypeSet(objects.class_table().with_background(static_cast<int>(background.size())),
                      objects.dim(), rows, objects.temperature(), objects.provenance());
}

}  // namespace protodetect

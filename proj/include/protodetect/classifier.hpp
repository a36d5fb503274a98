#pragma once

#include <vector>

#include "protodetect/core_types.hpp"
#include "protodetect/geometry.hpp"

namespace protodetect {

/// Per-cell cosine similarity against every prototype row.
struct SimilarityMap {
  GridGeometry geometry;
  int rows{0};
  std::vector<double> values;  // (grid_h * grid_w) x rows

  const double* cell(int r, int c) const {
    return values.data() + (static_cast<std::size_t>(r) * geometry.grid_w + c) * rows;
  }
};

inline SimilarityMap similarity_map(const FeatureMap& fm, const PrototypeSet& protos) {
  if (fm.dim() != protos.dim()) {
    throw Error("feature dim " + std::to_string(fm.dim()) + " does not match prototype dim " +
                std::to_string(protos.dim()));
  }
  SimilarityMap sim{fm.geometry(), protos.rows(), {}};
  sim.values.assign(static_cast<std::size_t>(fm.geometry().cells()) * sim.rows, 0.0);
  const int dim = fm.dim();
  for (int r = 0; r < fm.grid_h(); ++r) {
    for (int c = 0; c < fm.grid_w(); ++c) {
      const auto f = fm.cell(r, c);
      const double norm = l2_norm(f);
      if (!(norm > 0)) continue;  // zero feature scores 0 everywhere
      double* out = sim.values.data() + (static_cast<std::size_t>(r) * fm.grid_w() + c) * sim.rows;
      for (int p = 0; p < sim.rows; ++p) {
        const auto row = protos.row(p);
        double dot = 0;
        for (int d = 0; d < dim; ++d) dot += static_cast<double>(f[d]) * row[d];
        out[p] = dot / norm;
      }
    }
  }
  return sim;
}

using BoxScores = std::vector<double>;

/// Area-weighted mean similarity per prototype row inside a box.
inline BoxScores score_box(const SimilarityMap& sim, const PixelBox& box,
                           const Mask* mask = nullptr) {
  const auto cells = pooling_weights(box, sim.geometry, mask);
  BoxScores out(static_cast<std::size_t>(sim.rows), 0.0);
  for (const auto& w : cells) {
    const double* v = sim.cell(w.row, w.col);
    for (int p = 0; p < sim.rows; ++p) out[p] += w.weight * v[p];
  }
  return out;
}

struct Verdict {
  bool background{false};
  int row{0};       // winning prototype row
  int class_id{-1}; // object class when !background
  double score{0};  // winning average similarity
};

/// Argmax over all J+K rows, ties to the lowest row.
inline Verdict classify_proposal(const BoxScores& scores, const ClassTable& table) {
  if (static_cast<int>(scores.size()) != table.total_rows()) {
    throw Error("score vector length does not match class table");
  }
  int best = 0;
  for (int r = 1; r < static_cast<int>(scores.size()); ++r) {
    if (scores[r] > scores[best]) best = r;
  }
  Verdict v{table.is_background_row(best), best, -1, scores[best]};
  if (!v.background) v.class_id = best;
  return v;
}

enum class ScoreMode {
  kRaw,     // winning average similarity
  kMargin,  // winning similarity minus the best background similarity
};

struct DetectOptions {
  double nms_iou{0.5};
  bool class_agnostic_nms{false};
  ScoreMode score_mode{ScoreMode::kRaw};
};

inline std::vector<Detection> detect_image(const FeatureMap& fm,
                                           const std::vector<PixelBox>& proposals,
                                           const PrototypeSet& protos,
                                           const DetectOptions& opts = {}) {
  if (proposals.empty()) return {};
  const SimilarityMap sim = similarity_map(fm, protos);
  const ClassTable& table = protos.class_table();
  std::vector<Detection> candidates;
  for (const auto& raw : proposals) {
    const PixelBox box = clip_box(raw, fm.image_w(), fm.image_h());
    if (box.degenerate()) continue;
    const BoxScores scores = score_box(sim, box);
    const Verdict v = classify_proposal(scores, table);
    if (v.background) continue;
    double score = v.score;
    if (opts.score_mode == ScoreMode::kMargin && table.background_count() > 0) {
      double best_bg = scores[table.object_count()];
      for (int r = table.object_count(); r < table.total_rows(); ++r) {
        best_bg = std::max(best_bg, scores[r]);
      }
      score -= best_bg;
    }
    candidates.push_back({raw, v.class_id, score});
  }
  return nms(candidates, opts.nms_iou, opts.class_agnostic_nms);
}

}  // namespace protodetect

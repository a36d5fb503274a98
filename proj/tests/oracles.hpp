#pragma once

// Brute-force reference implementations used by the unit tests and the
// acceptance run. They share no code with the engine beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "protodetect/core_types.hpp"

namespace oracle {

using protodetect::Detection;
using protodetect::FeatureMap;
using protodetect::Mask;
using protodetect::PixelBox;

inline double overlap_1d(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

inline double box_iou(const PixelBox& a, const PixelBox& b) {
  const double inter = overlap_1d(a.x_min, a.x_max, b.x_min, b.x_max) *
                       overlap_1d(a.y_min, a.y_max, b.y_min, b.y_max);
  if (inter <= 0) return 0;
  const double ua = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double ub = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  return inter / (ua + ub - inter);
}

// Per-pixel weights of a box after clipping to the image: fractional pixel
// coverage, times the mask bit when a mask is given. Mask pixel (my, mx)
// sits at image pixel (floor(y_min) + my, floor(x_min) + mx).
inline std::vector<double> pixel_weights(const PixelBox& box, int image_w, int image_h,
                                         const Mask* mask) {
  const double x0 = std::clamp(box.x_min, 0.0, double(image_w));
  const double x1 = std::clamp(box.x_max, 0.0, double(image_w));
  const double y0 = std::clamp(box.y_min, 0.0, double(image_h));
  const double y1 = std::clamp(box.y_max, 0.0, double(image_h));
  std::vector<double> w(static_cast<std::size_t>(image_w) * image_h, 0.0);
  const int ox = static_cast<int>(std::floor(box.x_min));
  const int oy = static_cast<int>(std::floor(box.y_min));
  for (int y = 0; y < image_h; ++y) {
    for (int x = 0; x < image_w; ++x) {
      double cover = overlap_1d(x, x + 1, x0, x1) * overlap_1d(y, y + 1, y0, y1);
      if (cover <= 0) continue;
      if (mask != nullptr) {
        const int my = y - oy, mx = x - ox;
        const bool in = my >= 0 && mx >= 0 && my < mask->height && mx < mask->width &&
                        mask->bits[static_cast<std::size_t>(my) * mask->width + mx];
        if (!in) cover = 0;
      }
      w[static_cast<std::size_t>(y) * image_w + x] = cover;
    }
  }
  return w;
}

// Nearest-neighbour upsampling of the grid to pixels, then a weighted pixel
// mean. Falls back to unmasked weights when the mask leaves nothing.
inline std::vector<double> pixel_pool(const FeatureMap& fm, const PixelBox& box,
                                      const Mask* mask = nullptr) {
  const int ps = fm.patch_size();
  auto w = pixel_weights(box, fm.image_w(), fm.image_h(), mask);
  double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (total <= 0 && mask != nullptr) {
    w = pixel_weights(box, fm.image_w(), fm.image_h(), nullptr);
    total = std::accumulate(w.begin(), w.end(), 0.0);
  }
  std::vector<double> out(static_cast<std::size_t>(fm.dim()), 0.0);
  for (int y = 0; y < fm.image_h(); ++y) {
    for (int x = 0; x < fm.image_w(); ++x) {
      const double wp = w[static_cast<std::size_t>(y) * fm.image_w() + x];
      if (wp <= 0) continue;
      const auto cell = fm.cell(y / ps, x / ps);
      for (int d = 0; d < fm.dim(); ++d) out[d] += wp * cell[d];
    }
  }
  for (double& v : out) v /= total;
  return out;
}

// Per-pixel cosine similarity against each row, then the same weighted mean.
inline std::vector<double> pixel_scores(const FeatureMap& fm,
                                        const std::vector<std::vector<double>>& rows,
                                        const PixelBox& box, const Mask* mask = nullptr) {
  const int ps = fm.patch_size();
  auto w = pixel_weights(box, fm.image_w(), fm.image_h(), mask);
  double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (total <= 0 && mask != nullptr) {
    w = pixel_weights(box, fm.image_w(), fm.image_h(), nullptr);
    total = std::accumulate(w.begin(), w.end(), 0.0);
  }
  std::vector<double> out(rows.size(), 0.0);
  for (int y = 0; y < fm.image_h(); ++y) {
    for (int x = 0; x < fm.image_w(); ++x) {
      const double wp = w[static_cast<std::size_t>(y) * fm.image_w() + x];
      if (wp <= 0) continue;
      const auto cell = fm.cell(y / ps, x / ps);
      double fn = 0;
      for (float v : cell) fn += double(v) * v;
      fn = std::sqrt(fn);
      if (fn == 0) continue;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        double dot = 0, rn = 0;
        for (int d = 0; d < fm.dim(); ++d) {
          dot += cell[d] * rows[r][d];
          rn += rows[r][d] * rows[r][d];
        }
        out[r] += wp * dot / (fn * std::sqrt(rn));
      }
    }
  }
  for (double& v : out) v /= total;
  return out;
}

// Suppression formulation of greedy NMS: repeatedly take the best remaining
// candidate (score, then smaller area, then input order) and delete every
// remaining candidate of its class that overlaps it by at least `thr`.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double thr,
                                  bool class_agnostic) {
  std::vector<bool> alive(dets.size(), true);
  std::vector<Detection> kept;
  for (;;) {
    int best = -1;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (!alive[i]) continue;
      if (best < 0) {
        best = static_cast<int>(i);
        continue;
      }
      const auto& a = dets[i];
      const auto& b = dets[best];
      const double aa = (a.box.x_max - a.box.x_min) * (a.box.y_max - a.box.y_min);
      const double ab = (b.box.x_max - b.box.x_min) * (b.box.y_max - b.box.y_min);
      if (a.score > b.score || (a.score == b.score && aa < ab)) best = static_cast<int>(i);
    }
    if (best < 0) break;
    alive[best] = false;
    kept.push_back(dets[best]);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (!alive[i]) continue;
      if (!class_agnostic && dets[i].class_id != dets[best].class_id) continue;
      if (box_iou(dets[i].box, dets[best].box) >= thr) alive[i] = false;
    }
  }
  return kept;
}

struct ScoredBox {
  std::size_t image;
  PixelBox box;
  double score;
};

// Area under the interpolated precision curve p(r) = max{P_k : R_k >= r},
// integrated piece by piece between consecutive distinct recall levels.
// Detections at each threshold are matched from scratch.
inline double average_precision(const std::vector<ScoredBox>& dets,
                                const std::vector<std::vector<PixelBox>>& gt, double iou_thr) {
  std::size_t n_gt = 0;
  for (const auto& g : gt) n_gt += g.size();
  if (n_gt == 0) return 0;
  std::vector<ScoredBox> sorted = dets;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  std::vector<double> R, P;
  for (std::size_t k = 1; k <= sorted.size(); ++k) {
    std::vector<std::vector<bool>> used(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), false);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const auto& d = sorted[i];
      int best = -1;
      double best_iou = 0;
      for (std::size_t g = 0; g < gt[d.image].size(); ++g) {
        if (used[d.image][g]) continue;
        const double v = box_iou(d.box, gt[d.image][g]);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= iou_thr) {
        used[d.image][best] = true;
        ++tp;
      }
    }
    R.push_back(double(tp) / n_gt);
    P.push_back(double(tp) / k);
  }
  std::vector<double> levels = R;
  levels.push_back(0);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  double ap = 0;
  for (std::size_t i = 1; i < levels.size(); ++i) {
    double p = 0;
    for (std::size_t k = 0; k < R.size(); ++k) {
      if (R[k] >= levels[i]) p = std::max(p, P[k]);
    }
    ap += (levels[i] - levels[i - 1]) * p;
  }
  return ap;
}

}  // namespace oracle

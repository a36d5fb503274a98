#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "protodetect/core_types.hpp"

namespace protodetect {

inline double intersection_area(const PixelBox& a, const PixelBox& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const PixelBox& a, const PixelBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::min(1.0, inter / uni) : 0.0;
}

struct CellWeight {
  int row{0};
  int col{0};
  double weight{0};  // covered fraction of the cell's p_s x p_s footprint
  friend bool operator==(const CellWeight&, const CellWeight&) = default;
};

using OverlapWeightMap = std::vector<CellWeight>;

/// Fractional footprint coverage of every grid cell a box touches. Averaging
/// cell values with these weights equals nearest-neighbour upsampling to
/// pixel resolution followed by a pixel mean over the box.
inline OverlapWeightMap box_to_cell_weights(const PixelBox& box, const GridGeometry& g) {
  const PixelBox b = clip_box(box, g.image_w, g.image_h);
  if (b.degenerate()) throw Error("degenerate box");
  const double ps = g.patch_size;
  const int r0 = std::clamp(static_cast<int>(std::floor(b.y_min / ps)), 0, g.grid_h - 1);
  const int r1 = std::clamp(static_cast<int>(std::ceil(b.y_max / ps)) - 1, 0, g.grid_h - 1);
  const int c0 = std::clamp(static_cast<int>(std::floor(b.x_min / ps)), 0, g.grid_w - 1);
  const int c1 = std::clamp(static_cast<int>(std::ceil(b.x_max / ps)) - 1, 0, g.grid_w - 1);

  OverlapWeightMap out;
  for (int r = r0; r <= r1; ++r) {
    const double oy = std::min(b.y_max, (r + 1) * ps) - std::max(b.y_min, r * ps);
    if (oy <= 0) continue;
    for (int c = c0; c <= c1; ++c) {
      const double ox = std::min(b.x_max, (c + 1) * ps) - std::max(b.x_min, c * ps);
      if (ox <= 0) continue;
      out.push_back({r, c, ox * oy / (ps * ps)});
    }
  }
  if (out.empty()) throw Error("degenerate box");
  return out;
}

/// Cell weights for pooling, normalized to sum 1. With a mask, each cell's
/// weight is scaled by the foreground fraction of its covered pixels. If the
/// mask leaves no foreground inside the box, box-only weights are returned
/// and `mask_fallback` is set.
inline OverlapWeightMap pooling_weights(const PixelBox& box, const GridGeometry& g,
                                        const Mask* mask = nullptr,
                                        bool* mask_fallback = nullptr) {
  OverlapWeightMap cells = box_to_cell_weights(box, g);
  if (mask_fallback != nullptr) *mask_fallback = false;

  if (mask != nullptr) {
    const auto [mw, mh] = mask_extent(box);
    if (mask->width != mw || mask->height != mh ||
        mask->bits.size() != static_cast<std::size_t>(mw) * mh) {
      throw Error("mask extent does not match box");
    }
    const PixelBox b = clip_box(box, g.image_w, g.image_h);
    const int x0 = static_cast<int>(std::floor(box.x_min));
    const int y0 = static_cast<int>(std::floor(box.y_min));
    const double ps2 = static_cast<double>(g.patch_size) * g.patch_size;

    // Foreground pixel area per touched cell, keyed by position in `cells`.
    std::vector<double> fg(cells.size(), 0.0);
    const int r0 = cells.front().row;
    const int c0 = cells.front().col;
    const int ncols = cells.back().col - c0 + 1;
    for (int my = 0; my < mh; ++my) {
      for (int mx = 0; mx < mw; ++mx) {
        if (!mask->at(my, mx)) continue;
        const PixelBox px{static_cast<double>(x0 + mx), static_cast<double>(y0 + my),
                          static_cast<double>(x0 + mx + 1),
                          static_cast<double>(y0 + my + 1)};
        const double a = intersection_area(px, b);
        if (a <= 0) continue;
        const int r = (y0 + my) / g.patch_size;
        const int c = (x0 + mx) / g.patch_size;
        const int idx = (r - r0) * ncols + (c - c0);
        // cells is a dense row-major rectangle whenever every cell overlaps.
        if (idx >= 0 && idx < static_cast<int>(cells.size()) &&
            cells[idx].row == r && cells[idx].col == c) {
          fg[idx] += a;
        }
      }
    }
    double total = 0;
    for (double v : fg) total += v;
    if (total > 0) {
      for (std::size_t i = 0; i < cells.size(); ++i) cells[i].weight = fg[i] / ps2;
      std::erase_if(cells, [](const CellWeight& w) { return w.weight <= 0; });
    } else if (mask_fallback != nullptr) {
      *mask_fallback = true;
    }
  }

  double sum = 0;
  for (const auto& w : cells) sum += w.weight;
  for (auto& w : cells) w.weight /= sum;
  return cells;
}

/// Greedy NMS. Candidates are visited by descending score (ties: smaller box
/// area, then input order); a candidate survives iff its IoU with every kept
/// detection of the same class (any class when class_agnostic) is below
/// iou_threshold. Output is in visiting order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold,
                                  bool class_agnostic = false) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].box.area() < dets[b].box.area();
  });

  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& cand = dets[i];
    bool keep = true;
    for (const Detection& k : kept) {
      if (!class_agnostic && k.class_id != cand.class_id) continue;
      if (iou(k.box, cand.box) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(cand);
  }
  return kept;
}

}  // namespace protodetect

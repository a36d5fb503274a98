#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "protodetect/classifier.hpp"
#include "protodetect/core_types.hpp"
#include "protodetect/geometry.hpp"
#include "protodetect/io.hpp"

namespace protodetect {

enum class ClassSelection { kNovel, kBase, kAll };

inline std::vector<int> select_classes(const ClassTable& t, ClassSelection s) {
  switch (s) {
    case ClassSelection::kNovel: return t.ids_with_role(ClassRole::kNovel);
    case ClassSelection::kBase: return t.ids_with_role(ClassRole::kBase);
    case ClassSelection::kAll: break;
  }
  std::vector<int> all(static_cast<std::size_t>(t.object_count()));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

// ---------------------------------------------------------------------------
// Average precision

/// Area under the monotone precision envelope (all-point interpolation).
/// `recall` must be non-decreasing.
inline double average_precision(const std::vector<double>& recall,
                                const std::vector<double>& precision) {
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

/// Legacy 11-point interpolated AP.
inline double average_precision_11pt(const std::vector<double>& recall,
                                     const std::vector<double>& precision) {
  double ap = 0;
  for (int k = 0; k <= 10; ++k) {
    const double t = k / 10.0;
    double p = 0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
      if (recall[i] >= t) p = std::max(p, precision[i]);
    }
    ap += p / 11.0;
  }
  return ap;
}

struct ClassAP {
  int class_id{0};
  int num_gt{0};
  int num_detections{0};
  int tp{0};
  int fp{0};
  int fn{0};
  std::optional<double> ap;  // absent when the class has no ground truth
};

struct EvalOptions {
  double iou_threshold{0.5};
  std::vector<int> classes;  // classes averaged into mAP
  bool voc11{false};
};

struct EvalReport {
  std::vector<ClassAP> per_class;  // every object class
  std::vector<int> classes;        // the averaged subset
  double map{0};
  EvalOptions options;
};

/// Per class: detections sorted by descending score (stable), each matched to
/// the unmatched ground-truth box of the same image with the highest IoU
/// (ties to the lower index) when that IoU reaches the threshold.
inline ClassAP evaluate_class(int class_id, const std::vector<io::ImageDetections>& dets,
                              const DatasetManifest& manifest, const EvalOptions& opts) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) index[manifest.entries[i].image_id] = i;

  std::vector<std::vector<PixelBox>> gt(manifest.entries.size());
  ClassAP out;
  out.class_id = class_id;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    for (const auto& a : manifest.entries[i].annotations) {
      if (a.class_id == class_id) gt[i].push_back(a.box);
    }
    out.num_gt += static_cast<int>(gt[i].size());
  }

  struct Candidate {
    std::size_t image;
    PixelBox box;
    double score;
  };
  std::vector<Candidate> cands;
  for (const auto& im : dets) {
    const auto it = index.find(im.image_id);
    if (it == index.end()) throw Error("detections reference unknown image '" + im.image_id + "'");
    for (const auto& d : im.detections) {
      if (d.class_id == class_id) cands.push_back({it->second, d.box, d.score});
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  out.num_detections = static_cast<int>(cands.size());

  std::vector<std::vector<char>> used(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), 0);
  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (const auto& c : cands) {
    int best = -1;
    double best_iou = 0;
    for (std::size_t g = 0; g < gt[c.image].size(); ++g) {
      if (used[c.image][g]) continue;
      const double v = iou(c.box, gt[c.image][g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= opts.iou_threshold) {
      used[c.image][best] = 1;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(out.num_gt > 0 ? static_cast<double>(tp) / out.num_gt : 0.0);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  out.tp = tp;
  out.fp = fp;
  out.fn = out.num_gt - tp;
  if (out.num_gt > 0) {
    out.ap = opts.voc11 ? average_precision_11pt(recall, precision)
                        : average_precision(recall, precision);
  }
  return out;
}

inline EvalReport evaluate_detections(const std::vector<io::ImageDetections>& dets,
                                      const DatasetManifest& manifest, const EvalOptions& opts) {
  if (opts.classes.empty()) throw Error("no classes selected for evaluation");
  EvalReport report;
  report.options = opts;
  report.classes = opts.classes;
  for (int c = 0; c < manifest.class_table.object_count(); ++c) {
    report.per_class.push_back(evaluate_class(c, dets, manifest, opts));
  }
  double sum = 0;
  int n = 0;
  for (int c : opts.classes) {
    if (c < 0 || c >= manifest.class_table.object_count()) throw Error("class filter out of range");
    if (report.per_class[c].ap) {
      sum += *report.per_class[c].ap;
      ++n;
    }
  }
  report.map = n > 0 ? sum / n : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// Classification of ground-truth boxes

struct ClassificationReport {
  int object_rows{0};
  int total_rows{0};
  // confusion[true_class][predicted_row], true_class < J, predicted_row < J+K.
  std::vector<std::vector<int>> confusion;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  std::vector<int> support;
  double accuracy{0};
  double macro_f1{0};
  int total{0};
};

inline ClassificationReport summarize_confusion(std::vector<std::vector<int>> confusion,
                                                int object_rows, int total_rows) {
  ClassificationReport r;
  r.object_rows = object_rows;
  r.total_rows = total_rows;
  r.confusion = std::move(confusion);
  int correct = 0;
  int counted = 0;
  double f1_sum = 0;
  for (int c = 0; c < object_rows; ++c) {
    int support = 0, predicted = 0;
    for (int p = 0; p < total_rows; ++p) support += r.confusion[c][p];
    for (int t = 0; t < object_rows; ++t) predicted += r.confusion[t][c];
    const int hit = r.confusion[c][c];
    correct += hit;
    r.total += support;
    const double prec = predicted > 0 ? static_cast<double>(hit) / predicted : 0.0;
    const double rec = support > 0 ? static_cast<double>(hit) / support : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    r.precision.push_back(prec);
    r.recall.push_back(rec);
    r.f1.push_back(f1);
    r.support.push_back(support);
    if (support > 0) {
      f1_sum += f1;
      ++counted;
    }
  }
  r.accuracy = r.total > 0 ? static_cast<double>(correct) / r.total : 0.0;
  r.macro_f1 = counted > 0 ? f1_sum / counted : 0.0;
  return r;
}

/// Uses each ground-truth box as a proposal and classifies it. A box won by a
/// background row counts as a miss for its class.
inline ClassificationReport evaluate_classification(const DatasetManifest& manifest,
                                                    const PrototypeSet& protos,
                                                    const io::FeatureLoader& load,
                                                    bool use_masks = false) {
  const ClassTable& table = protos.class_table();
  if (table.object_count() != manifest.class_table.object_count()) {
    throw Error("prototype classes do not match the manifest");
  }
  const int j = table.object_count();
  const int rows = table.total_rows();
  std::vector<std::vector<int>> confusion(static_cast<std::size_t>(j),
                                          std::vector<int>(static_cast<std::size_t>(rows), 0));
  for (const auto& entry : manifest.entries) {
    if (entry.annotations.empty()) continue;
    const SimilarityMap sim = similarity_map(load(entry.feature_file), protos);
    for (const auto& a : entry.annotations) {
      const Mask* mask = (use_masks && a.mask) ? &*a.mask : nullptr;
      const Verdict v = classify_proposal(score_box(sim, a.box, mask), table);
      ++confusion[a.class_id][v.row];
    }
  }
  return summarize_confusion(std::move(confusion), j, rows);
}

}  // namespace protodetect

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "protodetect/core_types.hpp"
#include "protodetect/geometry.hpp"
#include "protodetect/io.hpp"
#include "protodetect/proto_builder.hpp"
#include "protodetect/random.hpp"

namespace protodetect {

enum class BackgroundTargetMode {
  kDynamic,  // nearest background row under the current prototypes
  kFrozen,   // nearest background row under the initial prototypes
};

struct AugmentFlags {
  bool hflip{true};
  bool vflip{true};
  bool rot90{true};
  bool random_crop{true};
};

struct TrainConfig {
  int epochs{200};
  double lr{2e-4};
  std::vector<int> lr_drop_epochs{10, 100};
  double lr_drop_factor{0.1};
  double temperature{0.1};
  int negatives_per_image{0};
  double adam_beta1{0.9};
  double adam_beta2{0.999};
  double adam_eps{1e-8};
  std::uint64_t seed{0};
  AugmentFlags augment{};
  double augment_probability{0.5};
  double crop_scale_min{0.5};
  double crop_min_keep{0.2};  // boxes keeping less of their area are dropped
  BackgroundTargetMode background_target_mode{BackgroundTargetMode::kDynamic};
  bool freeze_background{false};

  void validate() const {
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (!(lr > 0)) throw Error("learning rate must be positive");
    if (!(temperature > 0)) throw Error("temperature must be positive");
    if (negatives_per_image < 0) throw Error("negatives per image must be >= 0");
    if (!(crop_scale_min > 0 && crop_scale_min <= 1)) throw Error("crop scale must be in (0, 1]");
  }

  double lr_at(int epoch_index) const {
    double out = lr;
    for (int e : lr_drop_epochs) {
      if (epoch_index >= e) out *= lr_drop_factor;
    }
    return out;
  }
};

/// Free (unnormalized) prototype parameters, one row per prototype.
struct ParamMatrix {
  int rows{0};
  int dim{0};
  std::vector<double> data;

  static ParamMatrix from(const PrototypeSet& p) { return {p.rows(), p.dim(), p.rows_as_double()}; }

  std::span<double> row(int r) {
    return {data.data() + static_cast<std::size_t>(r) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * dim, static_cast<std::size_t>(dim)};
  }
};

struct TrainItem {
  Vector embedding;
  int target_row{0};
  bool is_negative{false};
};

namespace detail {

inline Vector unit(std::span<const double> v) {
  Vector out(v.begin(), v.end());
  const double n = l2_norm(v);
  if (n > 0) {
    for (double& x : out) x /= n;
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void check_batch(const std::vector<TrainItem>& batch, const ParamMatrix& params) {
  if (batch.empty()) throw Error("empty training batch");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& it = batch[i];
    if (static_cast<int>(it.embedding.size()) != params.dim) {
      throw Error("training item " + std::to_string(i) + " has the wrong dimension");
    }
    for (double x : it.embedding) {
      if (!std::isfinite(x)) throw Error("training item " + std::to_string(i) + " is not finite");
    }
    if (it.target_row < 0 || it.target_row >= params.rows) {
      throw Error("training item " + std::to_string(i) + " targets a missing row");
    }
  }
}

}  // namespace detail

/// Nearest background row (absolute row index) by cosine similarity.
inline int assign_negative_target(std::span<const double> embedding, const ParamMatrix& params,
                                  int object_rows) {
  if (object_rows >= params.rows) {
    throw Error("negative examples need at least one background prototype");
  }
  const Vector e = detail::unit(embedding);
  int best = object_rows;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (int r = object_rows; r < params.rows; ++r) {
    const Vector q = detail::unit(params.row(r));
    const double s = detail::dot(e, q);
    if (s > best_sim) {
      best_sim = s;
      best = r;
    }
  }
  return best;
}

struct ForwardResult {
  double loss{0};                     // mean cross-entropy
  std::vector<double> item_losses;
  std::vector<Vector> logits;         // per item, length rows
  int correct{0};                     // items whose argmax is the target
};

/// logits = cos(embedding, row) / tau over every row; rows are normalized on
/// the fly from the free parameters.
inline ForwardResult forward_loss(const std::vector<TrainItem>& batch, const ParamMatrix& params,
                                  double tau) {
  detail::check_batch(batch, params);
  std::vector<Vector> q(static_cast<std::size_t>(params.rows));
  for (int r = 0; r < params.rows; ++r) q[r] = detail::unit(params.row(r));

  ForwardResult out;
  for (const auto& it : batch) {
    const Vector e = detail::unit(it.embedding);
    Vector z(static_cast<std::size_t>(params.rows));
    int arg = 0;
    for (int r = 0; r < params.rows; ++r) {
      z[r] = detail::dot(e, q[r]) / tau;
      if (z[r] > z[arg]) arg = r;
    }
    double zmax = z[arg];
    double sum = 0;
    for (double v : z) sum += std::exp(v - zmax);
    const double loss = zmax + std::log(sum) - z[it.target_row];
    out.item_losses.push_back(loss);
    out.loss += loss;
    out.correct += arg == it.target_row;
    out.logits.push_back(std::move(z));
  }
  out.loss /= static_cast<double>(batch.size());
  return out;
}

/// Analytic gradient of forward_loss with respect to the free parameters,
/// through the row normalization. Embeddings are constants.
inline std::vector<double> backward(const std::vector<TrainItem>& batch, const ParamMatrix& params,
                                    double tau) {
  detail::check_batch(batch, params);
  const int rows = params.rows;
  const int dim = params.dim;
  std::vector<Vector> q(static_cast<std::size_t>(rows));
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    norms[r] = l2_norm(params.row(r));
    if (!(norms[r] > 0)) throw Error("prototype row " + std::to_string(r) + " has zero norm");
    q[r] = detail::unit(params.row(r));
  }

  // d loss / d q_r accumulated over the batch.
  std::vector<double> gq(static_cast<std::size_t>(rows) * dim, 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Vector z(static_cast<std::size_t>(rows));
  for (const auto& it : batch) {
    const Vector e = detail::unit(it.embedding);
    double zmax = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < rows; ++r) {
      z[r] = detail::dot(e, q[r]) / tau;
      zmax = std::max(zmax, z[r]);
    }
    double sum = 0;
    for (int r = 0; r < rows; ++r) sum += std::exp(z[r] - zmax);
    for (int r = 0; r < rows; ++r) {
      const double coeff =
          (std::exp(z[r] - zmax) / sum - (r == it.target_row ? 1.0 : 0.0)) * inv_n / tau;
      if (coeff == 0) continue;
      double* g = gq.data() + static_cast<std::size_t>(r) * dim;
      for (int d = 0; d < dim; ++d) g[d] += coeff * e[d];
    }
  }

  // d q / d p = (I - q q^T) / |p|
  std::vector<double> grad(gq.size());
  for (int r = 0; r < rows; ++r) {
    const double* g = gq.data() + static_cast<std::size_t>(r) * dim;
    double proj = 0;
    for (int d = 0; d < dim; ++d) proj += g[d] * q[r][d];
    for (int d = 0; d < dim; ++d) {
      grad[static_cast<std::size_t>(r) * dim + d] = (g[d] - proj * q[r][d]) / norms[r];
    }
  }
  return grad;
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long step{0};
};

struct AdamParams {
  double lr{2e-4};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

/// Adam with bias-corrected moments.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      const AdamParams& hp) {
  if (params.size() != grads.size()) throw Error("adam: parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw Error("adam: state size mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grads[i];
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

// ---------------------------------------------------------------------------
// Feature-grid augmentation. Every transform first pads the image extent to
// the full grid footprint (grid * patch_size) so that permuting cells and
// mapping boxes stay exact. Masks are not carried through.

struct AugmentedImage {
  FeatureMap features;
  std::vector<Annotation> annotations;
};

namespace augment {

inline GridGeometry padded(const GridGeometry& g) {
  return {g.grid_h, g.grid_w, g.patch_size, g.grid_h * g.patch_size, g.grid_w * g.patch_size};
}

inline std::vector<Annotation> strip_masks(std::vector<Annotation> anns) {
  for (auto& a : anns) a.mask.reset();
  return anns;
}

inline AugmentedImage hflip(const FeatureMap& fm, const std::vector<Annotation>& anns) {
  const GridGeometry g = padded(fm.geometry());
  const int dim = fm.dim();
  std::vector<float> data(fm.data().size());
  for (int r = 0; r < g.grid_h; ++r) {
    for (int c = 0; c < g.grid_w; ++c) {
      const auto src = fm.cell(r, g.grid_w - 1 - c);
      std::copy(src.begin(), src.end(),
                data.begin() + (static_cast<std::ptrdiff_t>(r) * g.grid_w + c) * dim);
    }
  }
  auto out = strip_masks(anns);
  const double w = g.image_w;
  for (auto& a : out) a.box = {w - a.box.x_max, a.box.y_min, w - a.box.x_min, a.box.y_max};
  return {FeatureMap(g, dim, std::move(data)), std::move(out)};
}

inline AugmentedImage vflip(const FeatureMap& fm, const std::vector<Annotation>& anns) {
  const GridGeometry g = padded(fm.geometry());
  const int dim = fm.dim();
  std::vector<float> data(fm.data().size());
  for (int r = 0; r < g.grid_h; ++r) {
    for (int c = 0; c < g.grid_w; ++c) {
      const auto src = fm.cell(g.grid_h - 1 - r, c);
      std::copy(src.begin(), src.end(),
                data.begin() + (static_cast<std::ptrdiff_t>(r) * g.grid_w + c) * dim);
    }
  }
  auto out = strip_masks(anns);
  const double h = g.image_h;
  for (auto& a : out) a.box = {a.box.x_min, h - a.box.y_max, a.box.x_max, h - a.box.y_min};
  return {FeatureMap(g, dim, std::move(data)), std::move(out)};
}

/// Quarter turn clockwise: cell (r, c) moves to (c, grid_h - 1 - r).
inline AugmentedImage rot90(const FeatureMap& fm, const std::vector<Annotation>& anns) {
  const GridGeometry src = padded(fm.geometry());
  const GridGeometry g{src.grid_w, src.grid_h, src.patch_size, src.image_w, src.image_h};
  const int dim = fm.dim();
  std::vector<float> data(fm.data().size());
  for (int r = 0; r < src.grid_h; ++r) {
    for (int c = 0; c < src.grid_w; ++c) {
      const auto cell = fm.cell(r, c);
      const int nr = c;
      const int nc = src.grid_h - 1 - r;
      std::copy(cell.begin(), cell.end(),
                data.begin() + (static_cast<std::ptrdiff_t>(nr) * g.grid_w + nc) * dim);
    }
  }
  auto out = strip_masks(anns);
  const double h = src.image_h;
  for (auto& a : out) a.box = {h - a.box.y_max, a.box.x_min, h - a.box.y_min, a.box.x_max};
  return {FeatureMap(g, dim, std::move(data)), std::move(out)};
}

/// Keeps grid rows [row0, row0 + rows) and columns [col0, col0 + cols). Boxes
/// are shifted and clipped; a box keeping less than `min_keep` of its area
/// is dropped.
inline AugmentedImage crop(const FeatureMap& fm, const std::vector<Annotation>& anns, int row0,
                           int col0, int rows, int cols, double min_keep) {
  const GridGeometry& src = fm.geometry();
  if (row0 < 0 || col0 < 0 || rows < 1 || cols < 1 || row0 + rows > src.grid_h ||
      col0 + cols > src.grid_w) {
    throw Error("crop window outside the feature grid");
  }
  const int ps = src.patch_size;
  const GridGeometry g{rows, cols, ps, rows * ps, cols * ps};
  const int dim = fm.dim();
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(rows) * cols * dim);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const auto cell = fm.cell(row0 + r, col0 + c);
      data.insert(data.end(), cell.begin(), cell.end());
    }
  }
  std::vector<Annotation> out;
  const double dx = static_cast<double>(col0) * ps;
  const double dy = static_cast<double>(row0) * ps;
  for (const auto& a : anns) {
    const PixelBox moved{a.box.x_min - dx, a.box.y_min - dy, a.box.x_max - dx, a.box.y_max - dy};
    const PixelBox clipped = clip_box(moved, g.image_w, g.image_h);
    if (clipped.degenerate() || clipped.area() < min_keep * a.box.area()) continue;
    out.push_back({clipped, a.class_id, std::nullopt});
  }
  return {FeatureMap(g, dim, std::move(data)), std::move(out)};
}

}  // namespace augment

/// Random flips, quarter turns and grid crops, each applied with
/// probability `p`. Deterministic given the generator state.
inline AugmentedImage augment_feature_grid(const FeatureMap& fm,
                                           const std::vector<Annotation>& anns, Rng& rng,
                                           const AugmentFlags& flags, double p = 0.5,
                                           double crop_scale_min = 0.5, double min_keep = 0.2) {
  AugmentedImage img{fm, anns};
  if (flags.hflip && rng.coin(p)) img = augment::hflip(img.features, img.annotations);
  if (flags.vflip && rng.coin(p)) img = augment::vflip(img.features, img.annotations);
  if (flags.rot90 && rng.coin(p)) {
    const auto turns = 1 + rng.below(3);
    for (std::uint64_t t = 0; t < turns; ++t) img = augment::rot90(img.features, img.annotations);
  }
  if (flags.random_crop && rng.coin(p)) {
    const auto& g = img.features.geometry();
    const int rows = std::max(1, static_cast<int>(std::floor(rng.uniform(crop_scale_min, 1.0) * g.grid_h)));
    const int cols = std::max(1, static_cast<int>(std::floor(rng.uniform(crop_scale_min, 1.0) * g.grid_w)));
    const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(g.grid_h - rows + 1)));
    const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(g.grid_w - cols + 1)));
    img = augment::crop(img.features, img.annotations, r0, c0, rows, cols, min_keep);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Copy of `fm` with every cell scaled to unit norm (zero cells stay zero).
/// Pooling this map gives embeddings whose dot product with a unit prototype
/// equals the box-averaged cosine similarity used at inference.
inline FeatureMap unit_cells(const FeatureMap& fm) {
  std::vector<float> data = fm.data();
  const int dim = fm.dim();
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(dim)) {
    double s = 0;
    for (int d = 0; d < dim; ++d) s += static_cast<double>(data[i + d]) * data[i + d];
    if (s <= 0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (int d = 0; d < dim; ++d) data[i + d] = static_cast<float>(data[i + d] * inv);
  }
  return FeatureMap(fm.geometry(), dim, std::move(data));
}

struct EpochLog {
  int epoch{0};  // 1-based
  double loss{0};
  double accuracy{0};
  double lr{0};
  int items{0};
};

struct FinetuneResult {
  PrototypeSet prototypes;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline FinetuneResult finetune(const DatasetManifest& manifest, const PrototypeSet& init,
                               const TrainConfig& config, const io::FeatureLoader& load,
                               const EpochCallback& on_epoch = {}) {
  config.validate();
  if (manifest.entries.empty()) throw Error("cannot fine-tune on an empty manifest");
  const ClassTable& table = init.class_table();
  if (table.object_count() != manifest.class_table.object_count()) {
    throw Error("prototype classes do not match the manifest");
  }
  for (int c = 0; c < table.object_count(); ++c) {
    if (table.object(c).name != manifest.class_table.object(c).name) {
      throw Error("prototype classes do not match the manifest");
    }
  }
  const int j = table.object_count();
  if (config.negatives_per_image > 0 && table.background_count() == 0) {
    throw Error("negatives requested but the prototype set has no background rows");
  }

  ParamMatrix params = ParamMatrix::from(init);
  const ParamMatrix initial = params;
  AdamState adam;

  // Unit-cell feature maps per entry: the main export plus any variants.
  std::vector<std::vector<FeatureMap>> maps(manifest.entries.size());
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    maps[i].push_back(unit_cells(load(e.feature_file)));
    for (const auto& v : e.feature_variants) maps[i].push_back(unit_cells(load(v)));
    if (maps[i].front().dim() != params.dim) {
      throw Error("feature dim mismatch in '" + e.image_id + "'");
    }
  }
  const SizeRange crop_sizes = annotation_size_range(manifest);

  Rng rng(config.seed);
  FinetuneResult result;
  std::vector<std::size_t> order(manifest.entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr_at(epoch);
    rng.shuffle(order);
    double loss_sum = 0;
    int correct = 0;
    int items = 0;
    for (std::size_t idx : order) {
      const auto& entry = manifest.entries[idx];
      const FeatureMap& base = maps[idx][rng.below(maps[idx].size())];
      const AugmentedImage img =
          augment_feature_grid(base, entry.annotations, rng, config.augment,
                               config.augment_probability, config.crop_scale_min,
                               config.crop_min_keep);

      std::vector<TrainItem> batch;
      for (const auto& a : img.annotations) {
        batch.push_back({pool_box_embedding(img.features, a.box), a.class_id, false});
      }
      if (config.negatives_per_image > 0) {
        std::vector<PixelBox> occupied;
        for (const auto& a : img.annotations) occupied.push_back(a.box);
        const auto boxes = sample_object_free_boxes(img.features.image_w(), img.features.image_h(),
                                                    occupied, config.negatives_per_image,
                                                    crop_sizes, rng);
        const ParamMatrix& ref =
            config.background_target_mode == BackgroundTargetMode::kDynamic ? params : initial;
        for (const auto& b : boxes) {
          Vector e = pool_box_embedding(img.features, b);
          const int target = assign_negative_target(e, ref, j);
          batch.push_back({std::move(e), target, true});
        }
      }
      if (batch.empty()) continue;

      const ForwardResult fwd = forward_loss(batch, params, config.temperature);
      loss_sum += fwd.loss * static_cast<double>(batch.size());
      correct += fwd.correct;
      items += static_cast<int>(batch.size());

      std::vector<double> grad = backward(batch, params, config.temperature);
      if (config.freeze_background) {
        std::fill(grad.begin() + static_cast<std::ptrdiff_t>(j) * params.dim, grad.end(), 0.0);
      }
      adam_step(params.data, grad, adam,
                {lr, config.adam_beta1, config.adam_beta2, config.adam_eps});
      if (config.freeze_background) {
        std::copy(initial.data.begin() + static_cast<std::ptrdiff_t>(j) * params.dim,
                  initial.data.end(),
                  params.data.begin() + static_cast<std::ptrdiff_t>(j) * params.dim);
      }
    }
    EpochLog entry{epoch + 1, items > 0 ? loss_sum / items : 0.0,
                   items > 0 ? static_cast<double>(correct) / items : 0.0, lr, items};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }

  result.prototypes =
      PrototypeSet(table, params.dim, params.data, config.temperature, Provenance::kFinetuned);
  return result;
}

}  // namespace protodetect

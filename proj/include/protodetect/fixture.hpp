#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodetect/core_types.hpp"
#include "protodetect/geometry.hpp"
#include "protodetect/io.hpp"
#include "protodetect/random.hpp"

namespace protodetect {

/// Synthetic dataset with planted class regions.
///
/// Feature model (u: shared axis, e_j: class axes, g_t: land-cover axes, all
/// orthonormal; z: isotropic unit-norm noise):
///   class direction  d_j = sqrt(c) u + sqrt(1 - c) e_j,  c = cos(separation)
///   background cell  g_t + noise * z
///   object cell      d_j + noise * (a g_t + z'),  a ~ U(0, 1) per object
/// where t is the image's land-cover type. Annotated boxes extend past the
/// planted region by `box_margin` pixels, so they include some background.
struct FixtureSpec {
  int n_classes{4};
  int dim{32};
  int grid_h{16};
  int grid_w{16};
  int patch_size{14};
  int images_per_class{10};  // training images; shots = images_per_class * boxes_per_image
  int boxes_per_image{1};
  int test_images_per_class{10};
  int test_boxes_per_image{2};
  int distractors_per_image{10};
  int background_types{3};
  double separation_deg{90.0};
  double noise_level{0.3};
  double box_margin{4.0};
  int min_object_cells{2};
  int max_object_cells{4};
  std::uint64_t seed{0};

  void validate() const {
    if (n_classes < 1 || dim < 1 || grid_h < 4 || grid_w < 4 || patch_size < 1) {
      throw Error("fixture sizes out of range");
    }
    if (!(separation_deg > 0 && separation_deg <= 90)) {
      throw Error("separation angle must be in (0, 90] degrees");
    }
    if (noise_level < 0) throw Error("noise level must be >= 0");
    if (images_per_class < 1 || boxes_per_image < 1 || test_images_per_class < 0 ||
        test_boxes_per_image < 1) {
      throw Error("fixture counts out of range");
    }
    if (min_object_cells < 1 || max_object_cells < min_object_cells ||
        max_object_cells > std::min(grid_h, grid_w) / 2) {
      throw Error("object size range out of range");
    }
    const int shared = separation_deg < 90 ? 1 : 0;
    if (n_classes + background_types + shared > dim) {
      throw Error("cannot place " + std::to_string(n_classes) + " separated classes and " +
                  std::to_string(background_types) + " background types in dim " +
                  std::to_string(dim));
    }
  }
};

inline FixtureSpec fixture_spec_from_json(const nlohmann::json& j) {
  FixtureSpec s;
  if (!j.contains("seed")) throw Error("fixture spec needs an explicit seed");
  s.seed = j.at("seed").get<std::uint64_t>();
  s.n_classes = j.value("n_classes", s.n_classes);
  s.dim = j.value("dim", s.dim);
  s.grid_h = j.value("grid_h", s.grid_h);
  s.grid_w = j.value("grid_w", s.grid_w);
  s.patch_size = j.value("patch_size", s.patch_size);
  s.images_per_class = j.value("images_per_class", s.images_per_class);
  s.boxes_per_image = j.value("boxes_per_image", s.boxes_per_image);
  s.test_images_per_class = j.value("test_images_per_class", s.test_images_per_class);
  s.test_boxes_per_image = j.value("test_boxes_per_image", s.test_boxes_per_image);
  s.distractors_per_image = j.value("distractors_per_image", s.distractors_per_image);
  s.background_types = j.value("background_types", s.background_types);
  s.separation_deg = j.value("separation_deg", s.separation_deg);
  s.noise_level = j.value("noise_level", s.noise_level);
  s.box_margin = j.value("box_margin", s.box_margin);
  s.min_object_cells = j.value("min_object_cells", s.min_object_cells);
  s.max_object_cells = j.value("max_object_cells", s.max_object_cells);
  return s;
}

inline nlohmann::ordered_json fixture_spec_to_json(const FixtureSpec& s) {
  return {{"n_classes", s.n_classes},
          {"dim", s.dim},
          {"grid_h", s.grid_h},
          {"grid_w", s.grid_w},
          {"patch_size", s.patch_size},
          {"images_per_class", s.images_per_class},
          {"boxes_per_image", s.boxes_per_image},
          {"test_images_per_class", s.test_images_per_class},
          {"test_boxes_per_image", s.test_boxes_per_image},
          {"distractors_per_image", s.distractors_per_image},
          {"background_types", s.background_types},
          {"separation_deg", s.separation_deg},
          {"noise_level", s.noise_level},
          {"box_margin", s.box_margin},
          {"min_object_cells", s.min_object_cells},
          {"max_object_cells", s.max_object_cells},
          {"seed", s.seed}};
}

struct Fixture {
  FixtureSpec spec;
  DatasetManifest train;
  DatasetManifest test;
  std::vector<Vector> class_directions;
  std::map<std::string, FeatureMap> features;  // keyed by feature_file path

  io::FeatureLoader loader() const {
    return [this](const std::filesystem::path& p) {
      const auto it = features.find(p.string());
      if (it == features.end()) throw Error("fixture has no features for '" + p.string() + "'");
      return it->second;
    };
  }
};

namespace detail {

inline Vector random_unit(Rng& rng, int dim) {
  Vector v(static_cast<std::size_t>(dim));
  double n = 0;
  do {
    for (double& x : v) x = rng.normal();
    n = l2_norm(v);
  } while (!(n > 0));
  for (double& x : v) x /= n;
  return v;
}

// Gram-Schmidt over seeded Gaussian vectors.
inline std::vector<Vector> orthonormal_basis(Rng& rng, int count, int dim) {
  std::vector<Vector> basis;
  while (static_cast<int>(basis.size()) < count) {
    Vector v = random_unit(rng, dim);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        double d = 0;
        for (int i = 0; i < dim; ++i) d += v[i] * b[i];
        for (int i = 0; i < dim; ++i) v[i] -= d * b[i];
      }
    }
    const double n = l2_norm(v);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  return basis;
}

struct PlantedObject {
  int row0, col0, rows, cols;
  int class_id;
};

}  // namespace detail

/// Builds the fixture in memory. Feature paths point into `out_dir/features`
/// so that write_fixture() can persist it unchanged.
inline Fixture generate_fixture(const FixtureSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  Rng rng(spec.seed);
  const int j = spec.n_classes;
  const int shared = spec.separation_deg < 90 ? 1 : 0;
  const auto basis = detail::orthonormal_basis(rng, j + spec.background_types + shared, spec.dim);

  Fixture fx;
  fx.spec = spec;
  const double c = shared ? std::cos(spec.separation_deg * std::numbers::pi / 180.0) : 0.0;
  for (int k = 0; k < j; ++k) {
    Vector d(static_cast<std::size_t>(spec.dim));
    for (int i = 0; i < spec.dim; ++i) {
      d[i] = std::sqrt(1 - c) * basis[k][i] + (shared ? std::sqrt(c) * basis.back()[i] : 0.0);
    }
    fx.class_directions.push_back(std::move(d));
  }
  std::vector<Vector> land;
  for (int t = 0; t < spec.background_types; ++t) land.push_back(basis[j + t]);

  std::vector<ObjectClass> classes;
  for (int k = 0; k < j; ++k) {
    // First half of the classes are "base", the rest "novel".
    classes.push_back({"class" + std::to_string(k), k < j / 2 ? ClassRole::kBase : ClassRole::kNovel});
  }
  const ClassTable table(classes, 0);
  fx.train = {{}, table, SplitRole::kTrainShots};
  fx.test = {{}, table, SplitRole::kTest};

  const int ps = spec.patch_size;
  const GridGeometry geom{spec.grid_h, spec.grid_w, ps, spec.grid_h * ps, spec.grid_w * ps};

  auto make_image = [&](const std::string& id, const std::vector<int>& object_classes,
                        bool with_proposals) {
    // Place non-touching objects by rejection.
    std::vector<detail::PlantedObject> objs;
    for (int cls : object_classes) {
      for (int attempt = 0; attempt < 200; ++attempt) {
        const int span = spec.max_object_cells - spec.min_object_cells + 1;
        const int rows = spec.min_object_cells + static_cast<int>(rng.below(span));
        const int cols = spec.min_object_cells + static_cast<int>(rng.below(span));
        const int r0 = 1 + static_cast<int>(rng.below(spec.grid_h - rows - 1));
        const int c0 = 1 + static_cast<int>(rng.below(spec.grid_w - cols - 1));
        const bool clear = std::none_of(objs.begin(), objs.end(), [&](const auto& o) {
          return r0 <= o.row0 + o.rows && o.row0 <= r0 + rows && c0 <= o.col0 + o.cols &&
                 o.col0 <= c0 + cols;
        });
        if (clear) {
          objs.push_back({r0, c0, rows, cols, cls});
          break;
        }
      }
    }

    const int land_type = spec.background_types > 0 ? static_cast<int>(rng.below(spec.background_types)) : -1;
    std::vector<int> owner(static_cast<std::size_t>(geom.cells()), -1);
    for (std::size_t o = 0; o < objs.size(); ++o) {
      for (int r = objs[o].row0; r < objs[o].row0 + objs[o].rows; ++r) {
        for (int cc = objs[o].col0; cc < objs[o].col0 + objs[o].cols; ++cc) {
          owner[static_cast<std::size_t>(r) * geom.grid_w + cc] = static_cast<int>(o);
        }
      }
    }
    std::vector<double> leak(objs.size());
    for (double& a : leak) a = rng.uniform();

    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(geom.cells()) * spec.dim);
    for (int cell = 0; cell < geom.cells(); ++cell) {
      const Vector z = detail::random_unit(rng, spec.dim);
      const int o = owner[cell];
      for (int i = 0; i < spec.dim; ++i) {
        const double g = land_type >= 0 ? land[land_type][i] : 0.0;
        double v;
        if (o < 0) {
          v = g + spec.noise_level * z[i];
        } else {
          v = fx.class_directions[objs[o].class_id][i] +
              spec.noise_level * (leak[o] * g + z[i]);
        }
        data.push_back(static_cast<float>(v));
      }
    }

    const auto path = out_dir / "features" / (id + ".fmap");
    fx.features.emplace(path.string(), FeatureMap(geom, spec.dim, std::move(data)));

    ManifestEntry e;
    e.image_id = id;
    e.feature_file = path;
    e.image_h = geom.image_h;
    e.image_w = geom.image_w;
    for (const auto& o : objs) {
      const PixelBox planted{static_cast<double>(o.col0 * ps), static_cast<double>(o.row0 * ps),
                             static_cast<double>((o.col0 + o.cols) * ps),
                             static_cast<double>((o.row0 + o.rows) * ps)};
      const PixelBox box = clip_box({planted.x_min - spec.box_margin, planted.y_min - spec.box_margin,
                                     planted.x_max + spec.box_margin, planted.y_max + spec.box_margin},
                                    geom.image_w, geom.image_h);
      e.annotations.push_back({box, o.class_id, std::nullopt});
    }
    if (with_proposals) {
      for (const auto& a : e.annotations) {
        const double w = a.box.width();
        const double h = a.box.height();
        // Tight proposal with a little localisation noise.
        const double jx = rng.uniform(-0.05, 0.05) * w;
        const double jy = rng.uniform(-0.05, 0.05) * h;
        e.proposals.push_back(clip_box({a.box.x_min + jx, a.box.y_min + jy, a.box.x_max + jx,
                                        a.box.y_max + jy},
                                       geom.image_w, geom.image_h));
        // Poorly localised proposal overlapping the object.
        const double sx = (rng.coin(0.5) ? 1 : -1) * 0.6 * w;
        e.proposals.push_back(clip_box({a.box.x_min + sx, a.box.y_min, a.box.x_max + sx, a.box.y_max},
                                       geom.image_w, geom.image_h));
      }
      for (int d = 0; d < spec.distractors_per_image; ++d) {
        const double w = rng.uniform(2.0, 5.0) * ps;
        const double h = rng.uniform(2.0, 5.0) * ps;
        const double x = rng.uniform(0.0, geom.image_w - w);
        const double y = rng.uniform(0.0, geom.image_h - h);
        e.proposals.push_back({x, y, x + w, y + h});
      }
      std::erase_if(e.proposals, [](const PixelBox& b) { return b.degenerate(); });
    }
    return e;
  };

  for (int k = 0; k < j; ++k) {
    for (int i = 0; i < spec.images_per_class; ++i) {
      const std::vector<int> objs(static_cast<std::size_t>(spec.boxes_per_image), k);
      fx.train.entries.push_back(
          make_image("train_c" + std::to_string(k) + "_" + std::to_string(i), objs, false));
    }
  }
  for (int k = 0; k < j; ++k) {
    for (int i = 0; i < spec.test_images_per_class; ++i) {
      std::vector<int> objs(static_cast<std::size_t>(spec.test_boxes_per_image), k);
      if (j > 1 && objs.size() > 1) objs.back() = (k + 1 + i % (j - 1)) % j;
      fx.test.entries.push_back(
          make_image("test_c" + std::to_string(k) + "_" + std::to_string(i), objs, true));
    }
  }
  return fx;
}

inline void write_fixture(const Fixture& fx, const std::filesystem::path& out_dir) {
  for (const auto& [path, fm] : fx.features) io::write_feature_map(path, fm);
  io::write_manifest(out_dir / "train.json", fx.train);
  io::write_manifest(out_dir / "test.json", fx.test);
  io::write_json(out_dir / "fixture_spec.json", fixture_spec_to_json(fx.spec));
}

}  // namespace protodetect

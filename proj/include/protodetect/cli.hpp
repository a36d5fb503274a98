#pragma once

// Command-line front end. Exit codes: 0 success, 1 data/runtime failure,
// 2 usage error. Machine outputs go to files; logs go to stderr.

#include <algorithm>
#include <exception>
#include <filesystem>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "protodetect/classifier.hpp"
#include "protodetect/evaluator.hpp"
#include "protodetect/fixture.hpp"
#include "protodetect/io.hpp"
#include "protodetect/log.hpp"
#include "protodetect/proto_builder.hpp"
#include "protodetect/trainer.hpp"
#include "protodetect/validate.hpp"

namespace protodetect::cli {

namespace fs = std::filesystem;
using json = io::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Raised for fatal diagnostics; the list has already been logged.
class DiagnosticFailure : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline void report(const Diagnostics& diags) {
  for (const auto& d : diags) {
    if (d.fatal()) {
      log::error(to_string(d));
    } else {
      log::warn(to_string(d));
    }
  }
}

inline DatasetManifest load_manifest(const fs::path& path) {
  auto load = load_and_validate(path);
  report(load.diagnostics);
  if (has_fatal(load.diagnostics)) {
    throw DiagnosticFailure("manifest '" + path.string() + "' failed validation");
  }
  return std::move(load.manifest);
}

// Every option of the subcommand with its effective value.
inline json config_echo(const CLI::App& sub) {
  json options = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help") continue;
    std::string name = opt->get_name(false, true);
    while (!name.empty() && name.front() == '-') name.erase(name.begin());
    if (opt->get_type_size() == 0) {
      options[name] = opt->count() > 0;
    } else if (opt->count() > 0) {
      const auto& r = opt->results();
      options[name] = r.size() == 1 ? json(r.front()) : json(r);
    } else {
      options[name] = opt->get_default_str();
    }
  }
  return json{{"tool", "protodetect"}, {"subcommand", sub.get_name()}, {"options", options}};
}

inline void write_echo(const CLI::App& sub, const fs::path& out) {
  fs::path echo = out;
  echo += ".config.json";
  io::write_json(echo, config_echo(sub));
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(threads < 1 ? 1 : threads, 1, std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline json eval_report_json(const EvalReport& r, const ClassTable& t) {
  json per_class = json::array();
  for (const auto& c : r.per_class) {
    per_class.push_back({{"class", t.object(c.class_id).name},
                         {"role", to_string(t.object(c.class_id).role)},
                         {"num_gt", c.num_gt},
                         {"num_detections", c.num_detections},
                         {"tp", c.tp},
                         {"fp", c.fp},
                         {"fn", c.fn},
                         {"ap", c.ap ? json(*c.ap) : json(nullptr)}});
  }
  json classes = json::array();
  for (int c : r.classes) classes.push_back(t.object(c).name);
  return json{{"iou_threshold", r.options.iou_threshold},
              {"interpolation", r.options.voc11 ? "voc11" : "all-point"},
              {"classes", classes},
              {"map", r.map},
              {"per_class", per_class}};
}

inline json classification_report_json(const ClassificationReport& r, const ClassTable& t) {
  json per_class = json::array();
  for (int c = 0; c < r.object_rows; ++c) {
    per_class.push_back({{"class", t.object(c).name},
                         {"support", r.support[c]},
                         {"precision", r.precision[c]},
                         {"recall", r.recall[c]},
                         {"f1", r.f1[c]}});
  }
  json labels = json::array();
  for (int row = 0; row < r.total_rows; ++row) labels.push_back(t.row_label(row));
  return json{{"accuracy", r.accuracy},
              {"macro_f1", r.macro_f1},
              {"total", r.total},
              {"per_class", per_class},
              {"confusion_columns", labels},
              {"confusion", r.confusion}};
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Few-shot detection with prototype classification of region proposals",
               "protodetect"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for per-image work")
      ->check(CLI::PositiveNumber);

  // validate
  auto* validate = app.add_subcommand("validate", "Check a manifest and its feature files");
  fs::path v_manifest;
  validate->add_option("--manifest", v_manifest, "Manifest JSON")->required();

  // build-prototypes
  auto* build = app.add_subcommand("build-prototypes", "Average annotated shots into object prototypes");
  fs::path b_manifest, b_out;
  bool b_masks = false;
  double b_temperature = 0.1;
  build->add_option("--manifest", b_manifest)->required();
  build->add_option("--out", b_out)->required();
  build->add_flag("--use-masks", b_masks, "Weight pooling by annotation masks");
  build->add_option("--temperature", b_temperature, "Temperature stored with the prototypes")
      ->check(CLI::PositiveNumber);

  // build-background
  auto* bg = app.add_subcommand("build-background",
                                "Cluster object-free crops into background prototypes");
  fs::path g_manifest, g_out, g_protos;
  int g_k = 200, g_crops = 10;
  std::uint64_t g_seed = 0;
  int g_iters = 100;
  double g_tol = 1e-5;
  bg->add_option("--manifest", g_manifest)->required();
  bg->add_option("--out", g_out)->required();
  bg->add_option("--prototypes", g_protos,
                 "Object prototypes to extend (default: the --out file)");
  bg->add_option("--k", g_k, "Requested background prototypes")->check(CLI::PositiveNumber);
  bg->add_option("--crops-per-image", g_crops)->check(CLI::PositiveNumber);
  bg->add_option("--seed", g_seed)->required();
  bg->add_option("--max-iters", g_iters)->check(CLI::PositiveNumber);
  bg->add_option("--tol", g_tol)->check(CLI::NonNegativeNumber);

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune prototypes with cross-entropy");
  fs::path f_manifest, f_protos, f_out, f_log;
  TrainConfig cfg;
  std::string f_targets = "dynamic";
  bool f_no_augment = false;
  ft->add_option("--manifest", f_manifest)->required();
  ft->add_option("--prototypes", f_protos)->required();
  ft->add_option("--out", f_out)->required();
  ft->add_option("--log", f_log, "Per-epoch JSON lines");
  ft->add_option("--epochs", cfg.epochs)->check(CLI::PositiveNumber);
  ft->add_option("--lr", cfg.lr)->check(CLI::PositiveNumber);
  ft->add_option("--lr-drops", cfg.lr_drop_epochs, "Epochs at which the rate is multiplied by --lr-factor")
      ->delimiter(',');
  ft->add_option("--lr-factor", cfg.lr_drop_factor)->check(CLI::PositiveNumber);
  ft->add_option("--temperature", cfg.temperature)->check(CLI::PositiveNumber);
  ft->add_option("--negatives", cfg.negatives_per_image, "Negative crops per image")
      ->check(CLI::NonNegativeNumber);
  ft->add_option("--seed", cfg.seed)->required();
  ft->add_option("--background-targets", f_targets)
      ->check(CLI::IsMember({"dynamic", "frozen"}));
  ft->add_flag("--freeze-background", cfg.freeze_background, "Never update background rows");
  ft->add_flag("--no-augment", f_no_augment, "Disable flips, rotations and crops");

  // detect
  auto* det = app.add_subcommand("detect", "Classify proposals and write detections");
  fs::path d_manifest, d_protos, d_out;
  DetectOptions d_opts;
  std::string d_score = "raw";
  det->add_option("--manifest", d_manifest)->required();
  det->add_option("--prototypes", d_protos)->required();
  det->add_option("--out", d_out)->required();
  det->add_option("--nms-iou", d_opts.nms_iou)->check(CLI::Range(0.0, 1.0));
  det->add_option("--score", d_score)->check(CLI::IsMember({"raw", "margin"}));
  det->add_flag("--class-agnostic-nms", d_opts.class_agnostic_nms);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "mAP of detections against manifest ground truth");
  fs::path e_dets, e_manifest, e_out;
  std::string e_classes = "novel";
  double e_iou = 0.5;
  bool e_voc11 = false;
  ev->add_option("--detections", e_dets)->required();
  ev->add_option("--manifest", e_manifest)->required();
  ev->add_option("--out", e_out)->required();
  ev->add_option("--classes", e_classes)->check(CLI::IsMember({"novel", "base", "all"}));
  ev->add_option("--iou", e_iou)->check(CLI::Range(0.0, 1.0));
  ev->add_flag("--voc11", e_voc11, "11-point interpolated AP");

  // classify-eval
  auto* ce = app.add_subcommand("classify-eval", "Classify ground-truth boxes; F1 and accuracy");
  fs::path c_manifest, c_protos, c_out;
  bool c_masks = false;
  ce->add_option("--manifest", c_manifest)->required();
  ce->add_option("--prototypes", c_protos)->required();
  ce->add_option("--out", c_out)->required();
  ce->add_flag("--use-masks", c_masks);

  // export-prototypes
  auto* ex = app.add_subcommand("export-prototypes", "Dump the prototype matrix with row labels");
  fs::path x_protos, x_out;
  std::string x_format = "csv";
  ex->add_option("--prototypes", x_protos)->required();
  ex->add_option("--out", x_out)->required();
  ex->add_option("--format", x_format)->check(CLI::IsMember({"csv", "binary"}));

  // fixture
  auto* fx = app.add_subcommand("fixture", "Generate a synthetic dataset");
  fs::path s_spec, s_out;
  fx->add_option("--spec", s_spec, "Fixture spec JSON (must contain a seed)")->required();
  fx->add_option("--out", s_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    const io::FeatureLoader load = io::CachingFeatureLoader{};

    if (validate->parsed()) {
      auto loaded = load_and_validate(v_manifest);
      detail::report(loaded.diagnostics);
      if (has_fatal(loaded.diagnostics)) return kExitFailure;
      log::info("manifest OK: " + std::to_string(loaded.manifest.entries.size()) + " entries");
      return kExitOk;
    }

    if (build->parsed()) {
      const auto manifest = detail::load_manifest(b_manifest);
      Diagnostics diags;
      const auto protos = build_object_prototypes(manifest, load, {b_masks, b_temperature}, &diags);
      detail::report(diags);
      io::write_prototypes(b_out, protos);
      detail::write_echo(*build, b_out);
      log::info("wrote " + std::to_string(protos.rows()) + " object prototypes to " + b_out.string());
      return kExitOk;
    }

    if (bg->parsed()) {
      const auto manifest = detail::load_manifest(g_manifest);
      const fs::path in = g_protos.empty() ? g_out : g_protos;
      const PrototypeSet objects = io::read_prototypes(in);
      Diagnostics diags;
      const auto crops = sample_background_crops(manifest, g_crops, g_seed, load, &diags);
      if (crops.empty()) {
        detail::report(diags);
        throw Error("no object-free crops could be sampled");
      }
      const auto rows = build_background_prototypes(crops, g_k, g_seed, {g_iters, g_tol}, &diags);
      detail::report(diags);
      const PrototypeSet out = with_background_rows(objects, rows);
      io::write_prototypes(g_out, out);
      detail::write_echo(*bg, g_out);
      log::info("wrote " + std::to_string(rows.size()) + " background prototypes from " +
                std::to_string(crops.size()) + " crops to " + g_out.string());
      return kExitOk;
    }

    if (ft->parsed()) {
      const auto manifest = detail::load_manifest(f_manifest);
      const PrototypeSet init = io::read_prototypes(f_protos);
      cfg.background_target_mode =
          f_targets == "frozen" ? BackgroundTargetMode::kFrozen : BackgroundTargetMode::kDynamic;
      if (f_no_augment) cfg.augment = {false, false, false, false};
      std::ostringstream lines;
      const auto result = finetune(manifest, init, cfg, load, [&](const EpochLog& e) {
        lines << json{{"epoch", e.epoch}, {"loss", e.loss}, {"acc", e.accuracy}, {"lr", e.lr}}.dump()
              << '\n';
        log::debug("epoch " + std::to_string(e.epoch) + " loss " + detail::num(e.loss) +
                   " acc " + detail::num(e.accuracy));
      });
      io::write_prototypes(f_out, result.prototypes);
      if (!f_log.empty()) io::atomic_write(f_log, lines.str());
      detail::write_echo(*ft, f_out);
      const auto& last = result.log.back();
      log::info("fine-tuned " + std::to_string(cfg.epochs) + " epochs; final loss " +
                detail::num(last.loss) + ", accuracy " + detail::num(last.accuracy));
      return kExitOk;
    }

    if (det->parsed()) {
      const auto manifest = detail::load_manifest(d_manifest);
      const PrototypeSet protos = io::read_prototypes(d_protos);
      d_opts.score_mode = d_score == "margin" ? ScoreMode::kMargin : ScoreMode::kRaw;
      std::vector<io::ImageDetections> all(manifest.entries.size());
      detail::parallel_for(manifest.entries.size(), threads, [&](std::size_t i) {
        const auto& e = manifest.entries[i];
        all[i] = {e.image_id, detect_image(load(e.feature_file), e.proposals, protos, d_opts)};
      });
      io::write_json(d_out, io::detections_to_json(all, protos.class_table()));
      detail::write_echo(*det, d_out);
      std::size_t n = 0;
      for (const auto& im : all) n += im.detections.size();
      log::info("wrote " + std::to_string(n) + " detections to " + d_out.string());
      return kExitOk;
    }

    if (ev->parsed()) {
      const auto manifest = detail::load_manifest(e_manifest);
      const auto dets = io::detections_from_json(io::read_json(e_dets), manifest.class_table);
      const ClassSelection sel = e_classes == "novel"  ? ClassSelection::kNovel
                                 : e_classes == "base" ? ClassSelection::kBase
                                                       : ClassSelection::kAll;
      const auto classes = select_classes(manifest.class_table, sel);
      if (classes.empty()) throw Error("manifest has no '" + e_classes + "' classes");
      const EvalReport report = evaluate_detections(dets, manifest, {e_iou, classes, e_voc11});
      io::write_json(e_out, detail::eval_report_json(report, manifest.class_table));
      detail::write_echo(*ev, e_out);
      log::info("mAP@" + detail::num(e_iou) + " (" + e_classes + ") = " + detail::num(report.map));
      return kExitOk;
    }

    if (ce->parsed()) {
      const auto manifest = detail::load_manifest(c_manifest);
      const PrototypeSet protos = io::read_prototypes(c_protos);
      const auto report = evaluate_classification(manifest, protos, load, c_masks);
      io::write_json(c_out, detail::classification_report_json(report, protos.class_table()));
      detail::write_echo(*ce, c_out);
      log::info("accuracy " + detail::num(report.accuracy) + ", macro F1 " +
                detail::num(report.macro_f1));
      return kExitOk;
    }

    if (ex->parsed()) {
      const PrototypeSet protos = io::read_prototypes(x_protos);
      io::atomic_write(x_out, x_format == "csv" ? io::export_prototypes_csv(protos)
                                                : io::export_prototypes_binary(protos));
      detail::write_echo(*ex, x_out);
      return kExitOk;
    }

    if (fx->parsed()) {
      const FixtureSpec spec = fixture_spec_from_json(io::read_json(s_spec));
      const Fixture fixture = generate_fixture(spec, s_out);
      write_fixture(fixture, s_out);
      detail::write_echo(*fx, s_out / "fixture");
      log::info("wrote fixture to " + s_out.string());
      return kExitOk;
    }
  } catch (const DiagnosticFailure& e) {
    log::error(e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

inline int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"protodetect"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace protodetect::cli

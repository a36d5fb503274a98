#pragma once

// On-disk formats.
//
// Feature file (.fmap), little-endian:
//   "FMAP" | u32 version=1 | u32 grid_h | u32 grid_w | u32 dim | u32 patch_size
//   | u32 image_h | u32 image_w | grid_h*grid_w*dim f32, row-major (h, w, c)
//
// Prototype file (.proto): one JSON object
//   {"format": "protodetect.prototypes", "version": 1,
//    "classes": [{"name": ..., "role": "base"|"novel"}, ...],
//    "background_count": K, "dim": D, "temperature": t,
//    "provenance": "averaged"|"finetuned", "encoding": "base64-f32le",
//    "data": <base64 of (J+K)*D little-endian f32, row-major>}
//
// Manifest: see read_manifest().
//
// Binary prototype export: "PROT" | u32 version=1 | u32 rows | u32 dim |
//   rows*dim f32 | rows newline-terminated UTF-8 labels.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodetect/core_types.hpp"

namespace protodetect::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Low-level helpers

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

inline float get_f32(std::string_view in, std::size_t offset) {
  return std::bit_cast<float>(get_u32(in, offset));
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error("read failed for '" + path.string() + "'");
  return ss.str();
}

/// Writes to a sibling temp file, then renames over the target.
inline void atomic_write(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

inline void write_json(const fs::path& path, const json& j) {
  atomic_write(path, j.dump(2) + "\n");
}

inline json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

inline std::string base64_encode(std::string_view bytes) {
  static constexpr char kAlphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                            static_cast<unsigned char>(bytes[i + 2]);
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back(kAlphabet[v & 63]);
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(rest == 2 ? kAlphabet[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

inline std::string base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw Error("invalid base64 length");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = value(c);
        if (v[k] < 0 || pad > 0) throw Error("invalid base64 character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<char>((w >> 16) & 0xFF));
    if (pad < 2) out.push_back(static_cast<char>((w >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<char>(w & 0xFF));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature maps

inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 7 * 4;

inline std::string encode_feature_map(const FeatureMap& fm) {
  std::string out = "FMAP";
  const auto& g = fm.geometry();
  put_u32(out, kFeatureVersion);
  for (int v : {g.grid_h, g.grid_w, fm.dim(), g.patch_size, g.image_h, g.image_w}) {
    put_u32(out, static_cast<std::uint32_t>(v));
  }
  out.reserve(out.size() + fm.data().size() * 4);
  for (float f : fm.data()) put_f32(out, f);
  return out;
}

inline FeatureMap decode_feature_map(std::string_view bytes, const std::string& what) {
  if (bytes.size() < kFeatureHeaderBytes || bytes.substr(0, 4) != "FMAP") {
    throw Error("'" + what + "' is not a feature file (bad magic)");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kFeatureVersion) {
    throw Error("'" + what + "' has unsupported version " + std::to_string(version));
  }
  std::array<std::uint32_t, 6> h{};
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = get_u32(bytes, 8 + 4 * i);
  for (auto v : h) {
    if (v == 0 || v > (1u << 24)) throw Error("'" + what + "' has an invalid header field");
  }
  const std::uint64_t count = std::uint64_t{h[0]} * h[1] * h[2];
  if (bytes.size() != kFeatureHeaderBytes + count * 4) {
    throw Error("'" + what + "' payload size does not match header");
  }
  std::vector<float> data(count);
  for (std::uint64_t i = 0; i < count; ++i) data[i] = get_f32(bytes, kFeatureHeaderBytes + 4 * i);
  GridGeometry g{static_cast<int>(h[0]), static_cast<int>(h[1]), static_cast<int>(h[3]),
                 static_cast<int>(h[4]), static_cast<int>(h[5])};
  try {
    return FeatureMap(g, static_cast<int>(h[2]), std::move(data));
  } catch (const Error& e) {
    throw Error("'" + what + "': " + e.what());
  }
}

inline FeatureMap read_feature_map(const fs::path& path) {
  return decode_feature_map(read_file(path), path.string());
}

inline void write_feature_map(const fs::path& path, const FeatureMap& fm) {
  atomic_write(path, encode_feature_map(fm));
}

/// Source of feature maps keyed by file path. Tests substitute in-memory maps.
using FeatureLoader = std::function<FeatureMap(const fs::path&)>;

/// Reads each file once and keeps it; safe to share between threads.
class CachingFeatureLoader {
 public:
  FeatureMap operator()(const fs::path& path) const {
    std::lock_guard lock(state_->mutex);
    auto it = state_->cache.find(path.string());
    if (it == state_->cache.end()) {
      it = state_->cache.emplace(path.string(), read_feature_map(path)).first;
    }
    return it->second;
  }

 private:
  struct State {
    std::mutex mutex;
    std::map<std::string, FeatureMap> cache;
  };
  std::shared_ptr<State> state_ = std::make_shared<State>();
};

// ---------------------------------------------------------------------------
// Masks: {"size": [h, w], "counts": "<run lengths>"}; runs alternate
// background/foreground over row-major pixels, starting with background.

inline json encode_mask(const Mask& m) {
  std::string counts;
  std::uint8_t current = 0;
  std::size_t run = 0;
  auto flush = [&] {
    if (!counts.empty()) counts.push_back(' ');
    counts += std::to_string(run);
  };
  for (auto b : m.bits) {
    const std::uint8_t v = b ? 1 : 0;
    if (v != current) {
      flush();
      current = v;
      run = 0;
    }
    ++run;
  }
  flush();
  return json{{"size", {m.height, m.width}}, {"counts", counts}};
}

inline Mask decode_mask(const json& j) {
  Mask m;
  m.height = j.at("size").at(0).get<int>();
  m.width = j.at("size").at(1).get<int>();
  if (m.height < 0 || m.width < 0) throw Error("negative mask size");
  const std::size_t total = static_cast<std::size_t>(m.height) * m.width;
  m.bits.reserve(total);
  std::istringstream runs(j.at("counts").get<std::string>());
  std::uint8_t current = 0;
  long long run = 0;
  while (runs >> run) {
    if (run < 0 || m.bits.size() + static_cast<std::size_t>(run) > total) {
      throw Error("mask run lengths exceed mask size");
    }
    m.bits.insert(m.bits.end(), static_cast<std::size_t>(run), current);
    current ^= 1;
  }
  if (!runs.eof()) throw Error("malformed mask counts");
  if (m.bits.size() != total) throw Error("mask run lengths do not cover mask size");
  return m;
}

/// Re-expresses a mask for a box that was clipped from `original`.
inline Mask crop_mask(const Mask& m, const PixelBox& original, const PixelBox& clipped) {
  const int ox = static_cast<int>(std::floor(original.x_min));
  const int oy = static_cast<int>(std::floor(original.y_min));
  const auto [w, h] = mask_extent(clipped);
  const int nx = static_cast<int>(std::floor(clipped.x_min));
  const int ny = static_cast<int>(std::floor(clipped.y_min));
  Mask out{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(w, 0)) *
                                               std::max(h, 0), 0)};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int sr = ny + r - oy;
      const int sc = nx + c - ox;
      if (sr >= 0 && sr < m.height && sc >= 0 && sc < m.width && m.at(sr, sc)) {
        out.bits[static_cast<std::size_t>(r) * w + c] = 1;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Class tables and boxes

inline json encode_box(const PixelBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

inline PixelBox decode_box(const json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("box must be [x_min, y_min, x_max, y_max]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline json encode_classes(const ClassTable& t) {
  json arr = json::array();
  for (const auto& c : t.objects()) arr.push_back({{"name", c.name}, {"role", to_string(c.role)}});
  return arr;
}

inline std::vector<ObjectClass> decode_classes(const json& j) {
  std::vector<ObjectClass> out;
  for (const auto& c : j) {
    const std::string role = c.value("role", "novel");
    if (role != "base" && role != "novel") throw Error("class role must be base or novel");
    out.push_back({c.at("name").get<std::string>(),
                   role == "base" ? ClassRole::kBase : ClassRole::kNovel});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests
//
// {"split_role": "train_shots"|"test",
//  "classes": [{"name": ..., "role": ...}], "background_count": 0,
//  "entries": [{"image_id": ..., "feature_file": <path relative to manifest>,
//               "feature_variants": [...], "image_h": H, "image_w": W,
//               "annotations": [{"box": [x0,y0,x1,y1], "class": name,
//                                "mask": {"size": [h,w], "counts": "..."}}],
//               "proposals": [[x0,y0,x1,y1], ...]}]}

struct ManifestLoad {
  DatasetManifest manifest;
  Diagnostics diagnostics;  // problems found while resolving names/masks
};

inline ManifestLoad parse_manifest(const json& j, const fs::path& base_dir) {
  ManifestLoad load;
  auto& m = load.manifest;
  try {
    m.class_table = ClassTable(decode_classes(j.at("classes")), j.value("background_count", 0));
    const std::string role = j.value("split_role", "test");
    if (role != "train_shots" && role != "test") throw Error("unknown split_role '" + role + "'");
    m.split_role = role == "train_shots" ? SplitRole::kTrainShots : SplitRole::kTest;

    auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return path.is_absolute() ? path : base_dir / path;
    };

    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.image_id = je.at("image_id").get<std::string>();
      e.feature_file = resolve(je.at("feature_file").get<std::string>());
      for (const auto& v : je.value("feature_variants", json::array())) {
        e.feature_variants.push_back(resolve(v.get<std::string>()));
      }
      e.image_h = je.at("image_h").get<int>();
      e.image_w = je.at("image_w").get<int>();
      for (const auto& ja : je.value("annotations", json::array())) {
        const std::string name = ja.at("class").get<std::string>();
        const auto id = m.class_table.find(name);
        if (!id) {
          load.diagnostics.push_back({Severity::kFatal, e.image_id, "unknown class",
                                      "'" + name + "' is not in the class table"});
          continue;
        }
        const PixelBox raw = decode_box(ja.at("box"));
        Annotation a{clip_box(raw, e.image_w, e.image_h), *id, std::nullopt};
        if (ja.contains("mask")) {
          Mask mask = decode_mask(ja.at("mask"));
          if (a.box != raw && !a.box.degenerate()) mask = crop_mask(mask, raw, a.box);
          a.mask = std::move(mask);
        }
        e.annotations.push_back(std::move(a));
      }
      for (const auto& jp : je.value("proposals", json::array())) {
        e.proposals.push_back(clip_box(decode_box(jp), e.image_w, e.image_h));
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw Error(std::string("malformed manifest: ") + ex.what());
  }
  return load;
}

inline ManifestLoad read_manifest(const fs::path& path) {
  return parse_manifest(read_json(path), path.parent_path());
}

inline json manifest_to_json(const DatasetManifest& m, const fs::path& base_dir) {
  auto rel = [&](const fs::path& p) {
    return base_dir.empty() ? p.generic_string() : p.lexically_relative(base_dir).generic_string();
  };
  json entries = json::array();
  for (const auto& e : m.entries) {
    json je{{"image_id", e.image_id}, {"feature_file", rel(e.feature_file)}};
    if (!e.feature_variants.empty()) {
      json vars = json::array();
      for (const auto& v : e.feature_variants) vars.push_back(rel(v));
      je["feature_variants"] = vars;
    }
    je["image_h"] = e.image_h;
    je["image_w"] = e.image_w;
    json anns = json::array();
    for (const auto& a : e.annotations) {
      json ja{{"box", encode_box(a.box)}, {"class", m.class_table.object(a.class_id).name}};
      if (a.mask) ja["mask"] = encode_mask(*a.mask);
      anns.push_back(ja);
    }
    je["annotations"] = anns;
    json props = json::array();
    for (const auto& p : e.proposals) props.push_back(encode_box(p));
    je["proposals"] = props;
    entries.push_back(je);
  }
  return json{{"split_role", to_string(m.split_role)},
              {"classes", encode_classes(m.class_table)},
              {"background_count", m.class_table.background_count()},
              {"entries", entries}};
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  write_json(path, manifest_to_json(m, path.parent_path()));
}

// ---------------------------------------------------------------------------
// Prototype sets

inline json prototypes_to_json(const PrototypeSet& p) {
  std::string bytes;
  bytes.reserve(p.data().size() * 4);
  for (float f : p.data()) put_f32(bytes, f);
  return json{{"format", "protodetect.prototypes"},
              {"version", 1},
              {"classes", encode_classes(p.class_table())},
              {"background_count", p.class_table().background_count()},
              {"dim", p.dim()},
              {"temperature", p.temperature()},
              {"provenance", to_string(p.provenance())},
              {"encoding", "base64-f32le"},
              {"data", base64_encode(bytes)}};
}

inline PrototypeSet prototypes_from_json(const json& j) {
  try {
    if (j.value("format", "") != "protodetect.prototypes") throw Error("not a prototype file");
    if (j.value("version", 0) != 1) throw Error("unsupported prototype file version");
    if (j.value("encoding", "") != "base64-f32le") throw Error("unsupported prototype encoding");
    ClassTable table(decode_classes(j.at("classes")), j.at("background_count").get<int>());
    const int dim = j.at("dim").get<int>();
    const std::string prov = j.at("provenance").get<std::string>();
    if (prov != "averaged" && prov != "finetuned") throw Error("unknown provenance '" + prov + "'");
    const std::string bytes = base64_decode(j.at("data").get<std::string>());
    if (bytes.size() % 4 != 0) throw Error("prototype payload is not float32");
    std::vector<float> data(bytes.size() / 4);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = get_f32(bytes, 4 * i);
    return PrototypeSet::from_stored(std::move(table), dim, std::move(data),
                                     j.at("temperature").get<double>(),
                                     prov == "averaged" ? Provenance::kAveraged
                                                        : Provenance::kFinetuned);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed prototype file: ") + e.what());
  }
}

inline PrototypeSet read_prototypes(const fs::path& path) {
  try {
    return prototypes_from_json(read_json(path));
  } catch (const Error& e) {
    throw Error("'" + path.string() + "': " + e.what());
  }
}

inline void write_prototypes(const fs::path& path, const PrototypeSet& p) {
  write_json(path, prototypes_to_json(p));
}

// ---------------------------------------------------------------------------
// Detections
//
// {"classes": [names...],
//  "images": [{"image_id": ..., "detections": [{"box": [...], "class": name,
//                                               "score": s}]}]}

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

inline json detections_to_json(const std::vector<ImageDetections>& all, const ClassTable& t) {
  json images = json::array();
  for (const auto& im : all) {
    json dets = json::array();
    for (const auto& d : im.detections) {
      dets.push_back({{"box", encode_box(d.box)},
                      {"class", t.object(d.class_id).name},
                      {"score", d.score}});
    }
    images.push_back({{"image_id", im.image_id}, {"detections", dets}});
  }
  json names = json::array();
  for (const auto& c : t.objects()) names.push_back(c.name);
  return json{{"classes", names}, {"images", images}};
}

inline std::vector<ImageDetections> detections_from_json(const json& j, const ClassTable& t) {
  std::vector<ImageDetections> out;
  try {
    for (const auto& ji : j.at("images")) {
      ImageDetections im{ji.at("image_id").get<std::string>(), {}};
      for (const auto& jd : ji.at("detections")) {
        const std::string name = jd.at("class").get<std::string>();
        const auto id = t.find(name);
        if (!id) throw Error("detection class '" + name + "' is not in the class table");
        im.detections.push_back({decode_box(jd.at("box")), *id, jd.at("score").get<double>()});
      }
      out.push_back(std::move(im));
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed detections file: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prototype matrix export for external visualization tools

inline std::string export_prototypes_csv(const PrototypeSet& p) {
  std::ostringstream out;
  out << "label";
  for (int d = 0; d < p.dim(); ++d) out << ",d" << d;
  out << '\n';
  out << std::setprecision(9);
  for (int r = 0; r < p.rows(); ++r) {
    out << p.class_table().row_label(r);
    for (float v : p.row(r)) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

inline std::string export_prototypes_binary(const PrototypeSet& p) {
  std::string out = "PROT";
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(p.rows()));
  put_u32(out, static_cast<std::uint32_t>(p.dim()));
  for (float f : p.data()) put_f32(out, f);
  for (int r = 0; r < p.rows(); ++r) out += p.class_table().row_label(r) + "\n";
  return out;
}

struct ExportedMatrix {
  int rows{0};
  int dim{0};
  std::vector<float> data;
  std::vector<std::string> labels;
};

inline ExportedMatrix import_prototypes_binary(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "PROT" || get_u32(bytes, 4) != 1) {
    throw Error("not a prototype export");
  }
  ExportedMatrix m;
  m.rows = static_cast<int>(get_u32(bytes, 8));
  m.dim = static_cast<int>(get_u32(bytes, 12));
  const std::size_t n = static_cast<std::size_t>(m.rows) * m.dim;
  if (bytes.size() < 16 + 4 * n) throw Error("truncated prototype export");
  m.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.data[i] = get_f32(bytes, 16 + 4 * i);
  std::string_view labels = bytes.substr(16 + 4 * n);
  while (!labels.empty()) {
    const auto nl = labels.find('\n');
    if (nl == std::string_view::npos) throw Error("unterminated label in prototype export");
    m.labels.emplace_back(labels.substr(0, nl));
    labels.remove_prefix(nl + 1);
  }
  if (static_cast<int>(m.labels.size()) != m.rows) throw Error("label count mismatch");
  return m;
}

}  // namespace protodetect::io

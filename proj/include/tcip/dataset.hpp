#pragma once

// Datasets on disk: one directory per pair plus a manifest.json listing the
// pair files (relative to the manifest) and the generation spec.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "tcip/config.hpp"
#include "tcip/synth.hpp"
#include "tcip/volume_io.hpp"

namespace tcip {

struct PairEntry {
  std::string id;
  std::string fixed, moving, fixed_labels, moving_labels, gt_field;  // relative to the dataset root
};

struct Manifest {
  std::string root;
  SynthSpec spec;
  std::vector<PairEntry> pairs;
};

struct LoadedPair {
  std::string id;
  Volume fixed, moving;
  LabelVolume fixed_labels, moving_labels;
};

inline std::string pair_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%03d", index);
  return buf;
}

inline Json manifest_to_json(const Manifest& m) {
  Json pairs = Json::array();
  for (const auto& p : m.pairs)
    pairs.push_back({{"id", p.id},
                     {"fixed", p.fixed},
                     {"moving", p.moving},
                     {"fixed_labels", p.fixed_labels},
                     {"moving_labels", p.moving_labels},
                     {"gt_field", p.gt_field}});
  return Json{{"format", "tcip-dataset"},
              {"version", 1},
              {"generator", synth_to_json(m.spec)},
              {"count", m.pairs.size()},
              {"pairs", pairs}};
}

/// Pair i uses seed spec.seed + i.
inline Manifest write_synth_dataset(const std::string& dir, const SynthSpec& spec, int count) {
  namespace fs = std::filesystem;
  spec.validate();
  if (count < 0) throw ConfigError("synth: pair count must be >= 0");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError(IoErrorKind::Unwritable, dir, "cannot create directory");

  Manifest m{dir, spec, {}};
  for (int i = 0; i < count; ++i) {
    SynthSpec s = spec;
    s.seed = spec.seed + static_cast<std::uint64_t>(i);
    const SynthPair pair = make_pair(s);
    PairEntry e;
    e.id = pair_id(i);
    fs::create_directories(fs::path(dir) / e.id, ec);
    if (ec) throw IoError(IoErrorKind::Unwritable, (fs::path(dir) / e.id).string(), "cannot create directory");
    e.fixed = e.id + "/fixed";
    e.moving = e.id + "/moving";
    e.fixed_labels = e.id + "/fixed_labels";
    e.moving_labels = e.id + "/moving_labels";
    e.gt_field = e.id + "/gt_field";
    const fs::path root(dir);
    save_volume((root / e.fixed).string(), pair.fixed);
    save_volume((root / e.moving).string(), pair.moving);
    save_labels((root / e.fixed_labels).string(), pair.fixed_labels);
    save_labels((root / e.moving_labels).string(), pair.moving_labels);
    save_field((root / e.gt_field).string(), pair.gt_field);
    m.pairs.push_back(e);
  }
  write_json_file((fs::path(dir) / "manifest.json").string(), manifest_to_json(m));
  return m;
}

/// Accepts the dataset directory or the manifest path itself.
inline Manifest load_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path p(path);
  const fs::path file = fs::is_directory(p) ? p / "manifest.json" : p;
  const std::string fname = file.string();
  const Json j = read_json_file(fname);
  auto bad = [&](const std::string& why) { return IoError(IoErrorKind::MalformedHeader, fname, why); };
  if (!j.is_object() || j.value("format", "") != "tcip-dataset") throw bad("not a tcip-dataset manifest");
  if (!j.contains("pairs") || !j["pairs"].is_array()) throw bad("missing pairs array");
  Manifest m;
  m.root = file.parent_path().string();
  try {
    if (j.contains("generator")) m.spec = synth_from_json(j["generator"]);
    for (const auto& e : j["pairs"]) {
      PairEntry p;
      p.id = e.at("id").get<std::string>();
      p.fixed = e.at("fixed").get<std::string>();
      p.moving = e.at("moving").get<std::string>();
      p.fixed_labels = e.at("fixed_labels").get<std::string>();
      p.moving_labels = e.at("moving_labels").get<std::string>();
      p.gt_field = e.value("gt_field", "");
      m.pairs.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw bad(e.what());
  } catch (const ConfigError& e) {
    throw bad(e.what());
  }
  std::sort(m.pairs.begin(), m.pairs.end(), [](const PairEntry& a, const PairEntry& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < m.pairs.size(); ++i)
    if (m.pairs[i].id == m.pairs[i - 1].id) throw bad("duplicate pair id " + m.pairs[i].id);
  return m;
}

inline LoadedPair load_pair(const Manifest& m, const PairEntry& e) {
  namespace fs = std::filesystem;
  const fs::path root(m.root);
  LoadedPair p;
  p.id = e.id;
  p.fixed = load_volume((root / e.fixed).string());
  p.moving = load_volume((root / e.moving).string());
  p.fixed_labels = load_labels((root / e.fixed_labels).string());
  p.moving_labels = load_labels((root / e.moving_labels).string());
  if (!(p.fixed.dims == p.moving.dims) || !(p.fixed.dims == p.fixed_labels.dims) ||
      !(p.fixed.dims == p.moving_labels.dims))
    throw ShapeError("pair " + e.id + ": volumes have different grids");
  return p;
}

inline std::vector<LoadedPair> load_pairs(const Manifest& m) {
  std::vector<LoadedPair> out;
  for (const auto& e : m.pairs) out.push_back(load_pair(m, e));
  return out;
}

/// In-memory equivalent of write_synth_dataset + load_pairs.
inline std::vector<LoadedPair> synth_pairs(const SynthSpec& spec, int count) {
  std::vector<LoadedPair> out;
  for (int i = 0; i < count; ++i) {
    SynthSpec s = spec;
    s.seed = spec.seed + static_cast<std::uint64_t>(i);
    SynthPair sp = make_pair(s);
    out.push_back({pair_id(i), std::move(sp.fixed), std::move(sp.moving), std::move(sp.fixed_labels),
                   std::move(sp.moving_labels)});
  }
  return out;
}

}  // namespace tcip

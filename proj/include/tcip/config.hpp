#pragma once

// Run configuration: every model, controller, loss, training and data setting
// in one JSON document. Unknown keys are rejected so typos fail loudly.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"
#include "tcip/encoder.hpp"
#include "tcip/error.hpp"
#include "tcip/ferm.hpp"
#include "tcip/losses.hpp"
#include "tcip/pyramid.hpp"
#include "tcip/synth.hpp"
#include "tcip/tci.hpp"

namespace tcip {

using Json = nlohmann::ordered_json;

struct TrainOptions {
  double lr = 1e-4;
  int steps = 300;
  std::uint64_t seed = 0;
  bool detach_iterations = false;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: learning rate must be > 0");
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
  }
};

struct RunConfig {
  EncoderConfig encoder;
  FermOptions ferm;
  TciConfig tci;
  bool return_best = false;
  LossConfig loss;
  TrainOptions train;
  SynthSpec synth;
  int synth_pairs = 4;
  std::string dataset;
  std::string output_dir;

  void validate() const {
    encoder.validate();
    ferm.validate();
    tci.validate();
    loss.validate();
    train.validate();
    synth.validate();
    if (synth_pairs < 0) throw ConfigError("data: pair count must be >= 0");
  }

  LayerOptions layer_options() const {
    LayerOptions o;
    o.tci = tci;
    o.similarity_patch = loss.patch;
    o.similarity_epsilon = loss.epsilon;
    o.detach_iterations = train.detach_iterations;
    o.return_best = return_best;
    return o;
  }
};

inline Json synth_to_json(const SynthSpec& s) {
  return Json{{"grid_size", s.grid_size},
              {"num_blobs", s.num_blobs},
              {"blob_radius_min", s.blob_radius_min},
              {"blob_radius_max", s.blob_radius_max},
              {"amplitude", s.deform_amplitude},
              {"smoothness", s.deform_smoothness},
              {"seed", s.seed}};
}

inline Json to_json(const RunConfig& c) {
  Json layers = Json::array();
  for (bool b : c.tci.layer_enabled) layers.push_back(b);
  Json j;
  j["encoder"] = {{"channels", c.encoder.channels}};
  j["ferm"] = {{"reduction", c.ferm.reduction}, {"use_ffb", c.ferm.use_ffb}, {"use_seb", c.ferm.use_seb}};
  j["tci"] = {{"mode", to_string(c.tci.mode)},   {"metric", to_string(c.tci.metric)},
              {"delta_s", c.tci.delta_s},       {"delta_c", c.tci.delta_c},
              {"window", c.tci.window},         {"k_max", c.tci.k_max},
              {"layers", layers},               {"return_best", c.return_best}};
  j["loss"] = {{"patch", c.loss.patch}, {"lambda", c.loss.lambda}, {"epsilon", c.loss.epsilon}};
  j["train"] = {{"lr", c.train.lr},
                {"steps", c.train.steps},
                {"seed", c.train.seed},
                {"detach_iterations", c.train.detach_iterations}};
  j["data"] = {{"synth", synth_to_json(c.synth)}, {"pairs", c.synth_pairs}, {"dataset", c.dataset}};
  j["output_dir"] = c.output_dir;
  return j;
}

namespace config_detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw ConfigError("config: unknown key '" + where + "." + key + "'");
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: '" + where + "." + key + "' has the wrong type");
  }
}

}  // namespace config_detail

inline SynthSpec synth_from_json(const Json& j, SynthSpec s = {}) {
  using namespace config_detail;
  check_keys(j, "data.synth",
             {"grid_size", "num_blobs", "blob_radius_min", "blob_radius_max", "amplitude", "smoothness", "seed"});
  read(j, "grid_size", s.grid_size, "data.synth");
  read(j, "num_blobs", s.num_blobs, "data.synth");
  read(j, "blob_radius_min", s.blob_radius_min, "data.synth");
  read(j, "blob_radius_max", s.blob_radius_max, "data.synth");
  read(j, "amplitude", s.deform_amplitude, "data.synth");
  read(j, "smoothness", s.deform_smoothness, "data.synth");
  read(j, "seed", s.seed, "data.synth");
  return s;
}

/// Missing keys keep the values already in `base`.
inline RunConfig from_json(const Json& j, RunConfig c = {}) {
  using namespace config_detail;
  check_keys(j, "config", {"encoder", "ferm", "tci", "loss", "train", "data", "output_dir"});
  if (j.contains("encoder")) {
    const Json& e = j["encoder"];
    check_keys(e, "encoder", {"channels"});
    read(e, "channels", c.encoder.channels, "encoder");
  }
  if (j.contains("ferm")) {
    const Json& f = j["ferm"];
    check_keys(f, "ferm", {"reduction", "use_ffb", "use_seb"});
    read(f, "reduction", c.ferm.reduction, "ferm");
    read(f, "use_ffb", c.ferm.use_ffb, "ferm");
    read(f, "use_seb", c.ferm.use_seb, "ferm");
  }
  if (j.contains("tci")) {
    const Json& t = j["tci"];
    check_keys(t, "tci", {"mode", "metric", "delta_s", "delta_c", "window", "k_max", "layers", "return_best"});
    std::string mode = to_string(c.tci.mode), metric = to_string(c.tci.metric);
    read(t, "mode", mode, "tci");
    read(t, "metric", metric, "tci");
    c.tci.mode = parse_tci_mode(mode);
    c.tci.metric = parse_similarity_metric(metric);
    read(t, "delta_s", c.tci.delta_s, "tci");
    read(t, "delta_c", c.tci.delta_c, "tci");
    read(t, "window", c.tci.window, "tci");
    read(t, "k_max", c.tci.k_max, "tci");
    read(t, "layers", c.tci.layer_enabled, "tci");
    read(t, "return_best", c.return_best, "tci");
  }
  if (j.contains("loss")) {
    const Json& l = j["loss"];
    check_keys(l, "loss", {"patch", "lambda", "epsilon"});
    read(l, "patch", c.loss.patch, "loss");
    read(l, "lambda", c.loss.lambda, "loss");
    read(l, "epsilon", c.loss.epsilon, "loss");
  }
  if (j.contains("train")) {
    const Json& t = j["train"];
    check_keys(t, "train", {"lr", "steps", "seed", "detach_iterations"});
    read(t, "lr", c.train.lr, "train");
    read(t, "steps", c.train.steps, "train");
    read(t, "seed", c.train.seed, "train");
    read(t, "detach_iterations", c.train.detach_iterations, "train");
  }
  if (j.contains("data")) {
    const Json& d = j["data"];
    check_keys(d, "data", {"synth", "pairs", "dataset"});
    if (d.contains("synth")) c.synth = synth_from_json(d["synth"], c.synth);
    read(d, "pairs", c.synth_pairs, "data");
    read(d, "dataset", c.dataset, "data");
  }
  read(j, "output_dir", c.output_dir, "config");
  c.validate();
  return c;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoErrorKind::Unreadable, path, "cannot open");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::MalformedHeader, path, e.what());
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "cannot open for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "write failed");
}

inline RunConfig load_config(const std::string& path) { return from_json(read_json_file(path)); }

}  // namespace tcip

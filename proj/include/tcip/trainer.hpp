#pragma once

// Training loop, checkpoints, evaluation reports and ablation grids.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tcip/config.hpp"
#include "tcip/dataset.hpp"
#include "tcip/metrics.hpp"
#include "tcip/param_store.hpp"
#include "tcip/pyramid.hpp"
#include "tcip/warpfield.hpp"

namespace tcip {

// ---------------------------------------------------------------------------
// Checkpoints

inline Json config_echo(const RunConfig& cfg) {
  Json j = to_json(cfg);
  j.erase("output_dir");
  return j;
}

inline Json checkpoint_to_json(const TcipModel& model, const RunConfig& cfg) {
  Json params = Json::object();
  for (const auto& [path, e] : model.params.entries()) {
    const Shape& s = e.value.shape();
    params[path] = {{"shape", s.dims}, {"values", e.value.values()}};
  }
  return Json{{"format", "tcip-checkpoint"},
              {"version", 1},
              {"config", to_json(cfg)},
              {"parameter_count", model.params.parameter_count()},
              {"params", params}};
}

inline void save_checkpoint(const std::string& path, const TcipModel& model, const RunConfig& cfg) {
  write_json_file(path, checkpoint_to_json(model, cfg));
}

struct Checkpoint {
  RunConfig config;
  TcipModel model;
};

inline Checkpoint checkpoint_from_json(const Json& j, const std::string& origin = "checkpoint") {
  auto bad = [&](const std::string& why) { return IoError(IoErrorKind::MalformedHeader, origin, why); };
  if (!j.is_object() || j.value("format", "") != "tcip-checkpoint") throw bad("not a tcip-checkpoint file");
  if (!j.contains("config") || !j.contains("params")) throw bad("missing config or params");
  Checkpoint c{from_json(j["config"]), {}};
  c.model = make_model(c.config.encoder, c.config.ferm, 0);
  const Json& params = j["params"];
  if (!params.is_object()) throw bad("params must be an object");
  if (params.size() != c.model.params.size())
    throw bad("expected " + std::to_string(c.model.params.size()) + " parameters, found " +
              std::to_string(params.size()));
  for (auto& [path, e] : c.model.params.entries()) {
    if (!params.contains(path)) throw bad("missing parameter " + path);
    const Json& p = params[path];
    std::vector<double> values;
    std::array<Index, 5> dims{};
    try {
      dims = p.at("shape").get<std::array<Index, 5>>();
      values = p.at("values").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& ex) {
      throw bad("parameter " + path + ": " + ex.what());
    }
    if (dims != e.value.shape().dims) throw bad("parameter " + path + " has shape incompatible with the config");
    if (values.size() != e.value.values().size()) throw bad("parameter " + path + " has the wrong length");
    std::copy(values.begin(), values.end(), e.value.mutable_data().begin());
  }
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path), path); }

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
  int step = 0;
  std::string pair;
  double total = 0.0, ncc = 0.0, smooth = 0.0;
  std::array<int, kPyramidLevels> iterations{};
};

struct TrainResult {
  TcipModel model;
  std::vector<StepRecord> curve;
  double seconds = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Adam over the pairs in round-robin order, one pair per step. Images are
/// zero-padded to the encoder grid multiple.
inline TrainResult train(const RunConfig& cfg, const std::vector<LoadedPair>& pairs, const StepCallback& on_step = {}) {
  cfg.validate();
  if (cfg.train.steps > 0 && pairs.empty()) throw ConfigError("train: dataset has no pairs");
  const auto start = std::chrono::steady_clock::now();
  TrainResult out{make_model(cfg.encoder, cfg.ferm, cfg.train.seed), {}, 0.0};

  std::vector<std::pair<Tensor, Tensor>> tensors;
  for (const auto& p : pairs) tensors.emplace_back(to_tensor(pad_volume(p.fixed)), to_tensor(pad_volume(p.moving)));

  const LayerOptions opt = cfg.layer_options();
  const AdamOptions adam{cfg.train.lr};
  for (int step = 0; step < cfg.train.steps; ++step) {
    const std::size_t k = static_cast<std::size_t>(step) % pairs.size();
    const auto& [fixed, moving] = tensors[k];
    out.model.params.zero_grad();
    RegistrationResult r = register_tensors(out.model, fixed, moving, opt);
    LossTerms loss = total_loss(fixed, r.warped, r.field.displacements, cfg.loss);
    StepRecord rec{step, pairs[k].id, loss.total.item(), loss.ncc.item(), loss.smooth.item(), r.iterations};
    if (!std::isfinite(rec.total))
      throw NumericError("train: non-finite loss at step " + std::to_string(step) + " (pair " + pairs[k].id + ")");
    backward(loss.total);
    adam_step(out.model.params, adam);
    out.curve.push_back(rec);
    if (on_step) on_step(rec);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline Json train_report_json(const TrainResult& r, const RunConfig& cfg) {
  Json curve = Json::array();
  for (const auto& s : r.curve)
    curve.push_back({{"step", s.step},
                     {"pair", s.pair},
                     {"total", s.total},
                     {"ncc", s.ncc},
                     {"smooth", s.smooth},
                     {"iterations", s.iterations}});
  return Json{{"format", "tcip-train-report"},
              {"version", 1},
              {"seed", cfg.train.seed},
              {"config", config_echo(cfg)},
              {"parameter_count", r.model.params.parameter_count()},
              {"loss_curve", curve}};
}

// ---------------------------------------------------------------------------
// Evaluation

struct PairResult {
  std::string id;
  double dice_before = 0.0, dice = 0.0;
  double hd95 = 0.0, assd = 0.0;
  double mse_before = 0.0, mse = 0.0;
  double folding = 0.0;
  std::array<int, kPyramidLevels> iterations{};  // indexed by level - 1
  std::vector<TraceRow> trace;
  double seconds = 0.0;
};

/// Registers one pair and scores the warped moving labels against the fixed labels.
inline PairResult evaluate_pair(const TcipModel& model, const RunConfig& cfg, const LoadedPair& pair) {
  PairResult r;
  r.id = pair.id;
  const VolumeRegistration reg = register_volumes(model, pair.fixed, pair.moving, cfg.layer_options());
  const LabelVolume warped_labels = warp_labels(pair.moving_labels, reg.field);
  r.dice_before = mean_dice(pair.fixed_labels, pair.moving_labels);
  r.dice = mean_dice(pair.fixed_labels, warped_labels);
  const SurfaceDistances sd = mean_surface_distances(pair.fixed_labels, warped_labels);
  r.hd95 = sd.hd95;
  r.assd = sd.assd;
  r.mse_before = mse(pair.fixed, pair.moving);
  r.mse = mse(pair.fixed, reg.warped);
  r.folding = jacobian_folding_fraction(reg.field);
  r.iterations = reg.iterations;
  r.trace = reg.trace;
  r.seconds = reg.seconds;
  return r;
}

struct Stat {
  double mean = 0.0, std = 0.0;
};

/// Mean and population standard deviation.
inline Stat stat_of(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"dice_before", "dice", "hd95", "assd", "mse_before", "mse", "folding"};
  return names;
}

inline double metric_value(const PairResult& p, const std::string& name) {
  if (name == "dice_before") return p.dice_before;
  if (name == "dice") return p.dice;
  if (name == "hd95") return p.hd95;
  if (name == "assd") return p.assd;
  if (name == "mse_before") return p.mse_before;
  if (name == "mse") return p.mse;
  if (name == "folding") return p.folding;
  throw ConfigError("unknown metric " + name);
}

struct EvalResult {
  std::vector<PairResult> pairs;  // sorted by id

  Stat summary(const std::string& metric) const {
    std::vector<double> v;
    for (const auto& p : pairs) v.push_back(metric_value(p, metric));
    return stat_of(v);
  }
  std::array<double, kPyramidLevels> mean_iterations() const {
    std::array<double, kPyramidLevels> m{};
    for (const auto& p : pairs)
      for (int l = 0; l < kPyramidLevels; ++l) m[l] += p.iterations[l];
    if (!pairs.empty())
      for (double& x : m) x /= static_cast<double>(pairs.size());
    return m;
  }
};

inline EvalResult evaluate(const TcipModel& model, const RunConfig& cfg, const std::vector<LoadedPair>& pairs) {
  EvalResult out;
  for (const auto& p : pairs) out.pairs.push_back(evaluate_pair(model, cfg, p));
  std::sort(out.pairs.begin(), out.pairs.end(), [](const PairResult& a, const PairResult& b) { return a.id < b.id; });
  return out;
}

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline Json trace_json(const std::vector<TraceRow>& trace) {
  Json rows = Json::array();
  for (const auto& t : trace)
    rows.push_back({{"layer", t.layer},
                    {"iteration", t.iteration},
                    {"score", t.score},
                    {"window_std", optional_json(t.window_std)},
                    {"delta", optional_json(t.delta)},
                    {"decision", to_string(t.decision)},
                    {"stage", t.stage ? Json(to_string(*t.stage)) : Json(nullptr)}});
  return rows;
}

/// Iteration counts as {"layer4": k, ..., "layer1": k}.
inline Json iterations_json(const std::array<int, kPyramidLevels>& it) {
  Json j = Json::object();
  for (int l = kPyramidLevels; l >= 1; --l) j["layer" + std::to_string(l)] = it[l - 1];
  return j;
}

/// Deterministic report: no wall-clock values.
inline Json eval_report_json(const EvalResult& r, const RunConfig& cfg, const std::string& command = "eval") {
  Json pairs = Json::array();
  for (const auto& p : r.pairs) {
    Json row{{"id", p.id}};
    for (const auto& m : metric_names()) row[m] = metric_value(p, m);
    row["iterations"] = iterations_json(p.iterations);
    row["trace"] = trace_json(p.trace);
    pairs.push_back(row);
  }
  Json summary = Json::object();
  for (const auto& m : metric_names()) {
    const Stat s = r.summary(m);
    summary[m] = {{"mean", s.mean}, {"std", s.std}};
  }
  const auto it = r.mean_iterations();
  Json mean_it = Json::object();
  for (int l = kPyramidLevels; l >= 1; --l) mean_it["layer" + std::to_string(l)] = it[l - 1];
  summary["iterations"] = mean_it;
  return Json{{"format", "tcip-report"},
              {"version", 1},
              {"command", command},
              {"seed", cfg.train.seed},
              {"config", config_echo(cfg)},
              {"pair_count", r.pairs.size()},
              {"pairs", pairs},
              {"summary", summary}};
}

inline Json timing_json(const EvalResult& r) {
  Json pairs = Json::array();
  std::vector<double> secs;
  for (const auto& p : r.pairs) {
    pairs.push_back({{"id", p.id}, {"seconds", p.seconds}});
    secs.push_back(p.seconds);
  }
  const Stat s = stat_of(secs);
  return Json{{"pairs", pairs}, {"seconds", {{"mean", s.mean}, {"std", s.std}}}};
}

namespace report_detail {

inline std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t width) {
  // Width counts code points so that UTF-8 marks line up.
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return s + std::string(width > n ? width - n : 0, ' ');
}

inline std::string render(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      std::size_t n = 0;
      for (unsigned char c : r[i]) n += (c & 0xC0) != 0x80;
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], n);
    }
  std::ostringstream os;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) os << (i ? "  " : "") << pad(rows[k][i], width[i]);
    os << "\n";
    if (k == 0) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i ? 2 : 0);
      os << std::string(total, '-') << "\n";
    }
  }
  return os.str();
}

}  // namespace report_detail

inline std::string eval_report_text(const EvalResult& r) {
  using report_detail::fmt;
  std::vector<std::vector<std::string>> rows{
      {"pair", "dice_before", "dice", "hd95", "assd", "mse_before", "mse", "folding", "iters L4/L3/L2/L1"}};
  auto iters = [](const std::array<int, kPyramidLevels>& it) {
    return std::to_string(it[3]) + "/" + std::to_string(it[2]) + "/" + std::to_string(it[1]) + "/" +
           std::to_string(it[0]);
  };
  for (const auto& p : r.pairs)
    rows.push_back({p.id, fmt(p.dice_before), fmt(p.dice), fmt(p.hd95), fmt(p.assd), fmt(p.mse_before, 6),
                    fmt(p.mse, 6), fmt(p.folding, 6), iters(p.iterations)});
  std::vector<std::string> summary{"mean±std"};
  for (const auto& m : metric_names()) {
    const Stat s = r.summary(m);
    const int prec = (m == "mse" || m == "mse_before" || m == "folding") ? 6 : 4;
    summary.push_back(fmt(s.mean, prec) + "±" + fmt(s.std, prec));
  }
  const auto it = r.mean_iterations();
  summary.push_back(fmt(it[3], 2) + "/" + fmt(it[2], 2) + "/" + fmt(it[1], 2) + "/" + fmt(it[0], 2));
  rows.push_back(summary);
  return report_detail::render(rows);
}

// ---------------------------------------------------------------------------
// Ablation grids

struct AblationCell {
  std::string label;
  Json factors;  // the treated settings of this cell
  RunConfig config;
};

inline const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> presets{"ferm", "tci-mode", "thresholds", "sim-metric", "window", "layers"};
  return presets;
}

inline std::vector<AblationCell> ablation_grid(const std::string& preset, const RunConfig& base) {
  std::vector<AblationCell> cells;
  auto add = [&](std::string label, Json factors, RunConfig c) {
    c.validate();
    cells.push_back({std::move(label), std::move(factors), std::move(c)});
  };
  const double ds_values[] = {0.01, 0.005, 0.001};
  const double dc_values[] = {0.01, 0.005};

  if (preset == "ferm") {
    for (bool ffb : {false, true})
      for (bool seb : {false, true}) {
        RunConfig c = base;
        c.ferm.use_ffb = ffb;
        c.ferm.use_seb = seb;
        add(std::string(ffb ? "FFB" : "-") + "/" + (seb ? "SEB" : "-"), {{"use_ffb", ffb}, {"use_seb", seb}}, c);
      }
  } else if (preset == "tci-mode") {
    const TciMode modes[] = {TciMode::ConvOnly, TciMode::StabOnly, TciMode::ConvThenStab, TciMode::StabThenConv};
    for (int i = 0; i < 4; ++i) {
      RunConfig c = base;
      c.tci.mode = modes[i];
      add("TCI-" + std::to_string(i + 1), {{"mode", to_string(modes[i])}}, c);
    }
  } else if (preset == "thresholds") {
    for (double ds : ds_values)
      for (double dc : dc_values) {
        RunConfig c = base;
        c.tci.delta_s = ds;
        c.tci.delta_c = dc;
        add("ds=" + report_detail::fmt(ds, 3) + " dc=" + report_detail::fmt(dc, 3), {{"delta_s", ds}, {"delta_c", dc}},
            c);
      }
  } else if (preset == "sim-metric") {
    for (SimilarityMetric m : {SimilarityMetric::Mae, SimilarityMetric::Mse, SimilarityMetric::Ncc})
      for (double ds : ds_values)
        for (double dc : dc_values) {
          RunConfig c = base;
          c.tci.metric = m;
          c.tci.delta_s = ds;
          c.tci.delta_c = dc;
          add(std::string(to_string(m)) + " ds=" + report_detail::fmt(ds, 3) + " dc=" + report_detail::fmt(dc, 3),
              {{"metric", to_string(m)}, {"delta_s", ds}, {"delta_c", dc}}, c);
        }
  } else if (preset == "window") {
    for (int t : {3, 4, 5}) {
      RunConfig c = base;
      c.tci.window = t;
      add("t=" + std::to_string(t), {{"window", t}}, c);
    }
  } else if (preset == "layers") {
    // Rows list which of layers 4,3,2,1 iterate under TCI.
    const std::array<std::array<bool, 4>, 8> masks{{{false, false, false, false},
                                                    {true, false, false, false},
                                                    {false, true, false, false},
                                                    {false, false, true, false},
                                                    {false, false, false, true},
                                                    {true, true, false, false},
                                                    {true, true, true, false},
                                                    {true, true, true, true}}};
    for (const auto& m : masks) {
      RunConfig c = base;
      std::string label;
      Json on = Json::array();
      for (int i = 0; i < 4; ++i) {
        const int level = 4 - i;
        c.tci.layer_enabled[static_cast<std::size_t>(level - 1)] = m[i];
        if (m[i]) {
          label += (label.empty() ? "L" : "+L") + std::to_string(level);
          on.push_back(level);
        }
      }
      add(label.empty() ? "none" : label, {{"tci_layers", on}}, c);
    }
  } else {
    throw ConfigError("unknown ablation preset '" + preset + "'");
  }
  return cells;
}

struct AblationSeedResult {
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  EvalResult eval;
};

struct AblationRow {
  AblationCell cell;
  std::vector<AblationSeedResult> runs;

  Stat over_seeds(const std::string& metric) const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.eval.summary(metric).mean);
    return stat_of(v);
  }
};

struct AblationResult {
  std::string preset;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
};

using CellCallback = std::function<void(const AblationCell&, std::uint64_t seed, const EvalResult&)>;

/// Trains and evaluates every cell once per seed on the same pairs.
inline AblationResult run_ablation(const std::string& preset, const RunConfig& base, const std::vector<LoadedPair>& pairs,
                                   const std::vector<std::uint64_t>& seeds, const CellCallback& on_cell = {}) {
  if (seeds.empty()) throw ConfigError("ablate: at least one seed is required");
  AblationResult out{preset, seeds, {}};
  for (const auto& cell : ablation_grid(preset, base)) {
    AblationRow row{cell, {}};
    for (std::uint64_t seed : seeds) {
      RunConfig c = cell.config;
      c.train.seed = seed;
      TrainResult t = train(c, pairs);
      AblationSeedResult r{seed, t.curve.empty() ? 0.0 : t.curve.back().total, evaluate(t.model, c, pairs)};
      if (on_cell) on_cell(cell, seed, r.eval);
      row.runs.push_back(std::move(r));
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline Json ablation_json(const AblationResult& a, const RunConfig& base) {
  const std::vector<std::string> metrics{"dice", "hd95", "assd", "mse", "folding"};
  Json rows = Json::array();
  for (const auto& row : a.rows) {
    Json r{{"label", row.cell.label}, {"factors", row.cell.factors}};
    for (const auto& m : metrics) {
      const Stat s = row.over_seeds(m);
      r[m] = {{"mean", s.mean}, {"std", s.std}};
    }
    std::array<double, kPyramidLevels> it{};
    for (const auto& run : row.runs) {
      const auto m = run.eval.mean_iterations();
      for (int l = 0; l < kPyramidLevels; ++l) it[l] += m[l] / static_cast<double>(row.runs.size());
    }
    Json mean_it = Json::object();
    for (int l = kPyramidLevels; l >= 1; --l) mean_it["layer" + std::to_string(l)] = it[l - 1];
    r["iterations"] = mean_it;
    Json per_seed = Json::array();
    for (const auto& run : row.runs) {
      Json s{{"seed", run.seed}, {"final_loss", run.final_loss}};
      for (const auto& m : metrics) s[m] = run.eval.summary(m).mean;
      per_seed.push_back(s);
    }
    r["per_seed"] = per_seed;
    rows.push_back(r);
  }
  return Json{{"format", "tcip-ablation"},
              {"version", 1},
              {"preset", a.preset},
              {"seeds", a.seeds},
              {"config", config_echo(base)},
              {"rows", rows}};
}

inline std::string ablation_text(const AblationResult& a) {
  using report_detail::fmt;
  std::vector<std::string> header;
  if (a.preset == "ferm") header = {"FFB", "SEB"};
  else if (a.preset == "tci-mode") header = {"variant", "mode"};
  else if (a.preset == "layers") header = {"L4", "L3", "L2", "L1"};
  else header = {"cell"};
  for (const char* h : {"dice", "hd95", "assd", "mse", "folding", "iters L4/L3/L2/L1"}) header.push_back(h);

  std::vector<std::vector<std::string>> rows{header};
  const char* yes = "✓";
  const char* no = "✗";
  for (const auto& row : a.rows) {
    std::vector<std::string> r;
    const Json& f = row.cell.factors;
    if (a.preset == "ferm") {
      r = {f["use_ffb"].get<bool>() ? yes : no, f["use_seb"].get<bool>() ? yes : no};
    } else if (a.preset == "tci-mode") {
      r = {row.cell.label, f["mode"].get<std::string>()};
    } else if (a.preset == "layers") {
      for (int level = 4; level >= 1; --level) {
        bool on = false;
        for (const auto& l : f["tci_layers"]) on = on || l.get<int>() == level;
        r.push_back(on ? yes : no);
      }
    } else {
      r = {row.cell.label};
    }
    const Stat d = row.over_seeds("dice");
    r.push_back(fmt(d.mean) + (a.seeds.size() > 1 ? "±" + fmt(d.std) : ""));
    r.push_back(fmt(row.over_seeds("hd95").mean));
    r.push_back(fmt(row.over_seeds("assd").mean));
    r.push_back(fmt(row.over_seeds("mse").mean, 6));
    r.push_back(fmt(row.over_seeds("folding").mean, 6));
    std::array<double, kPyramidLevels> it{};
    for (const auto& run : row.runs) {
      const auto m = run.eval.mean_iterations();
      for (int l = 0; l < kPyramidLevels; ++l) it[l] += m[l] / static_cast<double>(row.runs.size());
    }
    r.push_back(fmt(it[3], 2) + "/" + fmt(it[2], 2) + "/" + fmt(it[1], 2) + "/" + fmt(it[0], 2));
    rows.push_back(r);
  }
  std::string out = "ablation preset: " + a.preset + " (" + std::to_string(a.seeds.size()) + " seed(s))\n\n" +
                    report_detail::render(rows);

  if (a.preset == "thresholds") {
    // Dice as a delta_s x delta_c matrix.
    std::vector<std::vector<std::string>> m{{"ds \\ dc", "0.010", "0.005"}};
    for (std::size_t i = 0; i + 1 < a.rows.size(); i += 2)
      m.push_back({fmt(a.rows[i].cell.factors["delta_s"].get<double>(), 3), fmt(a.rows[i].over_seeds("dice").mean),
                   fmt(a.rows[i + 1].over_seeds("dice").mean)});
    out += "\nmean Dice by threshold\n\n" + report_detail::render(m);
  }
  return out;
}

}  // namespace tcip

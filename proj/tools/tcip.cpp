// tcip command-line interface: synth, train, register, eval, ablate.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
// 4 numeric failure, 5 shape mismatch, 1 anything else. Failures print one
// JSON object on stderr: {"error": {"kind": ..., "message": ..., ...}}.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tcip/config.hpp"
#include "tcip/dataset.hpp"
#include "tcip/trainer.hpp"
#include "tcip/volume_io.hpp"

namespace fs = std::filesystem;
using namespace tcip;

namespace {

constexpr const char* kOutputRootEnv = "TCIP_OUTPUT_ROOT";

/// Collects per-field flags; each applies to a RunConfig only when given.
class Overrides {
 public:
  template <class T>
  void add(CLI::App* app, const std::string& flag, const std::string& desc, std::function<void(RunConfig&, const T&)> set) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, desc);
    if (group_.size()) opt->group(group_);
    appliers_.push_back([opt, value, set](RunConfig& c) {
      if (opt->count()) set(c, *value);
    });
  }

  void group(std::string g) { group_ = std::move(g); }

  void apply(RunConfig& c) const {
    for (const auto& f : appliers_) f(c);
  }

 private:
  std::string group_;
  std::vector<std::function<void(RunConfig&)>> appliers_;
};

std::array<bool, 4> parse_layers(const std::string& s) {
  std::array<bool, 4> on{false, false, false, false};
  if (s == "none") return on;
  if (s == "all") return {true, true, true, true};
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.size() != 1 || tok[0] < '1' || tok[0] > '4')
      throw ConfigError("--tci-layers expects a comma list of levels 1-4, 'all' or 'none', got '" + s + "'");
    on[static_cast<std::size_t>(tok[0] - '1')] = true;
  }
  return on;
}

void add_model_flags(CLI::App* app, Overrides& o) {
  o.group("Model");
  o.add<std::vector<Index>>(app, "--channels", "Encoder channels for levels 1..4", [](RunConfig& c, const auto& v) {
    if (v.size() != 4) throw ConfigError("--channels expects 4 values");
    std::copy(v.begin(), v.end(), c.encoder.channels.begin());
  });
  o.add<Index>(app, "--reduction", "Channel-attention reduction ratio r", [](RunConfig& c, const Index& v) { c.ferm.reduction = v; });
  o.add<bool>(app, "--use-ffb", "Feature fusion block on/off", [](RunConfig& c, const bool& v) { c.ferm.use_ffb = v; });
  o.add<bool>(app, "--use-seb", "Channel attention block on/off", [](RunConfig& c, const bool& v) { c.ferm.use_seb = v; });
}

void add_tci_flags(CLI::App* app, Overrides& o) {
  o.group("Iteration control");
  o.add<std::string>(app, "--tci-mode", "CONV_ONLY|STAB_ONLY|CONV_THEN_STAB|STAB_THEN_CONV (or TCI-1..4)",
                     [](RunConfig& c, const std::string& v) { c.tci.mode = parse_tci_mode(v); });
  o.add<std::string>(app, "--sim-metric", "NCC|MAE|MSE",
                     [](RunConfig& c, const std::string& v) { c.tci.metric = parse_similarity_metric(v); });
  o.add<double>(app, "--delta-s", "Stability threshold", [](RunConfig& c, const double& v) { c.tci.delta_s = v; });
  o.add<double>(app, "--delta-c", "Convergence threshold", [](RunConfig& c, const double& v) { c.tci.delta_c = v; });
  o.add<int>(app, "--window", "Sliding window size t", [](RunConfig& c, const int& v) { c.tci.window = v; });
  o.add<int>(app, "--k-max", "Maximum iterations per layer", [](RunConfig& c, const int& v) { c.tci.k_max = v; });
  o.add<std::string>(app, "--tci-layers", "Levels that iterate, e.g. 4,3 or all or none",
                     [](RunConfig& c, const std::string& v) { c.tci.layer_enabled = parse_layers(v); });
  o.add<bool>(app, "--return-best", "Return the best field of the final window", [](RunConfig& c, const bool& v) { c.return_best = v; });
}

void add_loss_flags(CLI::App* app, Overrides& o) {
  o.group("Loss");
  o.add<Index>(app, "--patch", "Local NCC window edge n", [](RunConfig& c, const Index& v) { c.loss.patch = v; });
  o.add<double>(app, "--lambda", "Smoothness weight", [](RunConfig& c, const double& v) { c.loss.lambda = v; });
  o.add<double>(app, "--epsilon", "NCC stabiliser", [](RunConfig& c, const double& v) { c.loss.epsilon = v; });
}

void add_train_flags(CLI::App* app, Overrides& o) {
  o.group("Training");
  o.add<double>(app, "--lr", "Adam learning rate", [](RunConfig& c, const double& v) { c.train.lr = v; });
  o.add<int>(app, "--steps", "Optimisation steps", [](RunConfig& c, const int& v) { c.train.steps = v; });
  o.add<std::uint64_t>(app, "--seed", "Parameter initialisation seed", [](RunConfig& c, const std::uint64_t& v) { c.train.seed = v; });
  o.add<bool>(app, "--detach-iterations", "Cut the graph between iterations of a layer",
              [](RunConfig& c, const bool& v) { c.train.detach_iterations = v; });
}

void add_data_flags(CLI::App* app, Overrides& o) {
  o.group("Synthetic data");
  o.add<int>(app, "--pairs", "Number of pairs", [](RunConfig& c, const int& v) { c.synth_pairs = v; });
  o.add<Index>(app, "--grid", "Grid edge length", [](RunConfig& c, const Index& v) { c.synth.grid_size = v; });
  o.add<int>(app, "--blobs", "Blobs per volume", [](RunConfig& c, const int& v) { c.synth.num_blobs = v; });
  o.add<double>(app, "--radius-min", "Smallest blob radius", [](RunConfig& c, const double& v) { c.synth.blob_radius_min = v; });
  o.add<double>(app, "--radius-max", "Largest blob radius", [](RunConfig& c, const double& v) { c.synth.blob_radius_max = v; });
  o.add<double>(app, "--amplitude", "Maximum displacement in voxels", [](RunConfig& c, const double& v) { c.synth.deform_amplitude = v; });
  o.add<double>(app, "--smoothness", "Gaussian sigma of the random field", [](RunConfig& c, const double& v) { c.synth.deform_smoothness = v; });
  o.add<std::uint64_t>(app, "--data-seed", "Seed of the first pair", [](RunConfig& c, const std::uint64_t& v) { c.synth.seed = v; });
}

std::string resolve_out(const std::string& requested, const std::string& from_config, const std::string& fallback) {
  std::string out = !requested.empty() ? requested : !from_config.empty() ? from_config : fallback;
  fs::path p(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) p = fs::path(root) / p;
  }
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError(IoErrorKind::Unwritable, p.string(), "cannot create output directory");
  return p.string();
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "cannot open for writing");
  out << text;
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "write failed");
}

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

/// Dataset from --dataset, else the config's dataset, else generated in memory.
std::vector<LoadedPair> dataset_pairs(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) return load_pairs(load_manifest(cfg.dataset));
  return synth_pairs(cfg.synth, cfg.synth_pairs);
}

/// Checkpoint config overlaid with an optional config file; the architecture
/// must stay as trained.
RunConfig overlay_config(const RunConfig& trained, const std::string& path) {
  if (path.empty()) return trained;
  RunConfig c = from_json(read_json_file(path), trained);
  if (c.encoder.channels != trained.encoder.channels || c.ferm.reduction != trained.ferm.reduction ||
      c.ferm.use_ffb != trained.ferm.use_ffb || c.ferm.use_seb != trained.ferm.use_seb)
    throw ConfigError("config changes the model architecture stored in the checkpoint");
  return c;
}

void print_iterations(const std::array<int, kPyramidLevels>& it) {
  std::printf("iterations L4/L3/L2/L1: %d/%d/%d/%d\n", it[3], it[2], it[1], it[0]);
}

struct ErrorInfo {
  int code;
  std::string kind;
};

int report_error(const ErrorInfo& info, const std::string& message, Json extra = Json::object()) {
  Json e{{"kind", info.kind}, {"message", message}};
  for (auto& [k, v] : extra.items()) e[k] = v;
  std::cerr << Json{{"error", e}}.dump() << std::endl;
  return info.code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformable 3D registration with a feature pyramid and threshold-controlled iteration"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path, out_dir, dataset_dir, checkpoint_path;

  // synth
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  Overrides synth_o;
  synth->add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", out_dir, "Dataset directory (relative paths resolve under $TCIP_OUTPUT_ROOT)");
  add_data_flags(synth, synth_o);

  // train
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  Overrides train_o;
  train_cmd->add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  train_cmd->add_option("--dataset", dataset_dir, "Dataset directory or manifest (default: synthesise in memory)");
  train_cmd->add_option("--out", out_dir, "Output directory");
  add_model_flags(train_cmd, train_o);
  add_tci_flags(train_cmd, train_o);
  add_loss_flags(train_cmd, train_o);
  add_train_flags(train_cmd, train_o);
  add_data_flags(train_cmd, train_o);
  bool quiet = false;
  train_cmd->add_flag("--quiet", quiet, "Do not print per-step progress");

  // register
  CLI::App* reg = app.add_subcommand("register", "Register one moving volume to a fixed volume");
  Overrides reg_o;
  std::string fixed_path, moving_path, fixed_labels_path, moving_labels_path;
  reg->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  reg->add_option("--fixed", fixed_path, "Fixed volume (.json sidecar)")->required();
  reg->add_option("--moving", moving_path, "Moving volume (.json sidecar)")->required();
  reg->add_option("--moving-labels", moving_labels_path, "Moving labels to warp");
  reg->add_option("--fixed-labels", fixed_labels_path, "Fixed labels for scoring the warped labels");
  reg->add_option("--config", config_path, "Configuration overlay (iteration control and loss only)")->check(CLI::ExistingFile);
  reg->add_option("--out", out_dir, "Output directory");
  add_tci_flags(reg, reg_o);
  add_loss_flags(reg, reg_o);

  // eval
  CLI::App* eval_cmd = app.add_subcommand("eval", "Register every pair of a dataset and report metrics");
  Overrides eval_o;
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dataset", dataset_dir, "Dataset directory or manifest")->required();
  eval_cmd->add_option("--config", config_path, "Configuration overlay (iteration control and loss only)")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", out_dir, "Output directory");
  add_tci_flags(eval_cmd, eval_o);
  add_loss_flags(eval_cmd, eval_o);

  // ablate
  CLI::App* ablate = app.add_subcommand("ablate", "Train and evaluate an ablation grid");
  Overrides ablate_o;
  std::string preset;
  std::vector<std::uint64_t> seeds;
  ablate->add_option("--preset", preset, "Grid to run")->required()->check(CLI::IsMember(ablation_presets()));
  ablate->add_option("--seeds", seeds, "Initialisation seeds averaged per cell (default: the config seed)");
  ablate->add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  ablate->add_option("--dataset", dataset_dir, "Dataset directory or manifest (default: synthesise in memory)");
  ablate->add_option("--out", out_dir, "Output directory");
  add_model_flags(ablate, ablate_o);
  add_tci_flags(ablate, ablate_o);
  add_loss_flags(ablate, ablate_o);
  add_train_flags(ablate, ablate_o);
  add_data_flags(ablate, ablate_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error({2, "usage"}, e.what());
  }

  try {
    if (synth->parsed()) {
      RunConfig cfg = base_config(config_path);
      synth_o.apply(cfg);
      cfg.validate();
      const std::string dir = resolve_out(out_dir, cfg.output_dir, "dataset");
      const Manifest m = write_synth_dataset(dir, cfg.synth, cfg.synth_pairs);
      std::printf("wrote %zu pair(s) to %s\n", m.pairs.size(), dir.c_str());
    } else if (train_cmd->parsed()) {
      RunConfig cfg = base_config(config_path);
      train_o.apply(cfg);
      if (!dataset_dir.empty()) cfg.dataset = dataset_dir;
      cfg.validate();
      const auto pairs = dataset_pairs(cfg);
      const std::string dir = resolve_out(out_dir, cfg.output_dir, "train");
      cfg.output_dir = dir;
      std::printf("training %d step(s) on %zu pair(s), %lld parameters\n", cfg.train.steps, pairs.size(),
                  static_cast<long long>(make_model(cfg.encoder, cfg.ferm, 0).params.parameter_count()));
      const int every = std::max(1, cfg.train.steps / 20);
      TrainResult r = train(cfg, pairs, [&](const StepRecord& s) {
        if (!quiet && (s.step % every == 0 || s.step + 1 == cfg.train.steps))
          std::printf("step %4d  loss %.4f  ncc %.4f  smooth %.4f  iters %d/%d/%d/%d\n", s.step, s.total, s.ncc,
                      s.smooth, s.iterations[3], s.iterations[2], s.iterations[1], s.iterations[0]);
        std::fflush(stdout);
      });
      save_checkpoint(join(dir, "checkpoint.json"), r.model, cfg);
      write_json_file(join(dir, "train_report.json"), train_report_json(r, cfg));
      write_json_file(join(dir, "timing.json"), Json{{"train_seconds", r.seconds}});
      std::printf("checkpoint written to %s\n", join(dir, "checkpoint.json").c_str());
    } else if (reg->parsed()) {
      Checkpoint ck = load_checkpoint(checkpoint_path);
      RunConfig cfg = overlay_config(ck.config, config_path);
      reg_o.apply(cfg);
      cfg.validate();
      const std::string dir = resolve_out(out_dir, "", "register");
      const Volume fixed = load_volume(fixed_path);
      const Volume moving = load_volume(moving_path);
      const VolumeRegistration r = register_volumes(ck.model, fixed, moving, cfg.layer_options());
      save_field(join(dir, "field"), r.field, fixed.spacing);
      save_volume(join(dir, "warped"), r.warped);
      Json trace{{"format", "tcip-trace"},
                 {"version", 1},
                 {"iterations", iterations_json(r.iterations)},
                 {"folding", jacobian_folding_fraction(r.field)},
                 {"mse_before", mse(fixed, moving)},
                 {"mse", mse(fixed, r.warped)},
                 {"trace", trace_json(r.trace)}};
      if (!moving_labels_path.empty()) {
        const LabelVolume ml = load_labels(moving_labels_path);
        if (!(ml.dims == moving.dims)) throw ShapeError("moving labels grid " + ml.dims.str() + " differs from moving " + moving.dims.str());
        const LabelVolume wl = warp_labels(ml, r.field);
        save_labels(join(dir, "warped_labels"), wl);
        if (!fixed_labels_path.empty()) {
          const LabelVolume fl = load_labels(fixed_labels_path);
          if (!(fl.dims == fixed.dims)) throw ShapeError("fixed labels grid " + fl.dims.str() + " differs from fixed " + fixed.dims.str());
          trace["dice_before"] = mean_dice(fl, ml);
          trace["dice"] = mean_dice(fl, wl);
        }
      }
      write_json_file(join(dir, "trace.json"), trace);
      write_json_file(join(dir, "timing.json"), Json{{"seconds", r.seconds}});
      print_iterations(r.iterations);
      std::printf("outputs written to %s\n", dir.c_str());
    } else if (eval_cmd->parsed()) {
      Checkpoint ck = load_checkpoint(checkpoint_path);
      RunConfig cfg = overlay_config(ck.config, config_path);
      eval_o.apply(cfg);
      cfg.dataset = dataset_dir;
      cfg.validate();
      const auto pairs = load_pairs(load_manifest(dataset_dir));
      const std::string dir = resolve_out(out_dir, "", "eval");
      const EvalResult r = evaluate(ck.model, cfg, pairs);
      write_json_file(join(dir, "report.json"), eval_report_json(r, cfg));
      const std::string table = eval_report_text(r);
      write_text(join(dir, "report.txt"), table);
      write_json_file(join(dir, "timing.json"), timing_json(r));
      std::fputs(table.c_str(), stdout);
    } else if (ablate->parsed()) {
      RunConfig cfg = base_config(config_path);
      ablate_o.apply(cfg);
      if (!dataset_dir.empty()) cfg.dataset = dataset_dir;
      cfg.validate();
      if (seeds.empty()) seeds.push_back(cfg.train.seed);
      const auto pairs = dataset_pairs(cfg);
      const std::string dir = resolve_out(out_dir, cfg.output_dir, "ablate");
      const AblationResult r = run_ablation(preset, cfg, pairs, seeds, [](const AblationCell& c, std::uint64_t seed, const EvalResult& e) {
        std::printf("cell %-24s seed %llu  dice %.4f\n", c.label.c_str(), static_cast<unsigned long long>(seed),
                    e.summary("dice").mean);
        std::fflush(stdout);
      });
      write_json_file(join(dir, "ablation.json"), ablation_json(r, cfg));
      const std::string table = ablation_text(r);
      write_text(join(dir, "ablation.txt"), table);
      std::fputs(table.c_str(), stdout);
    }
  } catch (const IoError& e) {
    return report_error({3, std::string("io/") + to_string(e.kind())}, e.what(), Json{{"path", e.path()}});
  } catch (const ConfigError& e) {
    return report_error({2, "config"}, e.what());
  } catch (const NumericError& e) {
    return report_error({4, "numeric"}, e.what());
  } catch (const ShapeError& e) {
    return report_error({5, "shape"}, e.what());
  } catch (const std::exception& e) {
    return report_error({1, "internal"}, e.what());
  }
  return 0;
}

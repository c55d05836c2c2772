#pragma once

// Threshold-controlled iteration: a per-layer stopping policy driven by a
// sliding window of registration similarity scores.
//
// Stage "stability": population std of the window <= delta_s.
// Stage "convergence": current - previous score <= delta_c.
// Nothing can stop before the window holds t scores, and the window only holds
// scores from earlier iterations, so the earliest stop is iteration t + 1.

#include <array>
#include <cmath>
#include <deque>
#include <optional>
#include <string>

#include "tcip/error.hpp"
#include "tcip/losses.hpp"

namespace tcip {

enum class TciMode { ConvOnly, StabOnly, ConvThenStab, StabThenConv };
enum class SimilarityMetric { Ncc, Mae, Mse };
enum class StopStage { Stability, Convergence };

inline const char* to_string(TciMode m) {
  switch (m) {
    case TciMode::ConvOnly: return "CONV_ONLY";
    case TciMode::StabOnly: return "STAB_ONLY";
    case TciMode::ConvThenStab: return "CONV_THEN_STAB";
    case TciMode::StabThenConv: return "STAB_THEN_CONV";
  }
  return "?";
}

inline TciMode parse_tci_mode(const std::string& s) {
  if (s == "CONV_ONLY" || s == "TCI-1") return TciMode::ConvOnly;
  if (s == "STAB_ONLY" || s == "TCI-2") return TciMode::StabOnly;
  if (s == "CONV_THEN_STAB" || s == "TCI-3") return TciMode::ConvThenStab;
  if (s == "STAB_THEN_CONV" || s == "TCI-4") return TciMode::StabThenConv;
  throw ConfigError("unknown TCI mode: " + s);
}

inline const char* to_string(SimilarityMetric m) {
  switch (m) {
    case SimilarityMetric::Ncc: return "NCC";
    case SimilarityMetric::Mae: return "MAE";
    case SimilarityMetric::Mse: return "MSE";
  }
  return "?";
}

inline SimilarityMetric parse_similarity_metric(const std::string& s) {
  if (s == "NCC") return SimilarityMetric::Ncc;
  if (s == "MAE") return SimilarityMetric::Mae;
  if (s == "MSE") return SimilarityMetric::Mse;
  throw ConfigError("unknown similarity metric: " + s);
}

inline const char* to_string(StopStage s) { return s == StopStage::Stability ? "stability" : "convergence"; }

struct TciConfig {
  double delta_s = 0.005;
  double delta_c = 0.005;
  int window = 3;
  int k_max = 10;
  TciMode mode = TciMode::StabThenConv;
  SimilarityMetric metric = SimilarityMetric::Ncc;
  /// Indexed by level - 1. A disabled layer runs exactly one iteration.
  std::array<bool, 4> layer_enabled{true, true, true, true};

  void validate() const {
    if (window < 2) throw ConfigError("tci: window size must be >= 2");
    if (k_max < 1) throw ConfigError("tci: k_max must be >= 1");
    if (delta_s < 0.0 || delta_c < 0.0) throw ConfigError("tci: thresholds must be >= 0");
  }
};

/// Most recent scores, oldest first, capped at `capacity`.
class TciWindow {
 public:
  explicit TciWindow(int capacity = 3) : capacity_(capacity) {}

  void push(double score) {
    scores_.push_back(score);
    if (static_cast<int>(scores_.size()) > capacity_) scores_.pop_front();
  }

  std::size_t size() const { return scores_.size(); }
  int capacity() const { return capacity_; }
  const std::deque<double>& scores() const { return scores_; }
  std::optional<double> last() const {
    if (scores_.empty()) return std::nullopt;
    return scores_.back();
  }

  /// Population standard deviation.
  double stddev() const {
    if (scores_.empty()) return 0.0;
    double mean = 0.0;
    for (double s : scores_) mean += s;
    mean /= static_cast<double>(scores_.size());
    double var = 0.0;
    for (double s : scores_) var += (s - mean) * (s - mean);
    return std::sqrt(var / static_cast<double>(scores_.size()));
  }

 private:
  int capacity_;
  std::deque<double> scores_;
};

inline TciWindow push(TciWindow window, double score) {
  window.push(score);
  return window;
}

struct StopCheck {
  bool stop = false;
  std::optional<StopStage> stage;
  std::optional<double> window_std;
  std::optional<double> delta;
};

/// Consults the controller for the current score before it enters the window.
inline StopCheck should_stop(const TciWindow& window, double current, std::optional<double> previous,
                             const TciConfig& cfg) {
  StopCheck r;
  if (static_cast<int>(window.size()) < cfg.window || !previous) return r;

  auto stable = [&] {
    r.window_std = window.stddev();
    return *r.window_std <= cfg.delta_s;
  };
  auto converged = [&] {
    r.delta = current - *previous;
    return *r.delta <= cfg.delta_c;
  };

  switch (cfg.mode) {
    case TciMode::ConvOnly:
      if (converged()) r.stage = StopStage::Convergence;
      break;
    case TciMode::StabOnly:
      if (stable()) r.stage = StopStage::Stability;
      break;
    case TciMode::ConvThenStab:
      if (converged() && stable()) r.stage = StopStage::Stability;
      break;
    case TciMode::StabThenConv:
      if (stable() && converged()) r.stage = StopStage::Convergence;
      break;
  }
  r.stop = r.stage.has_value();
  return r;
}

enum class DecisionKind { Continue, Stop, IterationCap, SingleIteration };

inline const char* to_string(DecisionKind k) {
  switch (k) {
    case DecisionKind::Continue: return "continue";
    case DecisionKind::Stop: return "stop";
    case DecisionKind::IterationCap: return "cap";
    case DecisionKind::SingleIteration: return "single";
  }
  return "?";
}

struct Decision {
  int iteration = 0;
  DecisionKind kind = DecisionKind::Continue;
  std::optional<StopStage> stage;
  std::optional<double> window_std;
  std::optional<double> delta;

  bool terminal() const { return kind != DecisionKind::Continue; }
};

/// Per-layer iteration controller: one call to observe() per iteration.
class TciController {
 public:
  TciController(const TciConfig& cfg, bool enabled) : cfg_(cfg), enabled_(enabled), window_(cfg.window) {
    cfg_.validate();
  }

  Decision observe(double score) {
    Decision d;
    d.iteration = ++iteration_;
    if (!enabled_) {
      d.kind = DecisionKind::SingleIteration;
      return d;
    }
    const StopCheck check = should_stop(window_, score, window_.last(), cfg_);
    d.window_std = check.window_std;
    d.delta = check.delta;
    if (check.stop) {
      d.kind = DecisionKind::Stop;
      d.stage = check.stage;
      return d;
    }
    window_.push(score);
    if (iteration_ >= cfg_.k_max) d.kind = DecisionKind::IterationCap;
    return d;
  }

  int iteration() const { return iteration_; }
  const TciWindow& window() const { return window_; }

 private:
  TciConfig cfg_;
  bool enabled_;
  TciWindow window_;
  int iteration_ = 0;
};

/// Larger is more similar for every metric. NCC is the mean per-voxel local
/// correlation; MAE and MSE are negated errors.
inline double similarity(const Tensor& fixed, const Tensor& warped, SimilarityMetric metric, Index patch = 9,
                         double epsilon = 1e-5) {
  require_same_shape(fixed, warped, "similarity");
  NoGradGuard guard;
  const auto f = fixed.data();
  const auto w = warped.data();
  const double n = static_cast<double>(f.size());
  switch (metric) {
    case SimilarityMetric::Ncc: {
      Tensor cc = local_ncc_map(fixed.detach(), warped.detach(), patch, epsilon);
      double acc = 0.0;
      for (double v : cc.data()) acc += v;
      return acc / n;
    }
    case SimilarityMetric::Mae: {
      double acc = 0.0;
      for (std::size_t i = 0; i < f.size(); ++i) acc += std::abs(f[i] - w[i]);
      return -acc / n;
    }
    case SimilarityMetric::Mse: {
      double acc = 0.0;
      for (std::size_t i = 0; i < f.size(); ++i) acc += (f[i] - w[i]) * (f[i] - w[i]);
      return -acc / n;
    }
  }
  return 0.0;
}

}  // namespace tcip

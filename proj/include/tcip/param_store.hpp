#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tcip/error.hpp"
#include "tcip/tensor.hpp"

namespace tcip {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named trainable tensors plus their Adam moments.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
  };

  /// Registers a parameter; paths must be unique.
  Tensor& add(const std::string& path, const Shape& shape, double fill = 0.0) {
    if (entries_.count(path)) throw ConfigError("duplicate parameter path: " + path);
    Entry e;
    e.value = Tensor(shape, fill, true);
    e.m.assign(static_cast<std::size_t>(shape.numel()), 0.0);
    e.v.assign(e.m.size(), 0.0);
    return entries_.emplace(path, std::move(e)).first->second.value;
  }

  /// Registers a parameter with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) entries.
  Tensor& add_uniform(const std::string& path, const Shape& shape, Index fan_in, std::mt19937_64& rng) {
    Tensor& t = add(path, shape);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : t.mutable_data()) x = dist(rng);
    return t;
  }

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }

  const Tensor& get(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ConfigError("unknown parameter path: " + path);
    return it->second.value;
  }
  Tensor& get(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ConfigError("unknown parameter path: " + path);
    return it->second.value;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  std::size_t size() const { return entries_.size(); }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& [_, e] : entries_) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.value.zero_grad();
  }

 private:
  std::map<std::string, Entry> entries_;
};

/// One bias-corrected Adam update of every parameter in the store.
inline void adam_step(ParamStore& store, const AdamOptions& opt) {
  for (const auto& [path, e] : store.entries())
    if (!e.value.has_grad()) throw ConfigError("adam_step: parameter has no gradient: " + path);

  for (auto& [path, e] : store.entries()) {
    ++e.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(e.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(e.step));
    auto g = e.value.grad();
    auto p = e.value.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      e.m[i] = opt.beta1 * e.m[i] + (1.0 - opt.beta1) * g[i];
      e.v[i] = opt.beta2 * e.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double m_hat = e.m[i] / c1;
      const double v_hat = e.v[i] / c2;
      p[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
  }
}

}  // namespace tcip

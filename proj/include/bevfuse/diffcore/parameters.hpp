#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "bevfuse/diffcore/tensor.hpp"

namespace bevfuse::diff {

/// FNV-1a; used to derive per-parameter RNG streams from names.
inline std::uint64_t hash_name(std::string_view s, std::uint64_t seed = 0) {
  std::uint64_t h = 1469598103934665603ull ^ (seed * 0x9E3779B97F4A7C15ull);
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

enum class Init { kFanInUniform, kZeros, kOnes };

/// Named learnable tensors. Iteration order is lexicographic by name, so
/// optimizer updates and checkpoints are independent of registration order.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Registers `name` if absent. Fan-in uniform draws U(-1/sqrt(fan_in),
  /// 1/sqrt(fan_in)) from a stream keyed by (seed, name).
  const Tensor& add(const std::string& name, Shape shape, Init init,
                    std::size_t fan_in = 1) {
    auto it = params_.find(name);
    if (it != params_.end()) {
      if (it->second.shape() != shape) {
        throw ShapeError("parameter '" + name + "' re-registered with shape " +
                         shape_str(shape) + ", existing " +
                         shape_str(it->second.shape()));
      }
      return it->second;
    }
    Tensor t(std::move(shape));
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        t.fill(1.0);
        break;
      case Init::kFanInUniform: {
        std::mt19937_64 rng(hash_name(name, seed_));
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : t.values()) v = dist(rng);
        break;
      }
    }
    return params_.emplace(name, std::move(t)).first->second;
  }

  bool contains(const std::string& name) const {
    return params_.count(name) != 0;
  }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw std::out_of_range("unknown parameter '" + name + "'");
    }
    return it->second;
  }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw std::out_of_range("unknown parameter '" + name + "'");
    }
    return it->second;
  }

  void set(const std::string& name, Tensor value) {
    Tensor& dst = get(name);
    if (dst.shape() != value.shape()) {
      throw ShapeError("parameter '" + name + "': assigning " +
                       shape_str(value.shape()) + " to " +
                       shape_str(dst.shape()));
    }
    dst = std::move(value);
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  void zero_all() {
    for (auto& [_, t] : params_) t.fill(0.0);
  }

 private:
  std::uint64_t seed_;
  std::map<std::string, Tensor> params_;
};

/// Gradients keyed by parameter name.
using GradMap = std::map<std::string, Tensor>;

inline void accumulate(GradMap& into, const GradMap& from, double weight = 1.0) {
  for (const auto& [name, g] : from) {
    auto it = into.find(name);
    if (it == into.end()) {
      Tensor t = g;
      for (double& v : t.values()) v *= weight;
      into.emplace(name, std::move(t));
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += weight * g[i];
    }
  }
}

}  // namespace bevfuse::diff

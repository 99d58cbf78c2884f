#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "bevfuse/diffcore/graph.hpp"

namespace bevfuse::diff {

struct FdOptions {
  /// Floor added to |central difference| in the relative error denominator.
  double eps_abs = 1e-6;
  /// Seed for the random output cotangent and coordinate subsampling.
  std::uint64_t seed = 7;
  /// Upper bound on probed coordinates per tensor (0 = all).
  std::size_t max_coords = 0;
};

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t probed = 0;
  /// Probes whose +/- perturbation changed a kink decision (relu sign, sample
  /// cell); the function is not differentiable there, so they are skipped.
  std::size_t skipped_kinks = 0;
};

using GraphFn = std::function<Var(Graph&, std::span<const Var>)>;
using ParamFn = std::function<Var(Graph&)>;

namespace detail {

inline Tensor random_cotangent(const Shape& shape, std::uint64_t seed) {
  Tensor r(shape);
  if (r.size() == 1) {
    r[0] = 1.0;
    return r;
  }
  std::mt19937_64 rng(seed ^ 0x5DEECE66Dull);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (double& v : r.values()) v = dist(rng);
  return r;
}

inline double contract(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  if (!std::isfinite(s)) throw std::domain_error("fd_check: non-finite probe value");
  return s;
}

inline std::vector<std::size_t> probe_coords(std::size_t n, std::size_t max_coords,
                                             std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (max_coords == 0 || max_coords >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline void update(FdReport& rep, double analytic, double lp, double lm, double eps,
                   double eps_abs) {
  const double cd = (lp - lm) / (2.0 * eps);
  const double err = std::abs(analytic - cd) / (std::abs(cd) + eps_abs);
  rep.max_rel_error = std::max(rep.max_rel_error, err);
  ++rep.probed;
}

}  // namespace detail

/// Compares analytic gradients of fn against central differences. The output
/// is contracted with a fixed random cotangent r, so the checked scalar is
/// sum(r * fn(inputs)). Returns the max of |analytic - fd| / (|fd| + eps_abs).
inline FdReport fd_check(const GraphFn& fn, const std::vector<Tensor>& inputs, double eps,
                         FdOptions opt = {}, const ParameterStore* params = nullptr) {
  if (!(eps > 0.0)) throw std::invalid_argument("fd_check: epsilon must be positive");
  auto run = [&](const std::vector<Tensor>& xs, bool grad, Graph& g) {
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(g.input(x, grad));
    Var out = fn(g, vars);
    return std::pair{out, vars};
  };

  Graph base(params, false);
  auto [out, vars] = run(inputs, true, base);
  const Tensor r = detail::random_cotangent(out.shape(), opt.seed);
  detail::contract(out.value(), r);
  base.backward({{out, r}});
  const std::uint64_t sig = base.branch_signature();

  FdReport rep;
  std::mt19937_64 rng(opt.seed);
  std::vector<Tensor> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const bool has_grad = base.node(vars[t].id).grad.shape() == inputs[t].shape();
    for (std::size_t k : detail::probe_coords(inputs[t].size(), opt.max_coords, rng)) {
      const double x0 = inputs[t][k];
      probe[t][k] = x0 + eps;
      Graph gp(params, false);
      const double lp = detail::contract(run(probe, false, gp).first.value(), r);
      probe[t][k] = x0 - eps;
      Graph gm(params, false);
      const double lm = detail::contract(run(probe, false, gm).first.value(), r);
      probe[t][k] = x0;
      if (gp.branch_signature() != sig || gm.branch_signature() != sig) {
        ++rep.skipped_kinks;
        continue;
      }
      const double a = has_grad ? base.grad(vars[t])[k] : 0.0;
      detail::update(rep, a, lp, lm, eps, opt.eps_abs);
    }
  }
  return rep;
}

/// Same check over named parameters of a store (perturbed in place and
/// restored). Only parameters listed in `names` are probed; empty = all.
inline FdReport fd_check_params(const ParamFn& fn, ParameterStore& params, double eps,
                                FdOptions opt = {}, std::vector<std::string> names = {}) {
  if (!(eps > 0.0)) throw std::invalid_argument("fd_check: epsilon must be positive");
  Graph base(&params, true);
  Var out = fn(base);
  const Tensor r = detail::random_cotangent(out.shape(), opt.seed);
  detail::contract(out.value(), r);
  base.backward({{out, r}});
  const GradMap grads = base.param_grads();
  const std::uint64_t sig = base.branch_signature();
  if (names.empty()) {
    for (const auto& [name, _] : params) names.push_back(name);
  }
  FdReport rep;
  std::mt19937_64 rng(opt.seed);
  for (const auto& name : names) {
    Tensor& p = params.get(name);
    auto git = grads.find(name);
    for (std::size_t k : detail::probe_coords(p.size(), opt.max_coords, rng)) {
      const double x0 = p[k];
      p[k] = x0 + eps;
      Graph gp(&params, false);
      const double lp = detail::contract(fn(gp).value(), r);
      p[k] = x0 - eps;
      Graph gm(&params, false);
      const double lm = detail::contract(fn(gm).value(), r);
      p[k] = x0;
      if (gp.branch_signature() != sig || gm.branch_signature() != sig) {
        ++rep.skipped_kinks;
        continue;
      }
      const double a = git == grads.end() ? 0.0 : git->second[k];
      detail::update(rep, a, lp, lm, eps, opt.eps_abs);
    }
  }
  return rep;
}

}  // namespace bevfuse::diff

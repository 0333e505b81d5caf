#pragma once

// Forward fixed-point solvers for z = f(z): naive iteration and
// limited-memory "good Broyden" root finding on g(z) = f(z) - z. Both record
// the per-iteration relative residual |f(z)-z| / |f(z)| and stop early at the
// configured tolerance. All map evaluations are untaped; results are detached.

#include <cmath>
#include <string>
#include <vector>

#include "fixslot/errors.hpp"
#include "fixslot/tensor.hpp"

namespace fixslot {

enum class SolverKind { kIteration, kBroyden };

struct SolverConfig {
  SolverKind kind = SolverKind::kIteration;
  int max_iters = 7;      // paper setting: seven forward iterations
  double tol = 1e-3;      // rarely triggers at 7 iterations, mirroring fixed-count runs
  int broyden_memory = 7; // stored rank-one updates
};

template <typename S>
struct SolverResult {
  Tensor<S> z_star;                   // detached
  std::vector<double> residual_trace; // one entry per iteration
  int iters_used = 0;
  bool converged = false;
};

template <typename S>
double rel_residual(const Tensor<S>& z, const Tensor<S>& fz, bool* degenerate = nullptr) {
  if (z.shape().numel() != fz.shape().numel())
    throw ShapeError("rel_residual: shapes " + z.shape().str() + " and " + fz.shape().str() + " differ");
  const double num = std::sqrt((fz.array().template cast<double>() - z.array().template cast<double>())
                                   .square()
                                   .sum());
  const double den = frob_norm(fz);
  if (degenerate != nullptr) *degenerate = den == 0.0;
  if (den == 0.0) return num;
  return num / den;
}

template <typename S, typename F>
SolverResult<S> solve_iteration(F&& map, const Tensor<S>& z0, const SolverConfig& cfg) {
  if (cfg.max_iters < 1) throw ContractError("solver: max_iters must be at least 1");
  SolverResult<S> r;
  Tensor<S> z = detach(z0);
  for (int it = 0; it < cfg.max_iters; ++it) {
    Tensor<S> fz = detach(map(z));
    if (!fz.all_finite())
      throw DivergenceError("iteration diverged to non-finite values at step " + std::to_string(it + 1),
                            r.residual_trace);
    const double res = rel_residual(z, fz);
    r.residual_trace.push_back(res);
    r.iters_used = it + 1;
    z = fz;
    if (res <= cfg.tol) break;
  }
  r.z_star = z;
  r.converged = !r.residual_trace.empty() && r.residual_trace.back() <= cfg.tol;
  return r;
}

template <typename S, typename F>
SolverResult<S> solve_broyden(F&& map, const Tensor<S>& z0, const SolverConfig& cfg) {
  if (cfg.max_iters < 1) throw ContractError("solver: max_iters must be at least 1");
  if (cfg.broyden_memory < 1) throw ContractError("solver: broyden_memory must be at least 1");
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  const Shape shape = z0.shape();
  const Index n = shape.numel();

  auto eval = [&](const Vec& zv) -> Vec {
    Tensor<S> zt(shape, typename Tensor<S>::Buffer(zv.array()));
    Tensor<S> fz = detach(map(zt));
    return Eigen::Map<const Vec>(fz.data(), n);
  };

  SolverResult<S> result;
  Vec z = Eigen::Map<const Vec>(detach(z0).data(), n);
  Vec fz = eval(z);
  if (!fz.allFinite())
    throw DivergenceError("broyden: non-finite map value at the initial point", result.residual_trace);
  Vec g = fz - z;

  auto rel = [&](const Vec& gv, const Vec& fv) {
    const double den = std::sqrt(static_cast<double>(fv.template cast<double>().squaredNorm()));
    const double num = std::sqrt(static_cast<double>(gv.template cast<double>().squaredNorm()));
    return den == 0.0 ? num : num / den;
  };

  double res = rel(g, fz);
  result.residual_trace.push_back(res);
  result.iters_used = 1;

  // B approximates the inverse Jacobian of g as B0 + sum_i u_i v_i', B0 = -I.
  std::vector<Vec> us, vs;
  auto apply_b = [&](const Vec& x) {
    Vec y = -x;
    for (std::size_t i = 0; i < us.size(); ++i) y += us[i] * vs[i].dot(x);
    return y;
  };
  auto apply_bt = [&](const Vec& x) {
    Vec y = -x;
    for (std::size_t i = 0; i < us.size(); ++i) y += vs[i] * us[i].dot(x);
    return y;
  };

  while (res > cfg.tol && result.iters_used < cfg.max_iters) {
    Vec dz = -apply_b(g);
    S lam = S(1);
    bool accepted = false;
    Vec zn, fzn, gn;
    double rn = 0;
    for (int attempt = 0; attempt < 5; ++attempt) {  // plain step plus up to 4 halvings
      zn = z + lam * dz;
      fzn = eval(zn);
      if (fzn.allFinite()) {
        gn = fzn - zn;
        rn = rel(gn, fzn);
        if (rn < res) {
          accepted = true;
          break;
        }
      }
      lam *= S(0.5);
    }
    if (!accepted)
      throw DivergenceError("broyden: line search failed to reduce the residual", result.residual_trace);

    Vec dz_step = zn - z;
    Vec dg = gn - g;
    Vec b_dg = apply_b(dg);
    const double denom = static_cast<double>(dz_step.dot(b_dg));
    if (std::abs(denom) >= 1e-12) {
      Vec u = (dz_step - b_dg) / static_cast<S>(denom);
      Vec v = apply_bt(dz_step);
      us.push_back(std::move(u));
      vs.push_back(std::move(v));
      if (static_cast<int>(us.size()) > cfg.broyden_memory) {
        us.erase(us.begin());
        vs.erase(vs.begin());
      }
    }  // singular update: skip it, the damped steps carry on

    z = zn;
    fz = fzn;
    g = gn;
    res = rn;
    result.residual_trace.push_back(res);
    ++result.iters_used;
  }

  typename Tensor<S>::Buffer out(fz.array());
  result.z_star = Tensor<S>(shape, std::move(out));
  result.converged = res <= cfg.tol;
  return result;
}

template <typename S, typename F>
SolverResult<S> solve(F&& map, const Tensor<S>& z0, const SolverConfig& cfg) {
  if (cfg.kind == SolverKind::kBroyden) return solve_broyden(map, z0, cfg);
  return solve_iteration(map, z0, cfg);
}

}  // namespace fixslot

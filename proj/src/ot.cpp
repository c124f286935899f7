#include "otface/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace otface::ot {

CostMatrix::CostMatrix(std::size_t n, std::vector<double> entries)
    : n_(n), entries_(std::move(entries)) {
  if (n_ == 0) throw DimensionError("cost matrix must have at least one atom");
  if (entries_.size() != n_ * n_) {
    throw DimensionError("cost matrix with " + std::to_string(entries_.size()) +
                         " entries is not " + std::to_string(n_) + "x" + std::to_string(n_));
  }
  for (std::size_t k = 0; k < entries_.size(); ++k) {
    const double c = entries_[k];
    if (!std::isfinite(c) || c < 0.0 || c > 2.0) {
      throw ContractError("cost entry (" + std::to_string(k / n_) + "," +
                          std::to_string(k % n_) + ") = " + std::to_string(c) +
                          " outside [0, 2]");
    }
  }
}

void SinkhornConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw ConfigError("sinkhorn epsilon must be positive, got " + std::to_string(epsilon));
  }
  if (!(marginal_tol > 0.0)) throw ConfigError("sinkhorn marginal_tol must be positive");
  if (max_iters == 0) throw ConfigError("sinkhorn max_iters must be positive");
  if (unroll_iters == 0) throw ConfigError("sinkhorn unroll_iters must be positive");
}

CostMatrix build_cost(const Tensor& m1, const Tensor& m2) {
  if (m1.rank() != 2 || m2.rank() != 2 || m1.shape() != m2.shape()) {
    throw DimensionError("build_cost: distributions " + shape_str(m1.shape()) + " and " +
                         shape_str(m2.shape()) + " must both be [n, d] with equal n, d");
  }
  const std::size_t n = m1.dim(0), d = m1.dim(1);
  auto row = [d](const Tensor& m, std::size_t i) {
    return std::span<const double>(m.data().data() + i * d, d);
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (const Tensor* m : {&m1, &m2}) {
      if (!(l2_norm(row(*m, i)) > kNormFloor)) {
        throw DegenerateInputError("build_cost: row " + std::to_string(i) + " of " +
                                   (m == &m1 ? "first" : "second") +
                                   " distribution has near-zero norm");
      }
    }
  }
  std::vector<double> c(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = cosine_distance(row(m1, i), row(m2, j));
  return CostMatrix(n, std::move(c));
}

double marginal_violation(std::size_t n, const std::vector<double>& plan) {
  const double target = 1.0 / static_cast<double>(n);
  double worst = 0.0;
  std::vector<double> cols(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r += plan[i * n + j];
      cols[j] += plan[i * n + j];
    }
    worst = std::max(worst, std::abs(r - target));
  }
  for (double c : cols) worst = std::max(worst, std::abs(c - target));
  return worst;
}

double transport_cost(const CostMatrix& c, const std::vector<double>& plan) {
  double s = 0.0;
  for (std::size_t k = 0; k < plan.size(); ++k) s += c.entries()[k] * plan[k];
  return s;
}

double negative_entropy(const std::vector<double>& plan) {
  double s = 0.0;
  for (double p : plan) s += (p > 0.0 ? p * std::log(p) : 0.0) - p;
  return s;
}

namespace {

void finish(const CostMatrix& c, const SinkhornConfig& cfg, TransportPlan& out) {
  out.value = transport_cost(c, out.plan);
  if (cfg.include_entropy) out.value += cfg.epsilon * negative_entropy(out.plan);
}

[[noreturn]] void underflow(const std::string& where) {
  throw NumericalRegimeError("sinkhorn: " + where +
                             " underflowed at this epsilon; use log-domain mode");
}

}  // namespace

namespace {

// Regularization levels visited by one solve. Without epsilon scaling this is
// just {epsilon}; otherwise it halves from the cost range down to epsilon.
std::vector<double> schedule(const CostMatrix& c, const SinkhornConfig& cfg) {
  std::vector<double> eps{cfg.epsilon};
  if (!cfg.epsilon_scaling) return eps;
  const double top = *std::max_element(c.entries().begin(), c.entries().end());
  eps.clear();
  for (double e = top; e > cfg.epsilon; e *= 0.5) eps.push_back(e);
  eps.push_back(cfg.epsilon);
  return eps;
}

}  // namespace

TransportPlan sinkhorn(const CostMatrix& c, const SinkhornConfig& cfg) {
  cfg.validate();
  const std::size_t n = c.n();
  const double r = 1.0 / static_cast<double>(n);
  TransportPlan out;
  out.n = n;
  if (n == 1) {
    // The only feasible plan; skips exp(-c/eps), which may underflow.
    out.plan = {1.0};
    out.u = {1.0};
    out.v = {1.0};
    out.log_u = {0.0};
    out.log_v = {0.0};
    out.converged = true;
    finish(c, cfg, out);
    return out;
  }

  std::vector<double> K(n * n);
  std::vector<double> u(n, 1.0), v(n, 1.0), a(n), b(n);
  double prev_eps = 0.0;
  for (const double eps : schedule(c, cfg)) {
    for (std::size_t k = 0; k < K.size(); ++k) K[k] = std::exp(-c.entries()[k] / eps);
    for (std::size_t i = 0; i < n; ++i) {
      double rs = 0.0, cs = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        rs += K[i * n + j];
        cs += K[j * n + i];
      }
      if (rs == 0.0) underflow("Gibbs kernel row " + std::to_string(i));
      if (cs == 0.0) underflow("Gibbs kernel column " + std::to_string(i));
    }
    if (prev_eps > 0.0) {
      // Keep the potential eps * log(u) fixed across the change of epsilon.
      for (double& x : u) {
        x = std::pow(x, prev_eps / eps);
        if (!(x > 0.0) || !std::isfinite(x)) underflow("warm-started scaling");
      }
    }
    prev_eps = eps;

    for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
      std::fill(a.begin(), a.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a[j] += K[i * n + j] * u[i];
      for (std::size_t j = 0; j < n; ++j) {
        if (!(a[j] > 0.0) || !std::isfinite(a[j])) underflow("column scaling");
        v[j] = r / a[j];
      }
      std::fill(b.begin(), b.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) b[i] += K[i * n + j] * v[j];
      for (std::size_t i = 0; i < n; ++i) {
        if (!(b[i] > 0.0) || !std::isfinite(b[i])) underflow("row scaling");
        u[i] = r / b[i];
      }
      ++out.iterations_used;
      // Rows are exact after the u update up to rounding; columns carry the error.
      double worst = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double cs = 0.0;
        for (std::size_t i = 0; i < n; ++i) cs += u[i] * K[i * n + j];
        worst = std::max(worst, std::abs(v[j] * cs - r));
      }
      if (worst <= cfg.marginal_tol) break;
    }
  }

  out.plan.resize(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.plan[i * n + j] = u[i] * K[i * n + j] * v[j];
  out.marginal_violation = marginal_violation(n, out.plan);
  out.converged = out.marginal_violation <= cfg.marginal_tol;
  out.u = u;
  out.v = v;
  out.log_u.resize(n);
  out.log_v.resize(n);
  std::transform(u.begin(), u.end(), out.log_u.begin(), [](double x) { return std::log(x); });
  std::transform(v.begin(), v.end(), out.log_v.begin(), [](double x) { return std::log(x); });
  finish(c, cfg, out);
  return out;
}

TransportPlan sinkhorn_log_domain(const CostMatrix& c, const SinkhornConfig& cfg) {
  cfg.validate();
  const std::size_t n = c.n();
  const double log_r = -std::log(static_cast<double>(n));
  const double r = 1.0 / static_cast<double>(n);
  std::vector<double> logK(n * n);

  // f and g are log u and log v at the current epsilon.
  std::vector<double> f(n, 0.0), g(n, 0.0), tmp(n);
  auto lse = [&tmp](std::size_t m) {
    const double mx = *std::max_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(m));
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += std::exp(tmp[k] - mx);
    return mx + std::log(s);
  };

  TransportPlan out;
  out.n = n;
  double prev_eps = 0.0;
  for (const double eps : schedule(c, cfg)) {
    for (std::size_t k = 0; k < logK.size(); ++k) logK[k] = -c.entries()[k] / eps;
    if (prev_eps > 0.0) {
      for (double& x : f) x *= prev_eps / eps;
    }
    prev_eps = eps;
    for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = f[i] + logK[i * n + j];
        g[j] = log_r - lse(n);
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) tmp[j] = g[j] + logK[i * n + j];
        f[i] = log_r - lse(n);
      }
      ++out.iterations_used;
      double worst = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = f[i] + logK[i * n + j];
        worst = std::max(worst, std::abs(std::exp(g[j] + lse(n)) - r));
      }
      if (worst <= cfg.marginal_tol) break;
    }
  }

  out.plan.resize(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.plan[i * n + j] = std::exp(f[i] + logK[i * n + j] + g[j]);
  out.marginal_violation = marginal_violation(n, out.plan);
  out.converged = out.marginal_violation <= cfg.marginal_tol;
  out.log_u = f;
  out.log_v = g;
  out.u.resize(n);
  out.v.resize(n);
  std::transform(f.begin(), f.end(), out.u.begin(), [](double x) { return std::exp(x); });
  std::transform(g.begin(), g.end(), out.v.begin(), [](double x) { return std::exp(x); });
  finish(c, cfg, out);
  return out;
}

TransportPlan solve(const CostMatrix& c, const SinkhornConfig& cfg) {
  return cfg.log_domain ? sinkhorn_log_domain(c, cfg) : sinkhorn(c, cfg);
}

double exact_ot_uniform(const CostMatrix& c) {
  const std::size_t n = c.n();
  if (n > kMaxExactAtoms) {
    throw SizeError("exact_ot_uniform enumerates permutations and supports n <= " +
                    std::to_string(kMaxExactAtoms) + ", got " + std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += c(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

Var ot_distance(Tape& tape, Var m1, Var m2, const SinkhornConfig& cfg) {
  cfg.validate();
  const auto& s1 = tape.value(m1).shape();
  const auto& s2 = tape.value(m2).shape();
  if (s1.size() != 2 || s1 != s2) {
    throw DimensionError("ot_distance: distributions " + shape_str(s1) + " and " +
                         shape_str(s2) + " must both be [n, d] with equal n, d");
  }
  Var sim = tape.matmul(tape.normalize(m1, 1), tape.transpose(tape.normalize(m2, 1)));
  Var cost = tape.add_scalar(tape.scale(sim, -1.0), 1.0);
  Var kernel = tape.exp(tape.scale(cost, -1.0 / cfg.epsilon));
  Var plan = tape.sinkhorn_plan(kernel, cfg.unroll_iters);
  Var value = tape.sum(tape.mul(cost, plan));
  if (cfg.include_entropy) {
    Var neg_h = tape.sub(tape.xlogx_sum(plan), tape.sum(plan));
    value = tape.add(value, tape.scale(neg_h, cfg.epsilon));
  }
  return value;
}

}  // namespace otface::ot

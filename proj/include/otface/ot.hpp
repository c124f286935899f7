#pragma once

#include <cstddef>
#include <vector>

#include "otface/tensor.hpp"

namespace otface::ot {

// Square n x n matrix of cosine distances, entries in [0, 2].
class CostMatrix {
 public:
  CostMatrix() = default;
  // Validates finiteness and the [0, 2] range.
  CostMatrix(std::size_t n, std::vector<double> entries);

  std::size_t n() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return entries_[i * n_ + j]; }
  const std::vector<double>& entries() const { return entries_; }

 private:
  std::size_t n_ = 0;
  std::vector<double> entries_;
};

struct SinkhornConfig {
  double epsilon = 0.01;
  std::size_t max_iters = 200;
  double marginal_tol = 1e-6;
  bool log_domain = false;
  // Anneal epsilon from the largest cost entry down to `epsilon`, halving it
  // each stage and warm-starting the scalings. max_iters applies per stage.
  // Same fixed point, far fewer iterations when the plan is nearly a
  // permutation.
  bool epsilon_scaling = false;
  // Fixed iteration budget when differentiating through the solver.
  std::size_t unroll_iters = 50;
  // Adds -epsilon * H(P) to the reported value.
  bool include_entropy = false;

  void validate() const;
};

struct TransportPlan {
  std::size_t n = 0;
  std::vector<double> plan;  // row-major n x n
  double value = 0.0;        // <C, P> (plus the entropy term when configured)
  std::size_t iterations_used = 0;  // summed over epsilon-scaling stages
  double marginal_violation = 0.0;
  bool converged = false;
  // Final scaling vectors. For the log-domain path these are exp(f), exp(g)
  // and may have under/overflowed; the potentials are kept alongside.
  std::vector<double> u, v;
  std::vector<double> log_u, log_v;

  double at(std::size_t i, std::size_t j) const { return plan[i * n + j]; }
};

// C_ij = cosine_distance(m1 row i, m2 row j). Inputs are [n, d] tensors.
CostMatrix build_cost(const Tensor& m1, const Tensor& m2);

// Max over rows and columns of |marginal - 1/n|.
double marginal_violation(std::size_t n, const std::vector<double>& plan);
// Sum of C_ij P_ij.
double transport_cost(const CostMatrix& c, const std::vector<double>& plan);
// -H(P) with H(P) = -sum P (log P - 1).
double negative_entropy(const std::vector<double>& plan);

// Scaling-form Sinkhorn with K = exp(-C / epsilon), u0 = 1.
// Throws NumericalRegimeError when K has an all-zero row or column.
TransportPlan sinkhorn(const CostMatrix& c, const SinkhornConfig& cfg);
// Same iteration on the potentials f = log u, g = log v.
TransportPlan sinkhorn_log_domain(const CostMatrix& c, const SinkhornConfig& cfg);
// Dispatches on cfg.log_domain.
TransportPlan solve(const CostMatrix& c, const SinkhornConfig& cfg);

inline constexpr std::size_t kMaxExactAtoms = 8;
// Exact unregularized OT value under uniform marginals:
// (1/n) min over permutations of sum_i C_{i, sigma(i)}.
double exact_ot_uniform(const CostMatrix& c);

// Differentiable OT between two [n, d] distributions recorded on `tape`.
// Unrolls cfg.unroll_iters scaling updates; returns <C, P> as a scalar Var.
Var ot_distance(Tape& tape, Var m1, Var m2, const SinkhornConfig& cfg);

}  // namespace otface::ot

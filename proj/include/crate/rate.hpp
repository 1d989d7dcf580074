#pragma once

#include <string>
#include <vector>

#include "crate/linalg.hpp"

namespace crate {

// Shared dimensions and coefficients for the rate objectives. `d` is the
// token dimension, `N` the number of tokens per sample, `p` the subspace
// dimension, `K` the number of subspaces. The quantization scale eps sets
//
//   alpha = d / (N eps^2)    (ambient-space rate coefficient)
//   gamma = p / (N eps^2)    (per-subspace rate coefficient)
//
// lambda is the sparsity weight, kappa the compression step size and eta the
// sparsification step size used downstream.
struct RateConfig {
  std::size_t d = 0;
  std::size_t N = 0;
  std::size_t p = 0;
  std::size_t K = 0;
  double eps = 0.5;
  double lambda = 0.1;
  double kappa = 1.0;
  double eta = 0.1;

  double alpha() const { return static_cast<double>(d) / (static_cast<double>(N) * eps * eps); }
  double gamma() const { return static_cast<double>(p) / (static_cast<double>(N) * eps * eps); }

  // Throws std::invalid_argument on nonpositive dimensions or coefficients.
  void validate() const;
  // Non-fatal configuration notes, e.g. p*K > d (overcomplete subspaces are
  // allowed but worth flagging).
  std::vector<std::string> warnings() const;
};

// K projection bases, each d x p with orthonormal columns.
using SubspaceBank = std::vector<Matrix>;

void check_bank_shapes(const SubspaceBank& bank, const RateConfig& cfg);

// (1/2) log det(I + alpha Z^T Z); nonnegative, zero only at Z = 0, invariant
// to left-multiplication of Z by an orthogonal matrix.
double coding_rate(const Matrix& z, const RateConfig& cfg);

// sum_k (1/2) log det(I + gamma (U_k^T Z)^T (U_k^T Z)): the rate of the same
// tokens measured against the subspace bank.
double coding_rate_projected(const Matrix& z, const SubspaceBank& bank, const RateConfig& cfg);

std::size_t nnz(const Matrix& z);                     // entries exactly nonzero
std::size_t nnz_above(const Matrix& z, double tau);   // entries with |v| > tau

// coding_rate - coding_rate_projected - lambda * ||Z||_0. The exact-zero
// count is the definition; the relaxed variant swaps in a threshold count
// for diagnostics on near-sparse iterates.
double sparse_rate_reduction(const Matrix& z, const SubspaceBank& bank, const RateConfig& cfg);
double sparse_rate_reduction_relaxed(const Matrix& z, const SubspaceBank& bank,
                                     const RateConfig& cfg, double tau = 1e-8);

// alpha Z (I + alpha Z^T Z)^{-1}.
Matrix grad_coding_rate(const Matrix& z, const RateConfig& cfg);

// gamma sum_k U_k (U_k^T Z) (I + gamma (U_k^T Z)^T (U_k^T Z))^{-1}, summed
// over k in ascending order.
Matrix grad_coding_rate_projected(const Matrix& z, const SubspaceBank& bank,
                                  const RateConfig& cfg);

// First-order surrogate of grad_coding_rate_projected that replaces each
// resolvent with a softmax over token similarities:
//
//   gamma Z - gamma^2 sum_k U_k (U_k^T Z) softmax((U_k^T Z)^T (U_k^T Z))
//
// Exact agreement is not expected; the error shrinks as tokens concentrate
// on the subspaces and the union of bases covers the ambient space.
Matrix approx_grad_coding_rate_projected(const Matrix& z, const SubspaceBank& bank,
                                         const RateConfig& cfg);

// Action of the Hessian of coding_rate at Z on a direction Delta:
//
//   H(Delta) = alpha Delta M^{-1}
//            - alpha^2 Z M^{-1} (Z^T Delta + Delta^T Z) M^{-1},
//   M = I + alpha Z^T Z.
Matrix hessian_vec_coding_rate(const Matrix& z, const Matrix& delta, const RateConfig& cfg);

struct HessianBoundReport {
  double max_ratio = 0.0;  // max over trials of ||H(Delta)||_F / alpha
  double bound = 2.25;     // 9/4: the proven ceiling for the ratio
  std::size_t trials = 0;
};

// Samples `trials` unit-Frobenius directions and checks the curvature ratio
// ||H(Delta)||_F / alpha against 9/4. By default Z must have unit-norm
// columns (the regime the bound is stated for); passing
// require_unit_columns=false allows diagnostic probes like Z = 0, where
// H(Delta) = alpha Delta and the ratio is 1. trials must be positive.
HessianBoundReport hessian_norm_bound_check(const Matrix& z, const RateConfig& cfg,
                                            std::size_t trials, Rng& rng,
                                            bool require_unit_columns = true);

}  // namespace crate

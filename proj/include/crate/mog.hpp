#pragma once

#include <optional>
#include <vector>

#include "crate/rate.hpp"

namespace crate {

// Low-rank Gaussian mixture observed through additive isotropic noise:
//
//   k ~ pi,  z = U_k Lambda_k^{1/2} g,  g ~ N(0, I_p),  x = z + sigma w.
//
// Component covariances are kept factored as Sigma_k = U_k Lambda_k U_k^T
// (orthonormal U_k, positive diagonal Lambda_k) and are never materialized:
// every resolvent (Sigma_k + sigma^2 I)^{-1} splits into the span part with
// eigenvalues 1/(lambda_i + sigma^2) and the complement part 1/sigma^2.
struct MixtureModel {
  std::vector<double> pi;                   // K weights, each > 0, sum 1
  SubspaceBank bases;                       // K orthonormal d x p bases
  std::vector<std::vector<double>> lambdas; // K spectra, p positive entries each
  double sigma = 0.0;                       // observation noise level, >= 0

  std::size_t components() const { return pi.size(); }
  std::size_t dim() const { return bases.empty() ? 0 : bases[0].rows(); }
  std::size_t rank() const { return bases.empty() ? 0 : bases[0].cols(); }

  // Throws std::invalid_argument when sizes disagree, weights do not sum to
  // one within 1e-12, a basis is not orthonormal within 1e-10, a spectrum
  // entry is not positive, or sigma is negative. sigma = 0 is legal for
  // sampling; the denoising operations below additionally require sigma > 0.
  void validate() const;
};

struct NoisySample {
  Matrix x;                            // observed d x 1 vector
  std::optional<Matrix> z_true;        // clean vector when known
  std::optional<std::size_t> component;
};

// Draw order per sample is fixed (component, then p coefficients, then d
// noise values), so streams replay identically.
std::vector<NoisySample> sample(const MixtureModel& model, std::size_t n, Rng& rng);

// log of the observed density q_sigma(x), evaluated in log space with
// log-sum-exp across components.
double log_density(const MixtureModel& model, const Matrix& x);

// Exact score of the observed density:
//
//   grad log q(x) = -sum_k w_k(x) (Sigma_k + sigma^2 I)^{-1} x.
//
// By default the responsibilities w_k are the exact posteriors, softmax over
// log pi_k - (1/2) log det(Sigma_k + sigma^2 I) - (1/2) x^T (...)^{-1} x.
// With equal_normalization=true the two normalization terms are dropped,
// which reproduces the simplified closed form that holds when pi_k
// det(Sigma_k + sigma^2 I)^{-1/2} is constant across components.
Matrix mog_score(const MixtureModel& model, const Matrix& x,
                 bool equal_normalization = false);

// x + sigma^2 * score(x): the posterior mean computed through the score.
Matrix tweedie_denoise(const MixtureModel& model, const Matrix& x);

// Closed-form E[z | x] = sum_k w_k Sigma_k (Sigma_k + sigma^2 I)^{-1} x,
// the independent reference for tweedie_denoise.
Matrix posterior_mean(const MixtureModel& model, const Matrix& x);

// Attention-style approximation of the posterior mean that uses only the
// bases and the noise level:
//
//   sum_k softmax_k(||U_k^T x||^2 / (2 sigma^2)) U_k U_k^T x.
//
// Accurate when tokens sit near the subspaces and sigma is below the
// component eigenvalues; exact only in degenerate cases (e.g. K = 1).
Matrix attention_denoise(const MixtureModel& model, const Matrix& x);

}  // namespace crate

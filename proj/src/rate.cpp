#include "crate/rate.hpp"

#include <cmath>
#include <stdexcept>

namespace crate {
namespace {

void check_tokens(const Matrix& z, const RateConfig& cfg, const char* where) {
  cfg.validate();
  require(z.rows() == cfg.d && z.cols() == cfg.N,
          std::string(where) + ": tokens are " + shape_str(z) + ", config says " +
              std::to_string(cfg.d) + "x" + std::to_string(cfg.N));
  z.check_finite(where);
}

}  // namespace

void RateConfig::validate() const {
  require(d > 0 && N > 0 && p > 0 && K > 0, "rate config: dimensions must be positive");
  require(eps > 0.0, "rate config: eps must be positive");
  require(lambda >= 0.0, "rate config: lambda must be nonnegative");
  // kappa = 0 is a legal degenerate compression step (identity); eta drives a
  // proximal step and must stay positive.
  require(kappa >= 0.0, "rate config: kappa must be nonnegative");
  require(eta > 0.0, "rate config: eta must be positive");
}

std::vector<std::string> RateConfig::warnings() const {
  std::vector<std::string> out;
  if (p * K > d) {
    out.push_back("subspace bank is overcomplete (p*K = " + std::to_string(p * K) +
                  " > d = " + std::to_string(d) + ")");
  }
  return out;
}

void check_bank_shapes(const SubspaceBank& bank, const RateConfig& cfg) {
  require(bank.size() == cfg.K, "subspace bank has " + std::to_string(bank.size()) +
                                    " bases, config says K = " + std::to_string(cfg.K));
  for (const Matrix& u : bank) {
    require(u.rows() == cfg.d && u.cols() == cfg.p,
            "subspace basis is " + shape_str(u) + ", config says " +
                std::to_string(cfg.d) + "x" + std::to_string(cfg.p));
  }
}

double coding_rate(const Matrix& z, const RateConfig& cfg) {
  check_tokens(z, cfg, "coding_rate");
  return 0.5 * logdet_gram(z, cfg.alpha());
}

double coding_rate_projected(const Matrix& z, const SubspaceBank& bank, const RateConfig& cfg) {
  check_tokens(z, cfg, "coding_rate_projected");
  check_bank_shapes(bank, cfg);
  double total = 0.0;
  for (const Matrix& u : bank) total += 0.5 * logdet_gram(matmul(transpose(u), z), cfg.gamma());
  return total;
}

std::size_t nnz(const Matrix& z) {
  std::size_t count = 0;
  for (double v : z.storage())
    if (v != 0.0) ++count;
  return count;
}

std::size_t nnz_above(const Matrix& z, double tau) {
  std::size_t count = 0;
  for (double v : z.storage())
    if (std::abs(v) > tau) ++count;
  return count;
}

double sparse_rate_reduction(const Matrix& z, const SubspaceBank& bank, const RateConfig& cfg) {
  return coding_rate(z, cfg) - coding_rate_projected(z, bank, cfg) -
         cfg.lambda * static_cast<double>(nnz(z));
}

double sparse_rate_reduction_relaxed(const Matrix& z, const SubspaceBank& bank,
                                     const RateConfig& cfg, double tau) {
  return coding_rate(z, cfg) - coding_rate_projected(z, bank, cfg) -
         cfg.lambda * static_cast<double>(nnz_above(z, tau));
}

Matrix grad_coding_rate(const Matrix& z, const RateConfig& cfg) {
  check_tokens(z, cfg, "grad_coding_rate");
  const double alpha = cfg.alpha();
  Matrix m = scale(gram_columns(z), alpha);
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += 1.0;
  // Z M^{-1} via a solve against Z^T (M is symmetric).
  Matrix x = spd_solve(m, transpose(z));
  return scale(transpose(x), alpha);
}

Matrix grad_coding_rate_projected(const Matrix& z, const SubspaceBank& bank,
                                  const RateConfig& cfg) {
  check_tokens(z, cfg, "grad_coding_rate_projected");
  check_bank_shapes(bank, cfg);
  const double gamma = cfg.gamma();
  // Built from inverse + matmul rather than a fused solve so the training
  // tape can replay the identical operation sequence.
  Matrix out(z.rows(), z.cols());
  for (const Matrix& u : bank) {
    Matrix g = matmul(transpose(u), z);  // p x N
    Matrix m = add(Matrix::identity(g.cols()), scale(matmul(transpose(g), g), gamma));
    out = add(out, matmul(u, matmul(g, spd_inverse(m))));
  }
  return scale(out, gamma);
}

Matrix approx_grad_coding_rate_projected(const Matrix& z, const SubspaceBank& bank,
                                         const RateConfig& cfg) {
  check_tokens(z, cfg, "approx_grad_coding_rate_projected");
  check_bank_shapes(bank, cfg);
  const double gamma = cfg.gamma();
  Matrix agg(z.rows(), z.cols());
  for (const Matrix& u : bank) {
    Matrix g = matmul(transpose(u), z);
    Matrix attn = matmul(g, softmax_columns(gram_columns(g)));
    agg = add(agg, matmul(u, attn));
  }
  return sub(scale(z, gamma), scale(agg, gamma * gamma));
}

Matrix hessian_vec_coding_rate(const Matrix& z, const Matrix& delta, const RateConfig& cfg) {
  check_tokens(z, cfg, "hessian_vec_coding_rate");
  require(delta.same_shape(z), "hessian_vec_coding_rate: direction shape mismatch");
  delta.check_finite("hessian_vec_coding_rate direction");
  const double alpha = cfg.alpha();
  Matrix m = scale(gram_columns(z), alpha);
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += 1.0;
  Matrix minv = spd_inverse(m);
  Matrix term1 = scale(matmul(delta, minv), alpha);
  Matrix s = add(matmul(transpose(z), delta), matmul(transpose(delta), z));
  Matrix term2 = scale(matmul(matmul(matmul(z, minv), s), minv), alpha * alpha);
  return sub(term1, term2);
}

HessianBoundReport hessian_norm_bound_check(const Matrix& z, const RateConfig& cfg,
                                            std::size_t trials, Rng& rng,
                                            bool require_unit_columns) {
  check_tokens(z, cfg, "hessian_norm_bound_check");
  require(trials > 0, "hessian_norm_bound_check: trials must be positive");
  if (require_unit_columns) {
    for (std::size_t j = 0; j < z.cols(); ++j) {
      require(std::abs(column_norm(z, j) - 1.0) < 1e-8,
              "hessian_norm_bound_check: column " + std::to_string(j) +
                  " is not unit norm (pass require_unit_columns=false for diagnostics)");
    }
  }
  HessianBoundReport report;
  report.trials = trials;
  const double alpha = cfg.alpha();
  for (std::size_t t = 0; t < trials; ++t) {
    Matrix delta = gaussian_matrix(z.rows(), z.cols(), rng);
    double norm = frobenius_norm(delta);
    if (norm == 0.0) continue;  // probability zero, but stay safe
    delta = scale(delta, 1.0 / norm);
    double ratio = frobenius_norm(hessian_vec_coding_rate(z, delta, cfg)) / alpha;
    if (ratio > report.max_ratio) report.max_ratio = ratio;
  }
  return report;
}

}  // namespace crate

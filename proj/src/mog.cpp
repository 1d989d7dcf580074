#include "crate/mog.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace crate {
namespace {

void check_point(const MixtureModel& model, const Matrix& x, const char* where) {
  model.validate();
  require(x.rows() == model.dim() && x.cols() == 1,
          std::string(where) + ": point is " + shape_str(x) + ", model dimension is " +
              std::to_string(model.dim()));
  x.check_finite(where);
}

void need_noise(const MixtureModel& model, const char* where) {
  require(model.sigma > 0.0, std::string(where) + ": requires sigma > 0");
}

// (Sigma_k + sigma^2 I)^{-1} x through the factorization.
Matrix resolvent_apply(const Matrix& u, const std::vector<double>& lam, double s2,
                       const Matrix& x) {
  Matrix proj = matmul(transpose(u), x);  // p x 1
  Matrix scaled = proj;
  for (std::size_t i = 0; i < scaled.rows(); ++i) scaled(i, 0) /= (lam[i] + s2);
  Matrix span_part = matmul(u, scaled);
  Matrix complement = sub(x, matmul(u, proj));
  return add(span_part, scale(complement, 1.0 / s2));
}

// Sigma_k (Sigma_k + sigma^2 I)^{-1} x = U diag(lam/(lam+s2)) U^T x.
Matrix shrink_apply(const Matrix& u, const std::vector<double>& lam, double s2,
                    const Matrix& x) {
  Matrix proj = matmul(transpose(u), x);
  for (std::size_t i = 0; i < proj.rows(); ++i) proj(i, 0) *= lam[i] / (lam[i] + s2);
  return matmul(u, proj);
}

struct ComponentStats {
  std::vector<double> logits;            // responsibilities pre-softmax
  std::vector<Matrix> resolvent;         // (Sigma_k + s2 I)^{-1} x per component
  double max_logit = 0.0;
};

// Shared evaluation of quadratic forms and (optionally corrected) logits.
ComponentStats component_stats(const MixtureModel& model, const Matrix& x,
                               bool equal_normalization) {
  const double s2 = model.sigma * model.sigma;
  const std::size_t d = model.dim(), p = model.rank();
  ComponentStats st;
  for (std::size_t k = 0; k < model.components(); ++k) {
    Matrix rx = resolvent_apply(model.bases[k], model.lambdas[k], s2, x);
    double quad = 0.0;
    for (std::size_t i = 0; i < d; ++i) quad += x(i, 0) * rx(i, 0);
    double logit = -0.5 * quad;
    if (!equal_normalization) {
      double logdet = (static_cast<double>(d) - static_cast<double>(p)) * std::log(s2);
      for (double lam : model.lambdas[k]) logdet += std::log(lam + s2);
      logit += std::log(model.pi[k]) - 0.5 * logdet;
    }
    st.logits.push_back(logit);
    st.resolvent.push_back(std::move(rx));
    if (k == 0 || logit > st.max_logit) st.max_logit = logit;
  }
  return st;
}

std::vector<double> softmax_logits(const ComponentStats& st) {
  std::vector<double> w(st.logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = std::exp(st.logits[k] - st.max_logit);
    sum += w[k];
  }
  for (double& v : w) v /= sum;
  return w;
}

}  // namespace

void MixtureModel::validate() const {
  const std::size_t K = pi.size();
  require(K > 0, "mixture model: needs at least one component");
  require(bases.size() == K && lambdas.size() == K,
          "mixture model: pi, bases and lambdas must have equal length");
  double total = 0.0;
  for (double w : pi) {
    require(w > 0.0, "mixture model: weights must be positive");
    total += w;
  }
  require(std::abs(total - 1.0) <= 1e-12, "mixture model: weights must sum to 1");
  const std::size_t d = bases[0].rows(), p = bases[0].cols();
  require(p <= d, "mixture model: subspace dimension exceeds ambient dimension");
  for (std::size_t k = 0; k < K; ++k) {
    require(bases[k].rows() == d && bases[k].cols() == p,
            "mixture model: basis " + std::to_string(k) + " has shape " +
                shape_str(bases[k]));
    Matrix g = gram_columns(bases[k]);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        double want = i == j ? 1.0 : 0.0;
        require(std::abs(g(i, j) - want) <= 1e-10,
                "mixture model: basis " + std::to_string(k) + " is not orthonormal");
      }
    require(lambdas[k].size() == p, "mixture model: spectrum " + std::to_string(k) +
                                        " must have " + std::to_string(p) + " entries");
    for (double lam : lambdas[k])
      require(lam > 0.0, "mixture model: spectra must be positive");
  }
  require(sigma >= 0.0, "mixture model: sigma must be nonnegative");
}

std::vector<NoisySample> sample(const MixtureModel& model, std::size_t n, Rng& rng) {
  model.validate();
  require(n >= 1, "sample: n must be at least 1");
  const std::size_t d = model.dim(), p = model.rank();
  std::vector<NoisySample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform();
    std::size_t k = 0;
    double acc = model.pi[0];
    while (k + 1 < model.components() && u >= acc) acc += model.pi[++k];
    Matrix g(p, 1);
    for (std::size_t r = 0; r < p; ++r)
      g(r, 0) = std::sqrt(model.lambdas[k][r]) * rng.normal();
    Matrix z = matmul(model.bases[k], g);
    Matrix x = z;
    for (std::size_t r = 0; r < d; ++r) x(r, 0) += model.sigma * rng.normal();
    out.push_back(NoisySample{std::move(x), std::move(z), k});
  }
  return out;
}

double log_density(const MixtureModel& model, const Matrix& x) {
  check_point(model, x, "log_density");
  need_noise(model, "log_density");
  ComponentStats st = component_stats(model, x, /*equal_normalization=*/false);
  double sum = 0.0;
  for (double logit : st.logits) sum += std::exp(logit - st.max_logit);
  const double d = static_cast<double>(model.dim());
  return st.max_logit + std::log(sum) - 0.5 * d * std::log(2.0 * std::numbers::pi);
}

Matrix mog_score(const MixtureModel& model, const Matrix& x, bool equal_normalization) {
  check_point(model, x, "mog_score");
  need_noise(model, "mog_score");
  ComponentStats st = component_stats(model, x, equal_normalization);
  std::vector<double> w = softmax_logits(st);
  Matrix score(model.dim(), 1);
  for (std::size_t k = 0; k < model.components(); ++k)
    score = add(score, scale(st.resolvent[k], -w[k]));
  return score;
}

Matrix tweedie_denoise(const MixtureModel& model, const Matrix& x) {
  check_point(model, x, "tweedie_denoise");
  need_noise(model, "tweedie_denoise");
  return add(x, scale(mog_score(model, x), model.sigma * model.sigma));
}

Matrix posterior_mean(const MixtureModel& model, const Matrix& x) {
  check_point(model, x, "posterior_mean");
  need_noise(model, "posterior_mean");
  const double s2 = model.sigma * model.sigma;
  ComponentStats st = component_stats(model, x, /*equal_normalization=*/false);
  std::vector<double> w = softmax_logits(st);
  Matrix mean(model.dim(), 1);
  for (std::size_t k = 0; k < model.components(); ++k) {
    Matrix m = shrink_apply(model.bases[k], model.lambdas[k], s2, x);
    mean = add(mean, scale(m, w[k]));
  }
  return mean;
}

Matrix attention_denoise(const MixtureModel& model, const Matrix& x) {
  check_point(model, x, "attention_denoise");
  need_noise(model, "attention_denoise");
  const double s2 = model.sigma * model.sigma;
  const std::size_t K = model.components();
  std::vector<Matrix> proj(K);
  Matrix logits(K, 1);
  for (std::size_t k = 0; k < K; ++k) {
    proj[k] = matmul(transpose(model.bases[k]), x);
    logits(k, 0) = column_norm(proj[k], 0);
    logits(k, 0) = logits(k, 0) * logits(k, 0) / (2.0 * s2);
  }
  Matrix w = softmax_columns(logits);
  Matrix out(model.dim(), 1);
  for (std::size_t k = 0; k < K; ++k)
    out = add(out, scale(matmul(model.bases[k], proj[k]), w(k, 0)));
  return out;
}

}  // namespace crate

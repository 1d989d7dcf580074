#include "crate/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace crate {

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(),
          "matmul: inner dimensions differ, " + shape_str(a) + " * " + shape_str(b));
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "add: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.storage()[i] += b.storage()[i];
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "sub: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.storage()[i] -= b.storage()[i];
  return c;
}

Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.storage()) v *= s;
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "hadamard: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.storage()[i] *= b.storage()[i];
  return c;
}

Matrix relu(const Matrix& a) {
  Matrix c = a;
  for (double& v : c.storage())
    if (v < 0.0) v = 0.0;
  return c;
}

Matrix softmax_columns(const Matrix& scores) {
  scores.check_finite("softmax_columns input");
  Matrix out(scores.rows(), scores.cols());
  for (std::size_t j = 0; j < scores.cols(); ++j) {
    double m = scores(0, j);
    for (std::size_t i = 1; i < scores.rows(); ++i) m = std::max(m, scores(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      double e = std::exp(scores(i, j) - m);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t i = 0; i < scores.rows(); ++i) out(i, j) /= sum;
  }
  return out;
}

Matrix gram_columns(const Matrix& z) { return matmul(transpose(z), z); }
Matrix gram_rows(const Matrix& z) { return matmul(z, transpose(z)); }

Matrix cholesky(const Matrix& a) {
  require(a.rows() == a.cols(), "cholesky: matrix not square, " + shape_str(a));
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) throw std::runtime_error("cholesky: matrix not positive definite");
    l(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  require(l.rows() == b.rows(),
          "cholesky_solve: shape mismatch " + shape_str(l) + " vs " + shape_str(b));
  const std::size_t n = l.rows();
  Matrix x = b;
  // Forward substitution L y = b.
  for (std::size_t c = 0; c < x.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
      x(i, c) = s / l(i, i);
    }
    // Back substitution L^T x = y.
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
      x(ii, c) = s / l(ii, ii);
    }
  }
  return x;
}

Matrix spd_solve(const Matrix& a, const Matrix& b) {
  return cholesky_solve(cholesky(a), b);
}

Matrix spd_inverse(const Matrix& a) {
  return cholesky_solve(cholesky(a), Matrix::identity(a.rows()));
}

double logdet_gram(const Matrix& z, double alpha) {
  require(alpha >= 0.0, "logdet_gram: alpha must be nonnegative");
  z.check_finite("logdet_gram input");
  Matrix g = z.rows() <= z.cols() ? gram_rows(z) : gram_columns(z);
  const std::size_t n = g.rows();
  for (std::size_t i = 0; i < g.size(); ++i) g.storage()[i] *= alpha;
  for (std::size_t i = 0; i < n; ++i) g(i, i) += 1.0;
  Matrix l = cholesky(g);
  double logdet = 0.0;
  for (std::size_t i = 0; i < n; ++i) logdet += std::log(l(i, i));
  return 2.0 * logdet;
}

Matrix orthonormalize(const Matrix& m, Rng& rng) {
  require(m.rows() >= m.cols(),
          "orthonormalize: need rows >= cols, got " + shape_str(m));
  require(m.cols() > 0, "orthonormalize: empty input");
  const std::size_t d = m.rows(), p = m.cols();
  Matrix work = m;
  double base = std::max(max_abs(m), 1.0);
  for (int attempt = 0;; ++attempt) {
    Matrix q = work;
    bool degenerate = false;
    for (std::size_t j = 0; j < p && !degenerate; ++j) {
      // Two projection passes: plain Gram-Schmidt loses orthogonality for
      // nearly dependent columns, the second pass restores it.
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < j; ++k) {
          double dot = 0.0;
          for (std::size_t i = 0; i < d; ++i) dot += q(i, k) * q(i, j);
          for (std::size_t i = 0; i < d; ++i) q(i, j) -= dot * q(i, k);
        }
      }
      double norm = column_norm(q, j);
      if (norm < 1e-12 * base) {
        degenerate = true;
        break;
      }
      for (std::size_t i = 0; i < d; ++i) q(i, j) /= norm;
    }
    if (!degenerate) {
      for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t i = 0; i < d; ++i) {
          if (std::abs(q(i, j)) > 1e-12) {
            if (q(i, j) < 0.0)
              for (std::size_t r = 0; r < d; ++r) q(r, j) = -q(r, j);
            break;
          }
        }
      }
      return q;
    }
    if (attempt >= 4)
      throw std::runtime_error("orthonormalize: rank-deficient input, retries exhausted");
    work = m;
    for (double& v : work.storage()) v += 1e-8 * base * rng.normal();
  }
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.storage()) s += v * v;
  return std::sqrt(s);
}

double frobenius_dist(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "frobenius_dist: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a.storage()[i] - b.storage()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.storage()) m = std::max(m, std::abs(v));
  return m;
}

double column_norm(const Matrix& a, std::size_t j) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

Matrix select_column(const Matrix& a, std::size_t j) {
  require(j < a.cols(), "select_column: index out of range");
  Matrix c(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) c(i, 0) = a(i, j);
  return c;
}

void set_column(Matrix& a, std::size_t j, const Matrix& col) {
  require(j < a.cols() && col.rows() == a.rows() && col.cols() == 1,
          "set_column: shape mismatch");
  for (std::size_t i = 0; i < a.rows(); ++i) a(i, j) = col(i, 0);
}

Matrix concat_columns(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(),
          "concat_columns: row mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix c(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j);
    for (std::size_t j = 0; j < b.cols(); ++j) c(i, a.cols() + j) = b(i, j);
  }
  return c;
}

Matrix concat_rows(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(),
          "concat_rows: column mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix c(a.rows() + b.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j);
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) c(a.rows() + i, j) = b(i, j);
  return c;
}

Matrix add_col_broadcast(const Matrix& a, const Matrix& col) {
  require(col.rows() == a.rows() && col.cols() == 1,
          "add_col_broadcast: bias must be " + std::to_string(a.rows()) + "x1");
  Matrix c = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) += col(i, 0);
  return c;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.storage()) v = rng.normal();
  return m;
}

}  // namespace crate

#pragma once

#include "crate/matrix.hpp"
#include "crate/rng.hpp"

namespace crate {

// Dense kernels shared by every module. All of them are written with a fixed
// floating-point evaluation order (documented per function where it matters)
// so repeated runs produce bit-identical results. None of them reorder sums
// based on data or thread count.

// C = A * B. For each output entry the sum over k runs in ascending order
// (i-k-j loop nest, accumulating into the output row).
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix relu(const Matrix& a);

// Column-wise softmax with the usual max-subtraction guard; exp sums run in
// ascending row order. Entries of +/-inf or NaN are rejected.
Matrix softmax_columns(const Matrix& scores);

// Z^T Z (cols x cols) and Z Z^T (rows x rows).
Matrix gram_columns(const Matrix& z);
Matrix gram_rows(const Matrix& z);

// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
// Throws std::runtime_error if a pivot is not strictly positive.
Matrix cholesky(const Matrix& a);
// Solves (L L^T) X = B given the lower factor L.
Matrix cholesky_solve(const Matrix& l, const Matrix& b);
Matrix spd_solve(const Matrix& a, const Matrix& b);
Matrix spd_inverse(const Matrix& a);

// log det(I + alpha Z^T Z) computed on whichever Gram side is smaller, via
// Cholesky. Natural log. The two sides agree by Sylvester's identity; the
// smaller side keeps the factorization cheap when d and N are unbalanced.
double logdet_gram(const Matrix& z, double alpha);

// Gram-Schmidt with a full re-orthogonalization pass. Columns come out
// orthonormal to ~1e-14 even for badly conditioned inputs. Sign convention:
// each column is flipped so its first entry with magnitude above 1e-12 is
// positive, which keeps factorizations unique for test comparison. If a
// column collapses (rank deficiency), the input is perturbed with noise from
// `rng` scaled to 1e-8 of the largest entry and the pass is retried; after 4
// retries throws std::runtime_error.
Matrix orthonormalize(const Matrix& m, Rng& rng);

double frobenius_norm(const Matrix& a);
double frobenius_dist(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double column_norm(const Matrix& a, std::size_t j);

Matrix select_column(const Matrix& a, std::size_t j);
void set_column(Matrix& a, std::size_t j, const Matrix& col);
Matrix concat_columns(const Matrix& a, const Matrix& b);
Matrix concat_rows(const Matrix& a, const Matrix& b);
// Adds a rows x 1 column vector to every column of a.
Matrix add_col_broadcast(const Matrix& a, const Matrix& col);

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng);

}  // namespace crate

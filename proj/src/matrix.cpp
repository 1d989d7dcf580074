#include "crate/matrix.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace crate {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows * cols,
          "matrix data length " + std::to_string(data_.size()) + " does not match " +
              std::to_string(rows) + "x" + std::to_string(cols));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    require(r.size() == cols_, "ragged initializer list for matrix");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::vector<double> values) {
  std::size_t n = values.size();
  return Matrix(n, 1, std::move(values));
}

void Matrix::check_finite(const std::string& where) const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("non-finite value in " + where);
    }
  }
}

void require(bool cond, const std::string& message) {
  if (!cond) throw std::invalid_argument(message);
}

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace crate

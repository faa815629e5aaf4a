#pragma once

#include <random>

#include "pikoop/numkit.hpp"

namespace pikoop::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix a(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) a(i, j) = d(rng);
  }
  return a;
}

inline Vector random_vector(Eigen::Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return random_matrix(n, 1, rng, lo, hi);
}

/// exp(A) by a 60-term Taylor series on A / 2^s followed by s squarings.
inline Matrix taylor_exp(const Matrix& a, int scale_pow = 4, int terms = 60) {
  const Matrix as = a / std::ldexp(1.0, scale_pow);
  Matrix sum = Matrix::Identity(a.rows(), a.cols());
  Matrix term = Matrix::Identity(a.rows(), a.cols());
  for (int k = 1; k < terms; ++k) {
    term = term * as / static_cast<double>(k);
    sum += term;
  }
  for (int k = 0; k < scale_pow; ++k) sum = sum * sum;
  return sum;
}

inline double rel_fro(const Matrix& a, const Matrix& ref) {
  return (a - ref).norm() / std::max(ref.norm(), 1e-300);
}

}  // namespace pikoop::testing

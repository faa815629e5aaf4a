#pragma once

// Dense linear-algebra kernel shared by every operator fit.
//
// Data matrices are column-per-sample throughout: a regressor G is M x N and
// a target Y is P x N, so a fitted operator A satisfies A G ~ Y.

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <vector>
#include <limits>
#include <sstream>
#include <string>

#include "pikoop/errors.hpp"

namespace pikoop {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

inline std::string dims(const Matrix& a) {
  std::ostringstream os;
  os << a.rows() << "x" << a.cols();
  return os.str();
}

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

}  // namespace detail

/// Moore-Penrose pseudoinverse by SVD. Singular values below
/// rank_tol * sigma_max are dropped; rank_tol == 0 selects
/// max(rows, cols) * eps.
inline Matrix pinv(const Matrix& a, double rank_tol = 0.0) {
  detail::require(a.size() > 0, "pinv: empty matrix");
  detail::require(rank_tol >= 0.0, "pinv: rank_tol must be >= 0");
  if (!a.allFinite()) {
    throw NumericalError("pinv: non-finite entries in " + detail::dims(a) + " matrix");
  }
  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) {
    throw NumericalError("pinv: SVD did not converge for " + detail::dims(a) + " matrix");
  }
  const Vector& s = svd.singularValues();
  const double smax = s.size() > 0 ? s(0) : 0.0;
  const double rel = rank_tol > 0.0
                         ? rank_tol
                         : static_cast<double>(std::max(a.rows(), a.cols())) *
                               std::numeric_limits<double>::epsilon();
  const double cutoff = rel * smax;
  Vector inv_s = Vector::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cutoff && s(i) > 0.0) inv_s(i) = 1.0 / s(i);
  }
  return svd.matrixV() * inv_s.asDiagonal() * svd.matrixU().transpose();
}

/// Minimum-norm least squares: returns A = Y G^+ minimizing ||A G - Y||_F.
inline Matrix lstsq(const Matrix& g, const Matrix& y, double rank_tol = 0.0) {
  detail::require(g.size() > 0 && y.size() > 0, "lstsq: empty data");
  if (g.cols() != y.cols()) {
    throw ContractError("lstsq: sample count mismatch, G is " + detail::dims(g) + ", Y is " +
                        detail::dims(y));
  }
  return y * pinv(g, rank_tol);
}

/// e^A by scaling and squaring with the degree-13 Pade approximant.
inline Matrix matexp(const Matrix& a) {
  detail::require(a.rows() == a.cols() && a.size() > 0, "matexp: matrix must be square");
  if (!a.allFinite()) throw NumericalError("matexp: non-finite input " + detail::dims(a));

  static constexpr double b[] = {64764752532480000.0,
                                 32382376266240000.0,
                                 7771770303897600.0,
                                 1187353796428800.0,
                                 129060195264000.0,
                                 10559470521600.0,
                                 670442572800.0,
                                 33522128640.0,
                                 1323241920.0,
                                 40840800.0,
                                 960960.0,
                                 16380.0,
                                 182.0,
                                 1.0};
  constexpr double theta13 = 5.371920351148152;

  const Eigen::Index n = a.rows();
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  int s = 0;
  if (norm1 > theta13) s = static_cast<int>(std::ceil(std::log2(norm1 / theta13)));
  if (s > 1000) {
    throw NumericalError("matexp: 1-norm " + detail::num(norm1) + " overflows scaling");
  }
  const Matrix as = a * std::ldexp(1.0, -s);
  const Matrix id = Matrix::Identity(n, n);
  const Matrix a2 = as * as;
  const Matrix a4 = a2 * a2;
  const Matrix a6 = a4 * a2;

  const Matrix u_inner = a6 * (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 +
                         b[3] * a2 + b[1] * id;
  const Matrix u = as * u_inner;
  const Matrix v = a6 * (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 +
                   b[2] * a2 + b[0] * id;

  Matrix r = (v - u).partialPivLu().solve(v + u);
  for (int k = 0; k < s; ++k) r = r * r;
  if (!r.allFinite()) {
    throw NumericalError("matexp: result overflowed for " + detail::dims(a) + " matrix");
  }
  return r;
}

struct LassoResult {
  Matrix coef;
  bool converged = true;
  int iterations = 0;
};

/// Called after each accepted ISTA step with (row, iteration, objective).
using LassoTrace = std::function<void(Eigen::Index, int, double)>;

/// Minimizes ||A G - Y||_F^2 + alpha * ||A||_1 (entrywise l1, sums not averaged).
///
/// The objective separates over rows of A; each row is an independent lasso
/// problem solved by ISTA with backtracking on the Lipschitz constant, started
/// from zero. Rows share the Gram matrix G G^T so the per-iteration work is a
/// single product A (G G^T). A row stops when its largest coefficient change
/// drops below tol; if any row hits max_iter the result has converged = false.
/// alpha == 0 is solved directly as minimum-norm least squares.
inline LassoResult lasso_solve(const Matrix& g, const Matrix& y, double alpha, int max_iter = 5000,
                               double tol = 1e-10, const LassoTrace& trace = {}) {
  detail::require(alpha >= 0.0, "lasso_solve: alpha must be >= 0");
  detail::require(max_iter >= 1, "lasso_solve: max_iter must be >= 1");
  if (g.cols() != y.cols()) {
    throw ContractError("lasso_solve: sample count mismatch, G is " + detail::dims(g) +
                        ", Y is " + detail::dims(y));
  }
  detail::require(g.size() > 0, "lasso_solve: empty regressor");

  LassoResult out;
  if (y.rows() == 0) {
    out.coef = Matrix::Zero(0, g.rows());
    return out;
  }
  if (alpha == 0.0) {
    out.coef = lstsq(g, y);
    return out;
  }

  const Eigen::Index p = y.rows();
  const Eigen::Index m = g.rows();
  const Matrix gram = g * g.transpose();
  const Matrix c = y * g.transpose();
  const Vector yy = y.rowwise().squaredNorm();

  // Power-iteration estimate of 2*lambda_max(Gram) as the starting Lipschitz
  // constant; backtracking below corrects any underestimate.
  Vector pv = Vector::Ones(m) / std::sqrt(static_cast<double>(m));
  double lam = 0.0;
  for (int k = 0; k < 30; ++k) {
    Vector w = gram * pv;
    lam = w.norm();
    if (lam == 0.0) break;
    pv = w / lam;
  }
  const double lip0 = std::max(2.0 * lam, std::numeric_limits<double>::min());

  Matrix a = Matrix::Zero(p, m);
  Matrix ag = Matrix::Zero(p, m);  // a * gram
  Vector lip = Vector::Constant(p, lip0);
  std::vector<bool> active(static_cast<std::size_t>(p), true);
  Eigen::Index n_active = p;

  auto smooth = [&](Eigen::Index r, const Eigen::Ref<const Eigen::RowVectorXd>& ar,
                    const Eigen::Ref<const Eigen::RowVectorXd>& agr) {
    return ar.dot(agr) - 2.0 * ar.dot(c.row(r));
  };
  auto objective = [&](Eigen::Index r, const Eigen::Ref<const Eigen::RowVectorXd>& ar,
                       const Eigen::Ref<const Eigen::RowVectorXd>& agr) {
    return smooth(r, ar, agr) + yy(r) + alpha * ar.lpNorm<1>();
  };
  auto soft = [](double z, double t) {
    return z > t ? z - t : (z < -t ? z + t : 0.0);
  };

  Vector obj(p);
  for (Eigen::Index r = 0; r < p; ++r) obj(r) = yy(r);

  Matrix a_new(p, m);
  int it = 0;
  for (; it < max_iter && n_active > 0; ++it) {
    const Matrix grad = 2.0 * (ag - c);
    for (Eigen::Index r = 0; r < p; ++r) {
      if (!active[static_cast<std::size_t>(r)]) {
        a_new.row(r) = a.row(r);
        continue;
      }
      const double step = 1.0 / lip(r);
      for (Eigen::Index j = 0; j < m; ++j) {
        a_new(r, j) = soft(a(r, j) - step * grad(r, j), alpha * step);
      }
    }
    Matrix ag_new = a_new * gram;

    // Backtracking: rows whose step violates the quadratic upper bound retry
    // with a doubled Lipschitz constant.
    for (Eigen::Index r = 0; r < p; ++r) {
      if (!active[static_cast<std::size_t>(r)]) continue;
      for (int bt = 0; bt < 60; ++bt) {
        const Eigen::RowVectorXd d = a_new.row(r) - a.row(r);
        const double lhs = smooth(r, a_new.row(r), ag_new.row(r));
        const double rhs = smooth(r, a.row(r), ag.row(r)) + grad.row(r).dot(d) +
                           0.5 * lip(r) * d.squaredNorm();
        if (lhs <= rhs + 1e-12 * std::max(1.0, std::abs(rhs))) break;
        lip(r) *= 2.0;
        const double step = 1.0 / lip(r);
        for (Eigen::Index j = 0; j < m; ++j) {
          a_new(r, j) = soft(a(r, j) - step * grad(r, j), alpha * step);
        }
        ag_new.row(r) = a_new.row(r) * gram;
      }
    }

    for (Eigen::Index r = 0; r < p; ++r) {
      if (!active[static_cast<std::size_t>(r)]) continue;
      const double change = (a_new.row(r) - a.row(r)).cwiseAbs().maxCoeff();
      const double o = objective(r, a_new.row(r), ag_new.row(r));
      assert(o <= obj(r) + 1e-9 * std::max(1.0, std::abs(obj(r))) &&
             "lasso objective increased");
      obj(r) = o;
      a.row(r) = a_new.row(r);
      ag.row(r) = ag_new.row(r);
      if (trace) trace(r, it, o);
      if (change < tol) {
        active[static_cast<std::size_t>(r)] = false;
        --n_active;
      }
    }
  }
  out.coef = std::move(a);
  out.iterations = it;
  out.converged = n_active == 0;
  return out;
}

}  // namespace pikoop

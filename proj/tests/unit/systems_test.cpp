#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "pikoop/systems.hpp"
#include "test_util.hpp"

using namespace pikoop;
using pikoop::testing::random_matrix;
using pikoop::testing::taylor_exp;

namespace {

SplitSystem linear_system(const Matrix& a, const Matrix& b) {
  SplitSystem s;
  s.name = "linear";
  s.n = static_cast<int>(a.rows());
  s.m = static_cast<int>(b.cols());
  s.f = [a](const Vector& x, const Vector&) { return Vector(a * x); };
  s.h = [b](const Vector&, const Vector& u) { return Vector(b * u); };
  s.state_bounds = make_box({-1, -1}, {1, 1});
  s.control_bounds = make_box({-1}, {1});
  return s;
}

const Rhs decay = [](const Vector& x, const Vector&) { return Vector(-x); };

}  // namespace

TEST(Rk4, ZeroDynamicsIsStationary) {
  const Rhs zero = [](const Vector& x, const Vector&) { return Vector(Vector::Zero(x.size())); };
  Vector x(3);
  x << 1, -2, 3;
  EXPECT_EQ(rk4_step(zero, x, Vector::Zero(1), 0.1), x);
}

TEST(Rk4, ExponentialDecay) {
  EXPECT_NEAR(rk4_step(decay, Vector::Ones(1), Vector::Zero(1), 0.1)(0), std::exp(-0.1), 1e-7);
}

TEST(Rk4, FourthOrderConvergence) {
  // Self-refinement: end state at T = 1 against a dt/64 reference.
  const auto sys = duffing();
  Vector x0(2);
  x0 << 1.2, -0.4;
  const Vector u = Vector::Constant(1, 0.3);
  auto run = [&](int n) {
    Vector x = x0;
    for (int k = 0; k < n; ++k) x = rk4_step(sys, x, u, 1.0 / n);
    return x;
  };
  const Vector ref = run(20 * 64);
  const double e1 = (run(20) - ref).norm();
  const double e2 = (run(40) - ref).norm();
  const double slope = std::log2(e1 / e2);
  EXPECT_GE(slope, 3.8);
  EXPECT_LE(slope, 4.2);
}

TEST(Rk4, NonFiniteDerivativeReportsState) {
  const Rhs bad = [](const Vector& x, const Vector&) { return Vector(x.array().log()); };
  try {
    rk4_step(bad, Vector::Constant(1, -1.0), Vector::Zero(1), 0.1);
    FAIL() << "expected throw";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("[-1]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(rk4_step(decay, Vector::Ones(1), Vector::Zero(1), 0.0), ContractError);
}

TEST(Simulate, ZeroDynamicsIsConstant) {
  SplitSystem s = linear_system(Matrix::Zero(2, 2), Matrix::Zero(2, 1));
  Vector x0(2);
  x0 << 0.5, 0.7;
  const Matrix traj = simulate(s, x0, [](int) { return Vector(Vector::Ones(1)); }, 10, 0.1);
  ASSERT_EQ(traj.cols(), 11);
  for (int k = 0; k <= 10; ++k) EXPECT_EQ(traj.col(k), x0);
}

TEST(Simulate, LinearPlantMatchesClosedForm) {
  std::mt19937_64 rng(3);
  const Matrix a = random_matrix(2, 2, rng);
  const Matrix b = random_matrix(2, 1, rng);
  auto sys = linear_system(a, b);
  sys.substeps = 4;
  const double dt = 0.05;
  Matrix aug = Matrix::Zero(3, 3);
  aug.topLeftCorner(2, 2) = a * dt;
  aug.topRightCorner(2, 1) = b * dt;
  const Matrix e = taylor_exp(aug);
  const auto us = make_controls(sys.control_bounds, 50, dt, {}, 4);
  Vector x(2);
  x << 0.3, -0.6;
  const Matrix traj = simulate(sys, x, [&](int k) { return us[static_cast<std::size_t>(k)]; }, 50, dt);
  for (int k = 0; k < 50; ++k) {
    x = e.topLeftCorner(2, 2) * x + e.topRightCorner(2, 1) * us[static_cast<std::size_t>(k)];
    EXPECT_LE((traj.col(k + 1) - x).cwiseAbs().maxCoeff(), 1e-6) << "step " << k;
  }
}

TEST(Simulate, DuffingStaysBounded) {
  const auto sys = duffing();
  const auto us = make_controls(sys.control_bounds, 10000, 0.03, {}, 5);
  Vector x0(2);
  x0 << 1.5, 1.5;
  const Matrix traj = simulate(sys, x0, [&](int k) { return us[static_cast<std::size_t>(k)]; }, 10000, 0.03);
  ASSERT_TRUE(traj.allFinite());
  double emax = 0.0;
  for (Eigen::Index k = 0; k < traj.cols(); ++k) {
    const double x1 = traj(0, k), x2 = traj(1, k);
    emax = std::max(emax, 0.5 * x2 * x2 - 0.5 * x1 * x1 + 0.25 * x1 * x1 * x1 * x1);
  }
  EXPECT_LT(emax, 10.0);
}

TEST(Lhs, SinglePointInsideBox) {
  const Box box = make_box({-1, 2, 0}, {1, 3, 5});
  const Matrix p = latin_hypercube(box, 1, 7);
  ASSERT_EQ(p.cols(), 1);
  EXPECT_TRUE(box.contains(p.col(0)));
}

TEST(Lhs, OneSamplePerStratum) {
  const Box box = make_box({-2, 0, 10}, {2, 1, 20});
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (int n : {10, 100, 257}) {
      const Matrix p = latin_hypercube(box, n, seed);
      for (Eigen::Index d = 0; d < box.dim(); ++d) {
        std::vector<int> occupancy(static_cast<std::size_t>(n), 0);
        for (int i = 0; i < n; ++i) {
          const double t = (p(d, i) - box.lo(d)) / (box.hi(d) - box.lo(d));
          const int s = std::min(n - 1, static_cast<int>(std::floor(t * n)));
          ++occupancy[static_cast<std::size_t>(s)];
        }
        for (int c : occupancy) EXPECT_EQ(c, 1);
      }
    }
  }
}

TEST(Lhs, SeedDeterminism) {
  const auto sys = pendulum();
  const auto a = sample_phase_lhs(sys.state_bounds, sys.control_bounds, 64, 11);
  const auto b = sample_phase_lhs(sys.state_bounds, sys.control_bounds, 64, 11);
  const auto c = sample_phase_lhs(sys.state_bounds, sys.control_bounds, 64, 12);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.u, b.u);
  EXPECT_NE(a.x, c.x);
  for (int i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(sys.state_bounds.contains(a.x.col(i)));
    EXPECT_TRUE(sys.control_bounds.contains(a.u.col(i)));
  }
}

TEST(VelocitySampling, ZeroCovarianceGivesZeros) {
  EXPECT_EQ(sample_velocity_gaussian(Matrix::Zero(3, 3), 20, 1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(VelocitySampling, IdentityCovariance) {
  const Matrix s = sample_velocity_gaussian(Matrix::Identity(2, 2), 10000, 2);
  const Matrix cov = s * s.transpose() / static_cast<double>(s.cols());
  EXPECT_NEAR(cov(0, 0), 1.0, 0.1);
  EXPECT_NEAR(cov(1, 1), 1.0, 0.1);
  EXPECT_NEAR(cov(0, 1), 0.0, 0.1);
}

TEST(VelocitySampling, ScaledVariance) {
  Matrix cov = Matrix::Constant(1, 1, 4.0);
  const Matrix s = sample_velocity_gaussian(cov, 10000, 3);
  const double sd = std::sqrt(s.squaredNorm() / static_cast<double>(s.cols()));
  EXPECT_GE(sd, 1.9);
  EXPECT_LE(sd, 2.1);
}

TEST(VelocitySampling, SingularCovarianceIsReproduced) {
  // rank-1 covariance: samples lie on the span of v
  Vector v(3);
  v << 1, -2, 0.5;
  const Matrix cov = v * v.transpose();
  const Matrix s = sample_velocity_gaussian(cov, 5000, 4);
  const Matrix emp = s * s.transpose() / 5000.0;
  EXPECT_LE((emp - cov).cwiseAbs().maxCoeff(), 0.1 * cov.cwiseAbs().maxCoeff());
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    const double t = s.col(j).dot(v) / v.squaredNorm();
    EXPECT_LE((s.col(j) - t * v).norm(), 1e-9);
  }
}

TEST(VelocitySampling, LowRankSampleCovarianceIsAccepted) {
  // 40 samples in 120 dimensions with mixed scales: rank <= 39, so LDL^T
  // meets rounding-level negative pivots.
  std::mt19937_64 rng(8);
  Matrix data = random_matrix(120, 40, rng);
  for (Eigen::Index i = 0; i < 120; ++i) data.row(i) *= std::pow(10.0, static_cast<double>(i % 4) - 1.0);
  const Matrix c = data.colwise() - data.rowwise().mean();
  Matrix cov = c * c.transpose() / 39.0;
  cov = 0.5 * (cov + cov.transpose());
  const Matrix s = sample_velocity_gaussian(cov, 200, 5);
  EXPECT_TRUE(s.allFinite());
  // samples stay in the column space of the centred data
  const Matrix proj = c * pinv(c);
  EXPECT_LE((s - proj * s).norm(), 1e-8 * s.norm());
}

TEST(VelocitySampling, IndefiniteIsRejected) {
  Matrix cov = Matrix::Identity(2, 2);
  cov(1, 1) = -1.0;
  EXPECT_THROW(sample_velocity_gaussian(cov, 10, 1), ContractError);
}

TEST(MakeD1, CountsAndOrdering) {
  const auto sys = duffing();
  const auto one = make_d1(sys, 1, 1, 0.03, {}, 1);
  EXPECT_EQ(one.size(), 1);
  const auto d = make_d1(sys, 4, 25, 0.03, {}, 2);
  EXPECT_EQ(d.size(), 100);
  const auto seg = d.segments();
  ASSERT_EQ(seg.size(), 4u);
  for (const auto& [b, e] : seg) {
    EXPECT_EQ(e - b, 25);
    for (int i = b + 1; i < e; ++i) EXPECT_EQ(d.x.col(i), d.xp.col(i - 1));
  }
}

TEST(MakeD1, ReplayReproducesRecords) {
  for (const auto& sys : {duffing(), pendulum()}) {
    ControlPolicySpec sin_policy;
    sin_policy.kind = ControlPolicy::sinusoidal;
    for (const auto& policy : {ControlPolicySpec{}, sin_policy}) {
      const auto d = make_d1(sys, 3, 40, 0.03, policy, 9);
      for (int i = 0; i < d.size(); ++i) {
        const Vector x = d.x.col(i);
        const Vector u = d.u.col(i);
        const Matrix one = simulate(sys, x, [&](int) { return u; }, 1, d.dt);
        EXPECT_LE((one.col(1) - d.xp.col(i)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_TRUE(sys.control_bounds.contains(u));
      }
    }
  }
}

TEST(MakeD1, SeedDeterminismAndPrefix) {
  const auto sys = duffing();
  const auto a = make_d1(sys, 5, 30, 0.03, {}, 77);
  const auto b = make_d1(sys, 5, 30, 0.03, {}, 77);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.u, b.u);
  // trajectory t depends only on (seed, t) and its LHS start
  const auto p = a.prefix(45);
  EXPECT_EQ(p.size(), 45);
  EXPECT_EQ(p.segments().size(), 2u);
}

TEST(MakeD1, PiecewiseControlsHold) {
  ControlPolicySpec policy;
  policy.hold_steps = 5;
  const auto us = make_controls(make_box({-1}, {1}), 20, 0.03, policy, 3);
  for (int k = 0; k < 20; ++k) {
    EXPECT_EQ(us[static_cast<std::size_t>(k)](0), us[static_cast<std::size_t>(k - k % 5)](0));
  }
  EXPECT_NE(us[0](0), us[5](0));
}

TEST(Systems, SplitSumsToFullRhs) {
  std::mt19937_64 rng(4);
  for (const auto& sys : {duffing(), pendulum()}) {
    for (int i = 0; i < 20; ++i) {
      const Vector x = random_matrix(2, 1, rng);
      const Vector u = random_matrix(1, 1, rng);
      EXPECT_EQ(sys.rhs(x, u), Vector(sys.f(x, u) + sys.h(x, u)));
      // h acts only on its declared components
      const Vector h = sys.h(x, u);
      EXPECT_EQ(h(0), 0.0);
    }
  }
}

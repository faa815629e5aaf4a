#pragma once

// Split-dynamics benchmark systems xdot = f(x,u) + h(x,u) with f known and h
// unknown, plus integration and dataset generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pikoop/errors.hpp"
#include "pikoop/numkit.hpp"

namespace pikoop {

using Rhs = std::function<Vector(const Vector& x, const Vector& u)>;

struct Box {
  Vector lo;
  Vector hi;

  [[nodiscard]] Eigen::Index dim() const { return lo.size(); }
  [[nodiscard]] bool contains(const Vector& p, double slack = 0.0) const {
    return ((p.array() >= lo.array() - slack) && (p.array() <= hi.array() + slack)).all();
  }
};

inline Box make_box(std::initializer_list<double> lo, std::initializer_list<double> hi) {
  Box b{Vector(static_cast<Eigen::Index>(lo.size())), Vector(static_cast<Eigen::Index>(hi.size()))};
  std::copy(lo.begin(), lo.end(), b.lo.data());
  std::copy(hi.begin(), hi.end(), b.hi.data());
  return b;
}

inline Box concat(const Box& a, const Box& b) {
  Box out{Vector(a.dim() + b.dim()), Vector(a.dim() + b.dim())};
  out.lo << a.lo, b.lo;
  out.hi << a.hi, b.hi;
  return out;
}

/// A dynamical system in split form. `observe` maps the simulated state to the
/// learning state (identity for ODE benchmarks, node downsampling for the rod).
struct SplitSystem {
  std::string name;
  int n = 0;  // simulated state dim
  int m = 0;  // control dim
  Rhs f;      // known
  Rhs h;      // unknown
  Box state_bounds;
  Box control_bounds;
  /// Box sampled (by LHS) for trajectory initial conditions, and the map from
  /// a sample to a simulated state. Defaults: state_bounds and identity.
  Box initial_bounds;
  std::function<Vector(const Vector&)> initial_map;
  std::function<Vector(const Vector&)> observe;
  int observed_dim = 0;
  /// Learning-state components that h drives; every other component has h = 0.
  std::vector<int> h_active;
  /// Learning-state components used by the shape and distal-velocity metrics.
  std::vector<int> position_idx;
  std::vector<int> velocity_idx;
  /// Internal RK4 substeps per output step.
  int substeps = 1;

  [[nodiscard]] Vector rhs(const Vector& x, const Vector& u) const { return f(x, u) + h(x, u); }
  [[nodiscard]] Vector observed(const Vector& x) const { return observe ? observe(x) : x; }
  [[nodiscard]] int learn_dim() const { return observe ? observed_dim : n; }
  [[nodiscard]] Vector initial_state(const Vector& p) const {
    return initial_map ? initial_map(p) : p;
  }
  [[nodiscard]] const Box& init_box() const {
    return initial_bounds.dim() > 0 ? initial_bounds : state_bounds;
  }
};

namespace detail {

inline std::string snapshot(const Vector& x) {
  std::ostringstream os;
  os << "[";
  const Eigen::Index shown = std::min<Eigen::Index>(x.size(), 12);
  for (Eigen::Index i = 0; i < shown; ++i) os << (i ? ", " : "") << x(i);
  if (shown < x.size()) os << ", ...";
  os << "]";
  return os.str();
}

inline Vector checked(const Vector& d, const Vector& x) {
  if (!d.allFinite()) throw NumericalError("rk4_step: non-finite derivative at x = " + snapshot(x));
  return d;
}

/// splitmix64; derives independent per-item seeds from a master seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Classical RK4 step of an arbitrary right-hand side, u held constant.
inline Vector rk4_step(const Rhs& rhs, const Vector& x, const Vector& u, double dt) {
  detail::require(dt > 0.0, "rk4_step: dt must be > 0");
  const Vector k1 = detail::checked(rhs(x, u), x);
  const Vector k2 = detail::checked(rhs(x + 0.5 * dt * k1, u), x);
  const Vector k3 = detail::checked(rhs(x + 0.5 * dt * k2, u), x);
  const Vector k4 = detail::checked(rhs(x + dt * k3, u), x);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// RK4 step of the full dynamics f + h.
inline Vector rk4_step(const SplitSystem& sys, const Vector& x, const Vector& u, double dt) {
  return rk4_step([&sys](const Vector& a, const Vector& b) { return sys.rhs(a, b); }, x, u, dt);
}

/// One output interval of length dt made of sys.substeps RK4 steps.
inline Vector advance(const SplitSystem& sys, const Vector& x, const Vector& u, double dt) {
  Vector y = x;
  const int sub = std::max(1, sys.substeps);
  for (int k = 0; k < sub; ++k) y = rk4_step(sys, y, u, dt / sub);
  return y;
}

/// States on the output grid: column k is x(k dt), k = 0..steps.
/// u_schedule(k) is held over [k dt, (k+1) dt).
inline Matrix simulate(const SplitSystem& sys, const Vector& x0,
                       const std::function<Vector(int)>& u_schedule, int steps, double dt) {
  detail::require(steps >= 1, "simulate: steps must be >= 1");
  detail::require(x0.size() == sys.n, "simulate: x0 has wrong dimension");
  Matrix out(sys.n, steps + 1);
  out.col(0) = x0;
  for (int k = 0; k < steps; ++k) out.col(k + 1) = advance(sys, out.col(k), u_schedule(k), dt);
  return out;
}

/// Latin hypercube design: each dimension split into n strata, one sample per
/// stratum, strata matched across dimensions by seeded permutations.
/// Returns dim x n points.
inline Matrix latin_hypercube(const Box& box, int n, std::uint64_t seed) {
  detail::require(n >= 1, "latin_hypercube: n must be >= 1");
  detail::require(box.lo.allFinite() && box.hi.allFinite(), "latin_hypercube: bounds must be finite");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Matrix pts(box.dim(), n);
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (Eigen::Index d = 0; d < box.dim(); ++d) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < n; ++i) {
      const double t = (perm[static_cast<std::size_t>(i)] + unif(rng)) / n;
      pts(d, i) = box.lo(d) + t * (box.hi(d) - box.lo(d));
    }
  }
  return pts;
}

/// D1: consecutive (x, x', u) records of simulated trajectories, stored
/// column-per-record. Records of one trajectory are contiguous and ordered.
struct TrajectoryDataset {
  double dt = 0.0;
  Matrix x;
  Matrix xp;
  Matrix u;
  std::vector<int> traj;
  std::vector<int> step;

  [[nodiscard]] int size() const { return static_cast<int>(x.cols()); }
  [[nodiscard]] int state_dim() const { return static_cast<int>(x.rows()); }
  [[nodiscard]] int control_dim() const { return static_cast<int>(u.rows()); }

  [[nodiscard]] TrajectoryDataset prefix(int count) const {
    detail::require(count >= 0 && count <= size(), "TrajectoryDataset::prefix: out of range");
    TrajectoryDataset out;
    out.dt = dt;
    out.x = x.leftCols(count);
    out.xp = xp.leftCols(count);
    out.u = u.leftCols(count);
    out.traj.assign(traj.begin(), traj.begin() + count);
    out.step.assign(step.begin(), step.begin() + count);
    return out;
  }

  void append(const TrajectoryDataset& other) {
    if (size() == 0) {
      *this = other;
      return;
    }
    detail::require(other.size() == 0 ||
                        (other.state_dim() == state_dim() && other.control_dim() == control_dim()),
                    "TrajectoryDataset::append: dimension mismatch");
    const Eigen::Index n0 = x.cols();
    const Eigen::Index n1 = other.x.cols();
    x.conservativeResize(Eigen::NoChange, n0 + n1);
    xp.conservativeResize(Eigen::NoChange, n0 + n1);
    u.conservativeResize(Eigen::NoChange, n0 + n1);
    x.rightCols(n1) = other.x;
    xp.rightCols(n1) = other.xp;
    u.rightCols(n1) = other.u;
    traj.insert(traj.end(), other.traj.begin(), other.traj.end());
    step.insert(step.end(), other.step.begin(), other.step.end());
  }

  /// Start and one-past-end column of each trajectory, in order.
  [[nodiscard]] std::vector<std::pair<int, int>> segments() const {
    std::vector<std::pair<int, int>> seg;
    int start = 0;
    for (int i = 1; i <= size(); ++i) {
      if (i == size() || traj[static_cast<std::size_t>(i)] != traj[static_cast<std::size_t>(i - 1)] ||
          step[static_cast<std::size_t>(i)] != step[static_cast<std::size_t>(i - 1)] + 1) {
        seg.emplace_back(start, i);
        start = i;
      }
    }
    return seg;
  }
};

/// D2: phase-space samples (x_i, u_i). known_rate (f evaluated and observed)
/// and known_flow (known-term flow over flow_dt, observed) are optional
/// precomputed columns; systems whose f acts on an unobserved full state
/// must provide them.
struct PhaseDataset {
  Matrix x;
  Matrix u;
  Matrix known_rate;
  Matrix known_flow;
  double flow_dt = 0.0;

  [[nodiscard]] int size() const { return static_cast<int>(x.cols()); }

  [[nodiscard]] PhaseDataset prefix(int count) const {
    detail::require(count >= 0 && count <= size(), "PhaseDataset::prefix: out of range");
    PhaseDataset out;
    out.x = x.leftCols(count);
    out.u = u.leftCols(count);
    if (known_rate.size() > 0) out.known_rate = known_rate.leftCols(count);
    if (known_flow.size() > 0) out.known_flow = known_flow.leftCols(count);
    out.flow_dt = flow_dt;
    return out;
  }
};

/// LHS over the joint state x control box.
inline PhaseDataset sample_phase_lhs(const Box& state_box, const Box& control_box, int n,
                                     std::uint64_t seed) {
  const Matrix pts = latin_hypercube(concat(state_box, control_box), n, seed);
  PhaseDataset d;
  d.x = pts.topRows(state_box.dim());
  d.u = pts.bottomRows(control_box.dim());
  return d;
}

/// n draws (columns) of N(0, cov) via a symmetric eigendecomposition, so
/// singular PSD covariances (clamped nodes, low-rank sample covariances) are
/// accepted. Eigenvalues below -1e-9 * max |eigenvalue| are rejected.
inline Matrix sample_velocity_gaussian(const Matrix& cov, int n, std::uint64_t seed) {
  detail::require(cov.rows() == cov.cols() && cov.size() > 0, "sample_velocity_gaussian: cov must be square");
  detail::require(n >= 1, "sample_velocity_gaussian: n must be >= 1");
  detail::require(cov.allFinite(), "sample_velocity_gaussian: non-finite covariance");
  const double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
  const double scale = cov.diagonal().cwiseAbs().maxCoeff();
  detail::require(asym <= 1e-12 * std::max(1.0, scale), "sample_velocity_gaussian: covariance not symmetric");

  const Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (cov + cov.transpose()));
  detail::require(eig.info() == Eigen::Success, "sample_velocity_gaussian: factorization failed");
  Vector lam = eig.eigenvalues();
  const double top = std::max(lam.cwiseAbs().maxCoeff(), scale);
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam(i) < -1e-9 * top) {
      throw ContractError("sample_velocity_gaussian: covariance is not positive semi-definite");
    }
    // rounding-level eigenvalues are null directions
    lam(i) = lam(i) <= 1e-12 * top ? 0.0 : std::sqrt(lam(i));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(cov.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < cov.rows(); ++i) z(i, j) = normal(rng);
  }
  return eig.eigenvectors() * (lam.asDiagonal() * z);
}

enum class ControlPolicy { piecewise_constant, sinusoidal };

struct ControlPolicySpec {
  ControlPolicy kind = ControlPolicy::piecewise_constant;
  int hold_steps = 10;
};

/// Control sequence of length `steps` for one trajectory.
inline std::vector<Vector> make_controls(const Box& bounds, int steps, double dt,
                                         const ControlPolicySpec& policy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Eigen::Index m = bounds.dim();
  std::vector<Vector> us(static_cast<std::size_t>(steps), Vector(m));
  if (policy.kind == ControlPolicy::piecewise_constant) {
    detail::require(policy.hold_steps >= 1, "make_controls: hold_steps must be >= 1");
    Vector cur(m);
    for (int k = 0; k < steps; ++k) {
      if (k % policy.hold_steps == 0) {
        for (Eigen::Index j = 0; j < m; ++j) {
          cur(j) = bounds.lo(j) + unif(rng) * (bounds.hi(j) - bounds.lo(j));
        }
      }
      us[static_cast<std::size_t>(k)] = cur;
    }
  } else {
    Vector amp(m), phase(m), omega(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      amp(j) = 0.5 + 0.5 * unif(rng);
      phase(j) = 2.0 * M_PI * unif(rng);
      omega(j) = 2.0 * M_PI / (1.0 + 4.0 * unif(rng));
    }
    for (int k = 0; k < steps; ++k) {
      for (Eigen::Index j = 0; j < m; ++j) {
        const double mid = 0.5 * (bounds.lo(j) + bounds.hi(j));
        const double half = 0.5 * (bounds.hi(j) - bounds.lo(j));
        us[static_cast<std::size_t>(k)](j) = mid + amp(j) * half * std::sin(omega(j) * k * dt + phase(j));
      }
    }
  }
  return us;
}

/// One simulated trajectory of `steps` records, observed through sys.observe.
inline TrajectoryDataset simulate_records(const SplitSystem& sys, const Vector& x0,
                                          const std::vector<Vector>& us, double dt, int traj_id) {
  const int steps = static_cast<int>(us.size());
  detail::require(steps >= 1, "simulate_records: need at least one control");
  const int nl = sys.learn_dim();
  TrajectoryDataset d;
  d.dt = dt;
  d.x.resize(nl, steps);
  d.xp.resize(nl, steps);
  d.u.resize(sys.m, steps);
  Vector x = x0;
  Vector obs = sys.observed(x);
  for (int k = 0; k < steps; ++k) {
    const Vector& u = us[static_cast<std::size_t>(k)];
    const Vector xn = advance(sys, x, u, dt);
    const Vector obs_n = sys.observed(xn);
    d.x.col(k) = obs;
    d.xp.col(k) = obs_n;
    d.u.col(k) = u;
    d.traj.push_back(traj_id);
    d.step.push_back(k);
    x = xn;
    obs = obs_n;
  }
  return d;
}

/// n_traj trajectories of `steps` records from LHS-sampled initial conditions.
/// Trajectory t uses seed derive_seed(seed, t), so results do not depend on
/// the order trajectories are generated in.
inline TrajectoryDataset make_d1(const SplitSystem& sys, int n_traj, int steps, double dt,
                                 const ControlPolicySpec& policy, std::uint64_t seed,
                                 int first_traj_id = 0) {
  detail::require(n_traj >= 1 && steps >= 1, "make_d1: n_traj and steps must be >= 1");
  detail::require(dt > 0.0, "make_d1: dt must be > 0");
  const Matrix starts = latin_hypercube(sys.init_box(), n_traj, seed);
  TrajectoryDataset out;
  out.dt = dt;
  for (int t = 0; t < n_traj; ++t) {
    const auto tseed = detail::derive_seed(seed, static_cast<std::uint64_t>(t));
    const Vector x0 = sys.initial_state(starts.col(t));
    const auto us = make_controls(sys.control_bounds, steps, dt, policy, tseed);
    out.append(simulate_records(sys, x0, us, dt, first_traj_id + t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// ODE benchmarks

struct DuffingParams {
  double delta = 0.2;
  double alpha = -1.0;
  double beta = 1.0;
  double c = 0.5;  // unknown state coupling c * sin(x1)
};

/// Forced Duffing oscillator: f = (x2, -delta x2 - alpha x1 - beta x1^3),
/// h = (0, u + c sin x1).
inline SplitSystem duffing(const DuffingParams& p = {}) {
  SplitSystem s;
  s.name = "duffing";
  s.n = 2;
  s.m = 1;
  s.f = [p](const Vector& x, const Vector&) {
    Vector d(2);
    d << x(1), -p.delta * x(1) - p.alpha * x(0) - p.beta * x(0) * x(0) * x(0);
    return d;
  };
  s.h = [p](const Vector& x, const Vector& u) {
    Vector d(2);
    d << 0.0, u(0) + p.c * std::sin(x(0));
    return d;
  };
  s.state_bounds = make_box({-2.0, -2.0}, {2.0, 2.0});
  s.control_bounds = make_box({-1.0}, {1.0});
  s.h_active = {1};
  s.position_idx = {0, 1};
  s.velocity_idx = {1};
  return s;
}

struct PendulumParams {
  double g = 9.81;
  double length = 1.0;
  double mass = 1.0;
  double gamma = 0.5;
};

/// Controlled pendulum: f = (x2, -(g/l) sin x1 - gamma x2), h = (0, u / (m l^2)).
inline SplitSystem pendulum(const PendulumParams& p = {}) {
  SplitSystem s;
  s.name = "pendulum";
  s.n = 2;
  s.m = 1;
  s.f = [p](const Vector& x, const Vector&) {
    Vector d(2);
    d << x(1), -(p.g / p.length) * std::sin(x(0)) - p.gamma * x(1);
    return d;
  };
  s.h = [p](const Vector&, const Vector& u) {
    Vector d(2);
    d << 0.0, u(0) / (p.mass * p.length * p.length);
    return d;
  };
  s.state_bounds = make_box({-M_PI, -4.0}, {M_PI, 4.0});
  s.control_bounds = make_box({-2.0}, {2.0});
  s.h_active = {1};
  s.position_idx = {0, 1};
  s.velocity_idx = {1};
  return s;
}

}  // namespace pikoop

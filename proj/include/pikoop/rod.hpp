#pragma once

// Planar Cosserat rod with two antagonistic tendons.
//
// The rod is clamped at s = 0 and free at s = L. Arclength is sampled at N
// equally spaced nodes and every node carries 9 values (body-frame strain and
// velocities):
//   [ px, py, phi, vx, vy, w, qx, qy, omega ]
// The full state is node-major, 9 N entries.
//
// Known part f: passive dynamics with Kelvin-Voigt damping and linear drag.
//   p' = R q, phi' = omega
//   v' = q_s + w J q - omega J v,  w' = omega_s
//   rho A q' = n_s + w J n - rho A omega J q - rho A gamma q
//   rho I omega' = m_s + (v x n) - rho I gamma omega
//   n = Kse (v - v*) + Bse v',  m = EI (w - w*) + Bbt w'
// Unknown part h: tendon wrench and gravity on the velocity rows.
//   rho A q' += R^T (0, -rho A g) - c (u1 + u2) e_x
//   rho I omega' += (u1 - u2) d
// Spatial derivatives are second-order finite differences (central inside,
// one-sided at the ends). At the tip n and m are replaced by the tip load.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pikoop/errors.hpp"
#include "pikoop/numkit.hpp"
#include "pikoop/systems.hpp"

namespace pikoop {

namespace rod_layout {
inline constexpr int kNodeDim = 9;
inline constexpr int PX = 0, PY = 1, PHI = 2, VX = 3, VY = 4, W = 5, QX = 6, QY = 7, OM = 8;
}  // namespace rod_layout

struct RodParams {
  double length = 0.5;
  int nodes = 41;
  double density = 1000.0;
  double area = M_PI * 1e-4;          // r = 0.01 m
  double inertia = M_PI * 1e-8 / 4;  // second moment of area
  double youngs = 1e6;
  double shear = 1e6 / 3.0;
  double v_ref_x = 1.0;
  double v_ref_y = 0.0;
  double w_ref = 0.0;
  /// Kelvin-Voigt shear viscosity eta: Bse = eta diag(3A, A), Bbt = 3 eta I.
  double viscosity = 50.0;
  /// Linear velocity drag (1/s) on q and omega.
  double drag = 0.5;
  double tendon_offset = 0.01;
  /// Axial compression per unit length per newton of total tension (1/m).
  double axial_load = 0.1;
  double gravity = 0.0;
  double tip_force_x = 0.0;
  double tip_force_y = 0.0;
  double tip_moment = 0.0;
  double max_tension = 5.0;

  static RodParams with_radius(double r) {
    RodParams p;
    p.area = M_PI * r * r;
    p.inertia = M_PI * r * r * r * r / 4.0;
    return p;
  }

  [[nodiscard]] double spacing() const { return length / (nodes - 1); }
  [[nodiscard]] int state_dim() const { return rod_layout::kNodeDim * nodes; }

  void validate() const {
    detail::require(nodes >= 3, "RodParams: need at least 3 nodes");
    detail::require(length > 0 && density > 0 && area > 0 && inertia > 0 && youngs > 0 && shear > 0,
                    "RodParams: geometric and material constants must be positive");
    detail::require(viscosity >= 0 && drag >= 0, "RodParams: damping must be non-negative");
    detail::require(tendon_offset > 0, "RodParams: tendon offset must be positive");
    detail::require(axial_load >= 0, "RodParams: axial load factor must be non-negative");
    detail::require(max_tension > 0, "RodParams: max tension must be positive");
  }
};

namespace detail {

/// d/ds on a uniform grid, second order everywhere.
inline Vector fd_ds(const Vector& y, double h) {
  const Eigen::Index n = y.size();
  Vector d(n);
  d(0) = (-3.0 * y(0) + 4.0 * y(1) - y(2)) / (2.0 * h);
  for (Eigen::Index i = 1; i + 1 < n; ++i) d(i) = (y(i + 1) - y(i - 1)) / (2.0 * h);
  d(n - 1) = (3.0 * y(n - 1) - 4.0 * y(n - 2) + y(n - 3)) / (2.0 * h);
  return d;
}

inline Vector node_component(const Vector& x, int nodes, int comp) {
  Vector out(nodes);
  for (int i = 0; i < nodes; ++i) out(i) = x(rod_layout::kNodeDim * i + comp);
  return out;
}

inline void check_rod_state(const RodParams& p, const Vector& x) {
  if (x.size() != p.state_dim()) {
    throw ContractError("rod: state has " + std::to_string(x.size()) + " entries, expected " +
                        std::to_string(p.state_dim()));
  }
}

inline void check_tensions(const Vector& u) {
  if (u.size() != 2) throw ContractError("rod: expected 2 tendon tensions");
}

/// Throws naming the first node with a non-finite derivative.
inline void check_rod_rate(const Vector& dx, const char* what) {
  for (Eigen::Index k = 0; k < dx.size(); ++k) {
    if (!std::isfinite(dx(k))) {
      throw NumericalError(std::string(what) + ": non-finite rate at node " +
                           std::to_string(k / rod_layout::kNodeDim) + " (component " +
                           std::to_string(k % rod_layout::kNodeDim) + ")");
    }
  }
}

}  // namespace detail

/// Known (passive) part of the rod dynamics.
inline Vector rod_known_rate(const RodParams& p, const Vector& x) {
  using namespace rod_layout;
  detail::check_rod_state(p, x);
  const int n = p.nodes;
  const double h = p.spacing();
  const double rho_a = p.density * p.area;
  const double rho_i = p.density * p.inertia;

  const Vector phi = detail::node_component(x, n, PHI);
  const Vector vx = detail::node_component(x, n, VX);
  const Vector vy = detail::node_component(x, n, VY);
  const Vector w = detail::node_component(x, n, W);
  const Vector qx = detail::node_component(x, n, QX);
  const Vector qy = detail::node_component(x, n, QY);
  const Vector om = detail::node_component(x, n, OM);

  const Vector qx_s = detail::fd_ds(qx, h);
  const Vector qy_s = detail::fd_ds(qy, h);
  const Vector om_s = detail::fd_ds(om, h);

  // J a = (-a_y, a_x)
  const Vector vx_dot = qx_s.array() - w.array() * qy.array() + om.array() * vy.array();
  const Vector vy_dot = qy_s.array() + w.array() * qx.array() - om.array() * vx.array();
  const Vector w_dot = om_s;

  const double eta = p.viscosity;
  Vector nx = p.youngs * p.area * (vx.array() - p.v_ref_x) + 3.0 * eta * p.area * vx_dot.array();
  Vector ny = p.shear * p.area * (vy.array() - p.v_ref_y) + eta * p.area * vy_dot.array();
  Vector m = p.youngs * p.inertia * (w.array() - p.w_ref) + 3.0 * eta * p.inertia * w_dot.array();
  nx(n - 1) = p.tip_force_x;
  ny(n - 1) = p.tip_force_y;
  m(n - 1) = p.tip_moment;

  const Vector nx_s = detail::fd_ds(nx, h);
  const Vector ny_s = detail::fd_ds(ny, h);
  const Vector m_s = detail::fd_ds(m, h);

  Vector dx = Vector::Zero(x.size());
  for (int i = 0; i < n; ++i) {
    const int b = kNodeDim * i;
    dx(b + VX) = vx_dot(i);
    dx(b + VY) = vy_dot(i);
    dx(b + W) = w_dot(i);
    if (i == 0) continue;  // clamped base
    const double c = std::cos(phi(i));
    const double s = std::sin(phi(i));
    dx(b + PX) = c * qx(i) - s * qy(i);
    dx(b + PY) = s * qx(i) + c * qy(i);
    dx(b + PHI) = om(i);
    dx(b + QX) = (nx_s(i) - w(i) * ny(i)) / rho_a + om(i) * qy(i) - p.drag * qx(i);
    dx(b + QY) = (ny_s(i) + w(i) * nx(i)) / rho_a - om(i) * qx(i) - p.drag * qy(i);
    dx(b + OM) = (m_s(i) + vx(i) * ny(i) - vy(i) * nx(i)) / rho_i - p.drag * om(i);
  }
  detail::check_rod_rate(dx, "rod_known_rate");
  return dx;
}

/// Unknown part: tendon wrench and gravity, velocity rows of nodes 1..N-1.
inline Vector rod_unknown_rate(const RodParams& p, const Vector& x, const Vector& u) {
  using namespace rod_layout;
  detail::check_rod_state(p, x);
  detail::check_tensions(u);
  const double rho_a = p.density * p.area;
  const double rho_i = p.density * p.inertia;
  Vector dx = Vector::Zero(x.size());
  for (int i = 1; i < p.nodes; ++i) {
    const int b = kNodeDim * i;
    const double phi = x(b + PHI);
    // R^T (0, -g)
    const double gx = -p.gravity * std::sin(phi);
    const double gy = -p.gravity * std::cos(phi);
    dx(b + QX) = gx - p.axial_load * (u(0) + u(1)) / rho_a;
    dx(b + QY) = gy;
    dx(b + OM) = (u(0) - u(1)) * p.tendon_offset / rho_i;
  }
  detail::check_rod_rate(dx, "rod_unknown_rate");
  return dx;
}

struct RodRate {
  Vector known;
  Vector unknown;
  [[nodiscard]] Vector total() const { return known + unknown; }
};

inline RodRate rod_rhs(const RodParams& p, const Vector& x, const Vector& u) {
  return {rod_known_rate(p, x), rod_unknown_rate(p, x, u)};
}

/// Straight, unstrained, at rest.
inline Vector rod_reference_state(const RodParams& p);

/// Total energy: kinetic + elastic + gravitational, trapezoid rule in s.
inline double rod_energy(const RodParams& p, const Vector& x) {
  using namespace rod_layout;
  detail::check_rod_state(p, x);
  const double h = p.spacing();
  double e = 0.0;
  for (int i = 0; i < p.nodes; ++i) {
    const int b = kNodeDim * i;
    const double wt = (i == 0 || i == p.nodes - 1) ? 0.5 * h : h;
    const double dvx = x(b + VX) - p.v_ref_x;
    const double dvy = x(b + VY) - p.v_ref_y;
    const double dw = x(b + W) - p.w_ref;
    const double kin = 0.5 * p.density * p.area * (x(b + QX) * x(b + QX) + x(b + QY) * x(b + QY)) +
                       0.5 * p.density * p.inertia * x(b + OM) * x(b + OM);
    const double ela = 0.5 * (p.youngs * p.area * dvx * dvx + p.shear * p.area * dvy * dvy +
                              p.youngs * p.inertia * dw * dw);
    const double grav = p.density * p.area * p.gravity * x(b + PY);
    e += wt * (kin + ela + grav);
  }
  return e;
}

/// Largest RK4 substep considered safe. The explicit limits of the fastest
/// wave (c = sqrt(max(E, G) / rho)) and of the Kelvin-Voigt diffusion are
/// reduced for the one-sided boundary stencils, which roughly double the
/// spectral radius of the interior operator. The rotation-shear mode
/// (omega^2 = G A / (rho I)) does not shrink with h and bounds coarse grids.
/// The minimum is halved.
inline double rod_stable_substep(const RodParams& p) {
  p.validate();
  const double h = p.spacing();
  const double c = std::sqrt(std::max(p.youngs, p.shear) / p.density);
  double dt = 1.4 * h / c;
  if (p.viscosity > 0) dt = std::min(dt, 0.75 * h * h * p.density / (3.0 * p.viscosity));
  dt = std::min(dt, 2.5 / std::sqrt(p.shear * p.area / (p.density * p.inertia)));
  return 0.5 * dt;
}

inline int rod_substeps(const RodParams& p, double dt) {
  detail::require(dt > 0, "rod_substeps: dt must be > 0");
  return std::max(1, static_cast<int>(std::ceil(dt / rod_stable_substep(p) - 1e-12)));
}

/// Advances dt with `substeps` RK4 steps of f + h. Throws if the energy grows
/// more than tenfold over the call (beyond a floor of EI / L).
inline Vector rod_step(const RodParams& p, const Vector& x, const Vector& u, double dt, int substeps) {
  detail::require(substeps >= 1, "rod_step: substeps must be >= 1");
  const double sub = dt / substeps;
  if (sub > rod_stable_substep(p) * (1.0 + 1e-9)) {
    throw ContractError("rod_step: substep " + detail::num(sub) + " exceeds the stable limit " +
                        detail::num(rod_stable_substep(p)));
  }
  const Rhs rhs = [&p](const Vector& a, const Vector& b) { return rod_rhs(p, a, b).total(); };
  const double e0 = rod_energy(p, x);
  Vector y = x;
  for (int k = 0; k < substeps; ++k) y = rk4_step(rhs, y, u, sub);
  const double floor = p.youngs * p.inertia / p.length;
  const double e1 = rod_energy(p, y);
  if (!std::isfinite(e1) || e1 > 10.0 * std::max(std::abs(e0), floor)) {
    throw NumericalError("rod_step: energy grew from " + detail::num(e0) + " to " +
                         detail::num(e1) + "; use a smaller substep");
  }
  return y;
}

// ---------------------------------------------------------------------------
// statics

struct RodEquilibrium {
  Vector state;
  int shooting_iterations = 0;
  int polish_iterations = 0;
  double residual = 0.0;
};

namespace detail {

/// Static ODE in arclength, y = (px, py, phi, nx, ny, m).
inline Eigen::Matrix<double, 6, 1> rod_static_ode(const RodParams& p, const Eigen::Matrix<double, 6, 1>& y,
                                                  const Vector& u) {
  const double c = std::cos(y(2)), s = std::sin(y(2));
  const double vx = p.v_ref_x + y(3) / (p.youngs * p.area);
  const double vy = p.v_ref_y + y(4) / (p.shear * p.area);
  const double w = p.w_ref + y(5) / (p.youngs * p.inertia);
  const double rho_a = p.density * p.area;
  const double fx = -rho_a * p.gravity * s - p.axial_load * (u(0) + u(1));
  const double fy = -rho_a * p.gravity * c;
  const double l = (u(0) - u(1)) * p.tendon_offset;
  Eigen::Matrix<double, 6, 1> d;
  d << c * vx - s * vy, s * vx + c * vy, w, w * y(4) - fx, -w * y(3) - fy, -(vx * y(4) - vy * y(3)) - l;
  return d;
}

/// RK4 integration of the static ODE from the base; returns values at every node.
inline std::vector<Eigen::Matrix<double, 6, 1>> rod_integrate_static(const RodParams& p, const Eigen::Vector3d& base,
                                                                     const Vector& u) {
  const double h = p.spacing();
  std::vector<Eigen::Matrix<double, 6, 1>> ys(static_cast<std::size_t>(p.nodes));
  Eigen::Matrix<double, 6, 1> y;
  y << 0, 0, 0, base(0), base(1), base(2);
  ys[0] = y;
  for (int i = 1; i < p.nodes; ++i) {
    const auto k1 = rod_static_ode(p, y, u);
    const auto k2 = rod_static_ode(p, y + 0.5 * h * k1, u);
    const auto k3 = rod_static_ode(p, y + 0.5 * h * k2, u);
    const auto k4 = rod_static_ode(p, y + h * k3, u);
    y += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4);
    ys[static_cast<std::size_t>(i)] = y;
  }
  return ys;
}

/// Rod state at rest from internal force and moment at the nodes. Strains
/// follow from the constitutive law, phi and p from trapezoid quadrature.
inline Vector rod_state_from_wrench(const RodParams& p, const Vector& nx, const Vector& ny, const Vector& m) {
  using namespace rod_layout;
  const double h = p.spacing();
  Vector x = Vector::Zero(p.state_dim());
  double phi = 0.0, px = 0.0, py = 0.0;
  double prev_w = 0.0, prev_tx = 0.0, prev_ty = 0.0;
  for (int i = 0; i < p.nodes; ++i) {
    const int b = kNodeDim * i;
    const double vx = p.v_ref_x + nx(i) / (p.youngs * p.area);
    const double vy = p.v_ref_y + ny(i) / (p.shear * p.area);
    const double w = p.w_ref + m(i) / (p.youngs * p.inertia);
    if (i > 0) phi += 0.5 * h * (prev_w + w);
    const double c = std::cos(phi), s = std::sin(phi);
    const double tx = c * vx - s * vy;
    const double ty = s * vx + c * vy;
    if (i > 0) {
      px += 0.5 * h * (prev_tx + tx);
      py += 0.5 * h * (prev_ty + ty);
    }
    x(b + PX) = px;
    x(b + PY) = py;
    x(b + PHI) = phi;
    x(b + VX) = vx;
    x(b + VY) = vy;
    x(b + W) = w;
    prev_w = w;
    prev_tx = tx;
    prev_ty = ty;
  }
  return x;
}

/// Discrete equilibrium residual: rho A q' and rho I omega' of nodes 1..N-1
/// for the rest state built from z = (nx_i, ny_i, m_i), i = 0..N-2.
inline Vector rod_discrete_residual(const RodParams& p, const Vector& z, const Vector& u) {
  using namespace rod_layout;
  const int n = p.nodes;
  Vector nx(n), ny(n), m(n);
  for (int i = 0; i + 1 < n; ++i) {
    nx(i) = z(3 * i);
    ny(i) = z(3 * i + 1);
    m(i) = z(3 * i + 2);
  }
  nx(n - 1) = p.tip_force_x;
  ny(n - 1) = p.tip_force_y;
  m(n - 1) = p.tip_moment;
  const Vector x = rod_state_from_wrench(p, nx, ny, m);
  const Vector rate = rod_known_rate(p, x) + rod_unknown_rate(p, x, u);
  Vector r(3 * (n - 1));
  for (int i = 1; i < n; ++i) {
    const int b = kNodeDim * i;
    r(3 * (i - 1)) = p.density * p.area * rate(b + QX);
    r(3 * (i - 1) + 1) = p.density * p.area * rate(b + QY);
    r(3 * (i - 1) + 2) = p.density * p.inertia * rate(b + OM);
  }
  return r;
}

}  // namespace detail

/// Static equilibrium under tensions u.
///
/// Shooting: Newton (finite-difference Jacobian) on the base force n(0) and
/// moment m(0) so that the RK4-integrated static ODE meets the tip load.
/// The shooting solution then seeds a Newton solve of the same
/// finite-difference equations the dynamic model uses, so the returned state
/// is an exact rest point of rod_rhs. Residual norms are in N/m.
inline RodEquilibrium static_shoot(const RodParams& p, const Vector& u, double tol = 1e-10,
                                   int max_iter = 50) {
  p.validate();
  detail::check_tensions(u);
  detail::require(tol > 0, "static_shoot: tol must be > 0");
  detail::require(max_iter >= 1, "static_shoot: max_iter must be >= 1");
  const int n = p.nodes;
  RodEquilibrium out;

  auto tip_residual = [&](const Eigen::Vector3d& base) {
    const auto ys = detail::rod_integrate_static(p, base, u);
    const auto& tip = ys.back();
    return Eigen::Vector3d(tip(3) - p.tip_force_x, tip(4) - p.tip_force_y, tip(5) - p.tip_moment);
  };

  // straight-rod guess: carry the distributed loads and the tip load to the base
  const double total_axial = p.axial_load * (u(0) + u(1)) * p.length;
  const double moment_per_len = (u(0) - u(1)) * p.tendon_offset;
  Eigen::Vector3d z(p.tip_force_x - total_axial, p.tip_force_y - p.density * p.area * p.gravity * p.length,
                    p.tip_moment + moment_per_len * p.length);
  Eigen::Vector3d r = tip_residual(z);
  const double scale = std::max({1.0, std::abs(z(0)), std::abs(z(1)), std::abs(z(2))});
  int it = 0;
  for (; it < max_iter && r.norm() > tol * 1e-2; ++it) {
    Eigen::Matrix3d jac;
    for (int c = 0; c < 3; ++c) {
      const double step = 1e-7 * std::max(1.0, std::abs(z(c)));
      Eigen::Vector3d zp = z;
      zp(c) += step;
      jac.col(c) = (tip_residual(zp) - r) / step;
    }
    Eigen::Vector3d dz = jac.partialPivLu().solve(-r);
    if (!dz.allFinite()) break;
    double t = 1.0;
    Eigen::Vector3d r_new = tip_residual(z + dz);
    while (!(r_new.norm() < r.norm()) && t > 1e-4) {
      t *= 0.5;
      r_new = tip_residual(z + t * dz);
    }
    z += t * dz;
    r = r_new;
    if (t * dz.norm() < 1e-15 * scale) break;
  }
  out.shooting_iterations = it;
  if (!r.allFinite() || r.norm() > 1e-4 * scale) {
    throw NumericalError("static_shoot: shooting did not converge, tip residual " + detail::num(r.norm()));
  }

  // Newton on the finite-difference equilibrium equations
  const auto ys = detail::rod_integrate_static(p, z, u);
  Vector zz(3 * (n - 1));
  for (int i = 0; i + 1 < n; ++i) {
    zz(3 * i) = ys[static_cast<std::size_t>(i)](3);
    zz(3 * i + 1) = ys[static_cast<std::size_t>(i)](4);
    zz(3 * i + 2) = ys[static_cast<std::size_t>(i)](5);
  }
  Vector res = detail::rod_discrete_residual(p, zz, u);
  int pit = 0;
  for (; pit < max_iter && res.norm() > tol; ++pit) {
    Matrix jac(res.size(), zz.size());
    for (Eigen::Index c = 0; c < zz.size(); ++c) {
      const double step = 1e-7 * std::max(1e-3 * scale, std::abs(zz(c)));
      Vector zp = zz;
      zp(c) += step;
      Vector zm = zz;
      zm(c) -= step;
      jac.col(c) = (detail::rod_discrete_residual(p, zp, u) - detail::rod_discrete_residual(p, zm, u)) / (2 * step);
    }
    const Vector dz = jac.partialPivLu().solve(-res);
    if (!dz.allFinite()) break;
    double t = 1.0;
    Vector res_new = detail::rod_discrete_residual(p, zz + dz, u);
    while (!(res_new.norm() < res.norm()) && t > 1e-4) {
      t *= 0.5;
      res_new = detail::rod_discrete_residual(p, zz + t * dz, u);
    }
    if (!(res_new.norm() < res.norm())) break;
    zz += t * dz;
    res = res_new;
  }
  out.polish_iterations = pit;
  out.residual = res.norm();
  if (!(out.residual <= tol)) {
    throw NumericalError("static_shoot: equilibrium residual " + detail::num(out.residual) +
                         " above tolerance after " + std::to_string(pit) + " iterations");
  }
  Vector nx(n), ny(n), m(n);
  for (int i = 0; i + 1 < n; ++i) {
    nx(i) = zz(3 * i);
    ny(i) = zz(3 * i + 1);
    m(i) = zz(3 * i + 2);
  }
  nx(n - 1) = p.tip_force_x;
  ny(n - 1) = p.tip_force_y;
  m(n - 1) = p.tip_moment;
  out.state = detail::rod_state_from_wrench(p, nx, ny, m);
  return out;
}

/// Unloaded rest configuration (straight for the default v*, w*).
inline Vector rod_reference_state(const RodParams& p) {
  p.validate();
  const Vector zero = Vector::Zero(p.nodes);
  return detail::rod_state_from_wrench(p, zero, zero, zero);
}

// ---------------------------------------------------------------------------
// reduced state and datasets

/// k node indices spread uniformly from base to tip.
inline std::vector<int> downsample_indices(int nodes, int k) {
  detail::require(k >= 2 && k <= nodes, "downsample: need 2 <= k <= node count");
  std::vector<int> idx;
  for (int j = 0; j < k; ++j) {
    idx.push_back(static_cast<int>(std::lround(static_cast<double>(j) * (nodes - 1) / (k - 1))));
  }
  return idx;
}

inline Vector downsample(const Vector& full, int nodes, int k) {
  detail::require(full.size() == rod_layout::kNodeDim * nodes, "downsample: state size does not match node count");
  const auto idx = downsample_indices(nodes, k);
  Vector out(rod_layout::kNodeDim * k);
  for (int j = 0; j < k; ++j) {
    out.segment(rod_layout::kNodeDim * j, rod_layout::kNodeDim) =
        full.segment(rod_layout::kNodeDim * idx[static_cast<std::size_t>(j)], rod_layout::kNodeDim);
  }
  return out;
}

/// Rod as a SplitSystem whose learning state is the k-node reduced state.
/// Trajectories start at the equilibrium of an LHS-sampled tension pair.
inline SplitSystem rod_system(const RodParams& p, int k = 6, double dt = 0.03) {
  using namespace rod_layout;
  p.validate();
  SplitSystem s;
  s.name = "rod";
  s.n = p.state_dim();
  s.m = 2;
  s.f = [p](const Vector& x, const Vector&) { return rod_known_rate(p, x); };
  s.h = [p](const Vector& x, const Vector& u) { return rod_unknown_rate(p, x, u); };
  s.control_bounds = make_box({0.0, 0.0}, {p.max_tension, p.max_tension});
  s.initial_bounds = s.control_bounds;
  s.initial_map = [p](const Vector& u) { return static_shoot(p, u).state; };
  s.observe = [p, k](const Vector& x) { return downsample(x, p.nodes, k); };
  s.observed_dim = kNodeDim * k;
  for (int j = 0; j < k; ++j) {
    const int b = kNodeDim * j;
    s.h_active.insert(s.h_active.end(), {b + QX, b + QY, b + OM});
    s.position_idx.insert(s.position_idx.end(), {b + PX, b + PY});
  }
  s.velocity_idx = {kNodeDim * (k - 1) + QX, kNodeDim * (k - 1) + QY};
  s.substeps = rod_substeps(p, dt);
  return s;
}

/// Indices of (qx, qy, omega) of every node in the full state.
inline std::vector<int> rod_velocity_components(int nodes) {
  using namespace rod_layout;
  std::vector<int> idx;
  for (int i = 0; i < nodes; ++i) idx.insert(idx.end(), {kNodeDim * i + QX, kNodeDim * i + QY, kNodeDim * i + OM});
  return idx;
}

/// Covariance of the velocity components over a set of full states (columns).
inline Matrix rod_velocity_covariance(const Matrix& full_states, int nodes) {
  detail::require(full_states.cols() >= 2, "rod_velocity_covariance: need at least 2 states");
  const auto idx = rod_velocity_components(nodes);
  Matrix v(static_cast<Eigen::Index>(idx.size()), full_states.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) v.row(static_cast<Eigen::Index>(r)) = full_states.row(idx[r]);
  const Vector mean = v.rowwise().mean();
  const Matrix c = v.colwise() - mean;
  Matrix cov = c * c.transpose() / static_cast<double>(full_states.cols() - 1);
  return 0.5 * (cov + cov.transpose());
}

/// Full states of short pilot trajectories, used to set the velocity covariance.
inline Matrix rod_pilot_states(const RodParams& p, int n_traj, int steps, double dt,
                               const ControlPolicySpec& policy, std::uint64_t seed) {
  const SplitSystem sys = rod_system(p, 2, dt);
  const Matrix starts = latin_hypercube(sys.init_box(), n_traj, seed);
  Matrix out(sys.n, n_traj * (steps + 1));
  for (int t = 0; t < n_traj; ++t) {
    const auto us = make_controls(sys.control_bounds, steps, dt, policy,
                                  detail::derive_seed(seed, static_cast<std::uint64_t>(t)));
    const Matrix traj = simulate(sys, sys.initial_state(starts.col(t)),
                                 [&](int k) { return us[static_cast<std::size_t>(k)]; }, steps, dt);
    out.middleCols(t * (steps + 1), steps + 1) = traj;
  }
  return out;
}

struct RodPhaseData {
  PhaseDataset data;
  int failures = 0;
};

/// D2 for the rod: LHS tensions -> equilibrium -> Gaussian velocities.
/// x is the k-node reduced state and known_rate the reduced f. With
/// flow_dt > 0, known_flow holds the reduced state after flowing the full
/// state under f alone for flow_dt. Equilibria that fail to converge are
/// skipped; more than 10% failures is an error.
inline RodPhaseData make_rod_d2(const RodParams& p, int k, const Box& tension_box, const Matrix& velocity_cov,
                                int count, std::uint64_t seed, double flow_dt = 0.0) {
  using namespace rod_layout;
  detail::require(count >= 1, "make_rod_d2: count must be >= 1");
  detail::require(tension_box.dim() == 2, "make_rod_d2: tension box must be 2-D");
  detail::require((tension_box.lo.array() >= 0).all() && (tension_box.hi.array() <= p.max_tension).all(),
                  "make_rod_d2: tension box outside actuator bounds");
  const auto vidx = rod_velocity_components(p.nodes);
  detail::require(velocity_cov.rows() == static_cast<Eigen::Index>(vidx.size()),
                  "make_rod_d2: velocity covariance must be 3N x 3N");
  const Matrix tensions = latin_hypercube(tension_box, count, seed);
  const Matrix vel = sample_velocity_gaussian(velocity_cov, count, detail::derive_seed(seed, 1));

  detail::require(flow_dt >= 0.0, "make_rod_d2: flow_dt must be >= 0");
  const Rhs known = [&p](const Vector& a, const Vector&) { return rod_known_rate(p, a); };
  const int flow_sub = flow_dt > 0.0 ? rod_substeps(p, flow_dt) : 0;

  RodPhaseData out;
  std::vector<Vector> xs, us, rates, flows;
  for (int i = 0; i < count; ++i) {
    const Vector u = tensions.col(i);
    Vector full;
    try {
      full = static_shoot(p, u).state;
    } catch (const NumericalError&) {
      ++out.failures;
      continue;
    }
    for (std::size_t r = 0; r < vidx.size(); ++r) full(vidx[r]) = vel(static_cast<Eigen::Index>(r), i);
    // the base is clamped
    full.segment(QX, 2).setZero();
    full(OM) = 0.0;
    xs.push_back(downsample(full, p.nodes, k));
    us.push_back(u);
    rates.push_back(downsample(rod_known_rate(p, full), p.nodes, k));
    if (flow_sub > 0) {
      Vector y = full;
      for (int j = 0; j < flow_sub; ++j) y = rk4_step(known, y, u, flow_dt / flow_sub);
      flows.push_back(downsample(y, p.nodes, k));
    }
  }
  if (out.failures * 10 > count) {
    throw NumericalError("make_rod_d2: " + std::to_string(out.failures) + " of " + std::to_string(count) +
                         " equilibria failed");
  }
  const auto n_ok = static_cast<Eigen::Index>(xs.size());
  out.data.x.resize(kNodeDim * k, n_ok);
  out.data.u.resize(2, n_ok);
  out.data.known_rate.resize(kNodeDim * k, n_ok);
  for (Eigen::Index i = 0; i < n_ok; ++i) {
    out.data.x.col(i) = xs[static_cast<std::size_t>(i)];
    out.data.u.col(i) = us[static_cast<std::size_t>(i)];
    out.data.known_rate.col(i) = rates[static_cast<std::size_t>(i)];
  }
  if (flow_sub > 0) {
    out.data.flow_dt = flow_dt;
    out.data.known_flow.resize(kNodeDim * k, n_ok);
    for (Eigen::Index i = 0; i < n_ok; ++i) out.data.known_flow.col(i) = flows[static_cast<std::size_t>(i)];
  }
  return out;
}

}  // namespace pikoop

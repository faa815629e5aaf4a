#pragma once

// Koopman operator identification: L-EDMDc / B-EDMDc (trajectory data),
// gEDMD (phase samples + known vector field) and the physics-informed split
// fit K = Kf_half * Kh * Kf_half, plus lifted rollouts.

#include <Eigen/Eigenvalues>

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pikoop/dictionary.hpp"
#include "pikoop/errors.hpp"
#include "pikoop/numkit.hpp"
#include "pikoop/systems.hpp"

namespace pikoop {

enum class Method { L, B, PI };
enum class KfSource { generator, flowmap };
/// Center of the l1 penalty for split factors fitted from sample pairs
/// (Kh, and Kf on the flow-map route).
enum class SplitPrior { identity, zero };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::L: return "l";
    case Method::B: return "b";
    case Method::PI: return "pi";
  }
  return "?";
}
inline std::string to_string(KfSource s) { return s == KfSource::generator ? "generator" : "flowmap"; }
inline std::string to_string(SplitPrior p) { return p == SplitPrior::identity ? "identity" : "zero"; }

/// alpha = scale * N (N = samples in that least-squares problem) when
/// proportional, else alpha = scale.
struct AlphaRule {
  bool proportional = true;
  double scale = 0.01;

  [[nodiscard]] double operator()(int samples) const {
    return proportional ? scale * samples : scale;
  }
  static AlphaRule constant(double a) { return {false, a}; }
};

struct FitOptions {
  AlphaRule alpha;
  double rank_tol = 0.0;
  /// Kh rows replaced by identity rows instead of fitted.
  std::optional<std::vector<int>> kh_row_mask;
  KfSource kf_source = KfSource::generator;
  DelayRows delay_rows = DelayRows::shift;
  SplitPrior split_prior = SplitPrior::identity;
  int lasso_max_iter = 5000;
  double lasso_tol = 1e-10;
  double spectral_tol = 1e-6;
};

/// Diagnostics attached to a fitted model. Flags, not errors.
struct FitReport {
  bool lasso_converged = true;
  bool unstable = false;
  double spectral_radius = 0.0;
  std::vector<std::string> notes;

  void merge(const FitReport& o) {
    lasso_converged = lasso_converged && o.lasso_converged;
    unstable = unstable || o.unstable;
    spectral_radius = std::max(spectral_radius, o.spectral_radius);
    notes.insert(notes.end(), o.notes.begin(), o.notes.end());
  }
};

struct KoopmanModel {
  Method method = Method::L;
  double dt = 0.0;
  DictionarySpec spec;
  DelayRows delay_rows = DelayRows::shift;
  Matrix k;
  /// PI only.
  Matrix kf_half;
  Matrix kh;
  FitReport report;
};

// ---------------------------------------------------------------------------
// data matrices

/// Theta(X, U) and Theta(X', U) for D1, columns in record order. Delay blocks
/// come from the preceding records of the same trajectory.
inline std::pair<Matrix, Matrix> lifted_pairs(const DictionarySpec& spec, const TrajectoryDataset& d1) {
  detail::require(d1.size() >= 1, "lifted_pairs: empty trajectory dataset");
  detail::require(d1.state_dim() == spec.state_dim() && d1.control_dim() == spec.control_dim(),
                  "lifted_pairs: dataset dimensions do not match dictionary");
  Matrix theta(spec.lifted_dim(), d1.size());
  Matrix theta_next(spec.lifted_dim(), d1.size());
  for (const auto& [begin, end] : d1.segments()) {
    DelayBuffer buf(spec.delays());
    for (int i = begin; i < end; ++i) {
      const Vector x = d1.x.col(i);
      const Vector u = d1.u.col(i);
      theta.col(i) = lift(spec, x, u, buf);
      buf.push(x);
      theta_next.col(i) = lift(spec, d1.xp.col(i), u, buf);
    }
  }
  return {std::move(theta), std::move(theta_next)};
}

/// Theta(X2, U2) for phase samples; no history, so delay blocks repeat x.
inline Matrix lift_phase(const DictionarySpec& spec, const Matrix& x, const Matrix& u) {
  Matrix theta(spec.lifted_dim(), x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) theta.col(i) = lift(spec, x.col(i), u.col(i));
  return theta;
}

namespace detail {

inline Matrix select_rows(const Matrix& a, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = a.row(rows[i]);
  return out;
}

inline Matrix select_cols(const Matrix& a, const std::vector<int>& cols) {
  Matrix out(a.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = a.col(cols[i]);
  return out;
}

/// Fits rows `rows` of an operator: A[rows] = lasso(G, Y[rows] - P G) + P, where
/// P is the identity on those rows (prior = identity) or zero. The regressor G
/// may cover a column subset `cols` of the operator.
inline void fit_rows(Matrix& op, const std::vector<int>& rows, const std::vector<int>& cols,
                     const Matrix& g, const Matrix& y_rows, SplitPrior prior,
                     const FitOptions& opts, FitReport& report) {
  if (rows.empty()) return;
  const Eigen::Index nr = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index nc = static_cast<Eigen::Index>(cols.size());
  Matrix p = Matrix::Zero(nr, nc);
  if (prior == SplitPrior::identity) {
    for (Eigen::Index i = 0; i < nr; ++i) {
      for (Eigen::Index j = 0; j < nc; ++j) {
        if (cols[static_cast<std::size_t>(j)] == rows[static_cast<std::size_t>(i)]) p(i, j) = 1.0;
      }
    }
  }
  const Matrix target = prior == SplitPrior::identity ? Matrix(y_rows - p * g) : y_rows;
  const double alpha = opts.alpha(static_cast<int>(g.cols()));
  LassoResult res = lasso_solve(g, target, alpha, opts.lasso_max_iter, opts.lasso_tol);
  if (!res.converged) {
    report.lasso_converged = false;
    report.notes.push_back("lasso hit max_iter (" + std::to_string(res.iterations) + ")");
  }
  const Matrix a = res.coef + p;
  for (Eigen::Index i = 0; i < nr; ++i) {
    op.row(rows[static_cast<std::size_t>(i)]).setZero();
    for (Eigen::Index j = 0; j < nc; ++j) op(rows[static_cast<std::size_t>(i)], cols[static_cast<std::size_t>(j)]) = a(i, j);
  }
}

inline std::vector<int> all_indices(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

inline double spectral_radius(const Matrix& k) {
  Eigen::EigenSolver<Matrix> es(k, false);
  if (es.info() != Eigen::Success) throw NumericalError("spectral_radius: eigensolver failed");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// trajectory-based EDMD

/// L-EDMDc (linear form) or B-EDMDc (bilinear form) from trajectory pairs.
inline KoopmanModel edmd_fit(const DictionarySpec& spec, const TrajectoryDataset& d1,
                             const FitOptions& opts = {}) {
  detail::require(d1.size() >= 1, "edmd_fit: empty trajectory dataset");
  const auto [theta, theta_next] = lifted_pairs(spec, d1);
  const RowStructure rs = row_structure(spec, opts.delay_rows);

  KoopmanModel model;
  model.method = spec.form() == DictForm::linear ? Method::L : Method::B;
  model.dt = d1.dt;
  model.spec = spec;
  model.delay_rows = opts.delay_rows;
  model.k = Matrix::Zero(spec.lifted_dim(), spec.lifted_dim());
  detail::fit_rows(model.k, rs.learned, detail::all_indices(spec.lifted_dim()), theta,
                   detail::select_rows(theta_next, rs.learned), SplitPrior::zero, opts, model.report);
  install_structure(model.k, rs);
  return model;
}

// ---------------------------------------------------------------------------
// generator (gEDMD)

/// Generator L^f from phase samples. Rows of evolving observables regress
/// J = (d Theta / d x) f on the instantaneous columns of Theta; all other rows
/// and columns are zero. Rates come from d2.known_rate when present, else from f.
inline Matrix gedmd_fit(const DictionarySpec& spec, const PhaseDataset& d2, const Rhs& f,
                        const FitOptions& opts = {}, FitReport* report = nullptr) {
  detail::require(d2.size() >= 1, "gedmd_fit: empty phase dataset");
  detail::require(d2.x.rows() == spec.state_dim() && d2.u.rows() == spec.control_dim(),
                  "gedmd_fit: dataset dimensions do not match dictionary");
  const bool have_rates = d2.known_rate.size() > 0;
  detail::require(have_rates || static_cast<bool>(f), "gedmd_fit: need f or precomputed known rates");

  const RowStructure hs = half_step_structure(spec);
  const std::vector<int> cols = instantaneous_columns(spec);
  Matrix theta_inst(static_cast<Eigen::Index>(cols.size()), d2.size());
  Matrix jac_f(static_cast<Eigen::Index>(hs.learned.size()), d2.size());
  for (int i = 0; i < d2.size(); ++i) {
    const Vector x = d2.x.col(i);
    const Vector u = d2.u.col(i);
    Vector rate;
    if (have_rates) {
      rate = d2.known_rate.col(i);
    } else {
      try {
        rate = f(x, u);
      } catch (const std::exception& e) {
        throw NumericalError("gedmd_fit: f failed on sample " + std::to_string(i) + ": " + e.what());
      }
    }
    if (rate.size() != spec.state_dim() || !rate.allFinite()) {
      throw NumericalError("gedmd_fit: invalid known rate on sample " + std::to_string(i));
    }
    const Vector z = lift(spec, x, u);
    const Vector j = jacobian_x(spec, x, u) * rate;
    for (std::size_t c = 0; c < cols.size(); ++c) theta_inst(static_cast<Eigen::Index>(c), i) = z(cols[c]);
    for (std::size_t r = 0; r < hs.learned.size(); ++r) jac_f(static_cast<Eigen::Index>(r), i) = j(hs.learned[r]);
  }
  Matrix gen = Matrix::Zero(spec.lifted_dim(), spec.lifted_dim());
  FitReport local;
  detail::fit_rows(gen, hs.learned, cols, theta_inst, jac_f, SplitPrior::zero, opts, local);
  if (report) report->merge(local);
  return gen;
}

/// Kf_half = exp(dt/2 * L^f) with the half-step row map installed. A spectral
/// radius above 1 + opts.spectral_tol flags the result unstable.
inline Matrix kf_from_generator(const Matrix& gen, double dt, const DictionarySpec& spec,
                                const FitOptions& opts = {}, FitReport* report = nullptr) {
  detail::require(gen.rows() == gen.cols(), "kf_from_generator: generator must be square");
  detail::require(gen.rows() == spec.lifted_dim(), "kf_from_generator: size does not match dictionary");
  detail::require(dt > 0.0, "kf_from_generator: dt must be > 0");
  Matrix kf = matexp(0.5 * dt * gen);
  install_structure(kf, half_step_structure(spec));
  if (report) {
    const double rho = detail::spectral_radius(kf);
    report->spectral_radius = std::max(report->spectral_radius, rho);
    if (rho > 1.0 + opts.spectral_tol) {
      report->unstable = true;
      report->notes.push_back("Kf_half spectral radius " + detail::num(rho));
    }
  }
  return kf;
}

/// Known-term flow over one interval: (x, u) -> F^f_tau(x, u).
using Flow = std::function<Vector(const Vector& x, const Vector& u)>;

/// RK4 flow of f over tau with `substeps` steps.
inline Flow rk4_flow(Rhs f, double tau, int substeps = 4) {
  return [f = std::move(f), tau, substeps](const Vector& x, const Vector& u) {
    Vector y = x;
    for (int k = 0; k < substeps; ++k) y = rk4_step(f, y, u, tau / substeps);
    return y;
  };
}

/// Kf_half fitted directly on pairs (x_i, F^f_{dt/2}(x_i, u_i)). Uses
/// d2.known_flow when present (it must be over dt/2), else `flow`.
inline Matrix kf_from_flowmap(const DictionarySpec& spec, const PhaseDataset& d2, const Flow& flow,
                              double dt, const FitOptions& opts = {}, FitReport* report = nullptr) {
  detail::require(d2.size() >= 1, "kf_from_flowmap: empty phase dataset");
  const bool have_flow = d2.known_flow.size() > 0;
  if (have_flow) {
    detail::require(std::abs(d2.flow_dt - 0.5 * dt) <= 1e-12 * std::max(1.0, dt),
                    "kf_from_flowmap: precomputed flow interval must be dt/2");
  }
  detail::require(have_flow || static_cast<bool>(flow), "kf_from_flowmap: need a flow map");

  const RowStructure hs = half_step_structure(spec);
  const std::vector<int> cols = instantaneous_columns(spec);
  Matrix theta_inst(static_cast<Eigen::Index>(cols.size()), d2.size());
  Matrix target(static_cast<Eigen::Index>(hs.learned.size()), d2.size());
  for (int i = 0; i < d2.size(); ++i) {
    const Vector x = d2.x.col(i);
    const Vector u = d2.u.col(i);
    const Vector xf = have_flow ? Vector(d2.known_flow.col(i)) : flow(x, u);
    if (!xf.allFinite()) throw NumericalError("kf_from_flowmap: non-finite flow on sample " + std::to_string(i));
    const Vector z = lift(spec, x, u);
    const Vector zf = lift(spec, xf, u);
    for (std::size_t c = 0; c < cols.size(); ++c) theta_inst(static_cast<Eigen::Index>(c), i) = z(cols[c]);
    for (std::size_t r = 0; r < hs.learned.size(); ++r) target(static_cast<Eigen::Index>(r), i) = zf(hs.learned[r]);
  }
  Matrix kf = Matrix::Identity(spec.lifted_dim(), spec.lifted_dim());
  FitReport local;
  detail::fit_rows(kf, hs.learned, cols, theta_inst, target, opts.split_prior, opts, local);
  install_structure(kf, hs);
  local.spectral_radius = detail::spectral_radius(kf);
  if (local.spectral_radius > 1.0 + opts.spectral_tol) {
    local.unstable = true;
    local.notes.push_back("Kf_half spectral radius " + detail::num(local.spectral_radius));
  }
  if (report) report->merge(local);
  return kf;
}

// ---------------------------------------------------------------------------
// split fit

/// Kh from trajectory data given Kf_half: regress (Kf_half)^+ Theta(X', U) on
/// Kf_half Theta(X, U). Rows in opts.kh_row_mask, and every non-evolving row,
/// are identity rows.
inline Matrix kh_fit(const Matrix& kf_half, const DictionarySpec& spec, const TrajectoryDataset& d1,
                     const FitOptions& opts = {}, FitReport* report = nullptr) {
  const int mdim = spec.lifted_dim();
  detail::require(kf_half.rows() == mdim && kf_half.cols() == mdim, "kh_fit: Kf_half must be M x M");
  detail::require(d1.size() >= 1, "kh_fit: empty trajectory dataset");
  if (opts.kh_row_mask) {
    for (int r : *opts.kh_row_mask) {
      detail::require(r >= 0 && r < mdim, "kh_fit: mask index out of range");
    }
  }
  const auto [theta, theta_next] = lifted_pairs(spec, d1);
  const Matrix g = kf_half * theta;
  const Matrix y = pinv(kf_half, opts.rank_tol) * theta_next;

  std::vector<int> rows;
  for (int r : half_step_structure(spec).learned) {
    const bool masked = opts.kh_row_mask &&
                        std::find(opts.kh_row_mask->begin(), opts.kh_row_mask->end(), r) !=
                            opts.kh_row_mask->end();
    if (!masked) rows.push_back(r);
  }
  Matrix kh = Matrix::Identity(mdim, mdim);
  FitReport local;
  detail::fit_rows(kh, rows, detail::all_indices(mdim), g, detail::select_rows(y, rows),
                   opts.split_prior, opts, local);
  if (report) report->merge(local);
  return kh;
}

/// Strang composition Kf_half * Kh * Kf_half.
inline Matrix compose_split(const Matrix& kf_half, const Matrix& kh) {
  detail::require(kf_half.rows() == kf_half.cols() && kh.rows() == kh.cols() &&
                      kf_half.rows() == kh.rows(),
                  "compose_split: operators must be square and conformable");
  return kf_half * kh * kf_half;
}

/// PI-EDMDc: Kf_half from phase samples and the known term (generator or
/// flow-map route), Kh from trajectories, composed by Strang splitting. The
/// full-step row map is installed on the composed operator; its learned rows
/// equal the triple product exactly.
inline KoopmanModel pi_edmdc_fit(const DictionarySpec& spec, const TrajectoryDataset& d1,
                                 const PhaseDataset& d2, const Rhs& f_known, double dt,
                                 const FitOptions& opts = {}) {
  detail::require(d1.size() >= 1, "pi_edmdc_fit: D1 must be non-empty");
  detail::require(d2.size() >= 1, "pi_edmdc_fit: D2 must be non-empty");
  KoopmanModel model;
  model.method = Method::PI;
  model.dt = dt;
  model.spec = spec;
  model.delay_rows = opts.delay_rows;

  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const ContractError& e) {
      throw ContractError(std::string("pi_edmdc_fit [") + name + "]: " + e.what());
    } catch (const std::exception& e) {
      throw NumericalError(std::string("pi_edmdc_fit [") + name + "]: " + e.what());
    }
  };

  if (opts.kf_source == KfSource::generator) {
    const Matrix gen = stage("generator", [&] { return gedmd_fit(spec, d2, f_known, opts, &model.report); });
    model.kf_half = stage("exponential", [&] { return kf_from_generator(gen, dt, spec, opts, &model.report); });
  } else {
    Flow flow;
    if (d2.known_flow.size() == 0) {
      detail::require(static_cast<bool>(f_known), "pi_edmdc_fit: flow-map route needs f or known_flow");
      flow = rk4_flow(f_known, 0.5 * dt);
    }
    model.kf_half = stage("flowmap", [&] { return kf_from_flowmap(spec, d2, flow, dt, opts, &model.report); });
  }
  model.kh = stage("kh", [&] { return kh_fit(model.kf_half, spec, d1, opts, &model.report); });
  model.k = compose_split(model.kf_half, model.kh);
  install_structure(model.k, row_structure(spec, opts.delay_rows));
  return model;
}

// ---------------------------------------------------------------------------
// prediction

struct RolloutResult {
  /// Column k is the predicted state after k steps (column 0 is x0).
  Matrix states;
  /// First step whose prediction was non-finite; states stop before it. -1 if none.
  int diverged_at = -1;
};

/// Lifted prediction with re-lifting: each step lifts (x_k, history, u_k),
/// applies K, and keeps the state block as x_{k+1}.
inline RolloutResult rollout(const KoopmanModel& model, const Vector& x0, const std::vector<Vector>& u_seq) {
  detail::require(!u_seq.empty(), "rollout: control sequence must be non-empty");
  detail::require(x0.size() == model.spec.state_dim(), "rollout: x0 has wrong dimension");
  RolloutResult out;
  std::vector<Vector> states{x0};
  DelayBuffer buf(model.spec.delays());
  Vector x = x0;
  for (std::size_t k = 0; k < u_seq.size(); ++k) {
    const Vector z = lift(model.spec, x, u_seq[k], buf);
    const Vector xn = (model.k.topRows(model.spec.state_dim()) * z);
    if (!xn.allFinite()) {
      out.diverged_at = static_cast<int>(k) + 1;
      break;
    }
    buf.push(x);
    x = xn;
    states.push_back(x);
  }
  out.states.resize(x0.size(), static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) out.states.col(static_cast<Eigen::Index>(i)) = states[i];
  return out;
}

}  // namespace pikoop

// Acceptance checks. `acceptance <n>` runs criterion n (1..9) and prints one
// PASS/FAIL line; `acceptance` alone runs all of them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "../unit/test_util.hpp"
#include "pikoop/harness.hpp"

#ifndef PIKOOP_SOURCE_DIR
#define PIKOOP_SOURCE_DIR "."
#endif

using namespace pikoop;
using namespace pikoop::rod_layout;
using pikoop::testing::random_matrix;
using pikoop::testing::random_vector;
using pikoop::testing::taylor_exp;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string sfmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void check(Outcome& o, bool ok, const std::string& what) {
  if (!ok) o.pass = false;
  if (!o.detail.empty()) o.detail += "; ";
  o.detail += what + (ok ? "" : " [failed]");
}

FitOptions exact_opts() {
  FitOptions o;
  o.alpha = AlphaRule::constant(0.0);
  return o;
}

Matrix stable_matrix(int n, std::mt19937_64& rng) {
  Matrix a = random_matrix(n, n, rng);
  const double shift = Eigen::EigenSolver<Matrix>(a).eigenvalues().real().maxCoeff() + 0.5;
  return a - shift * Matrix::Identity(n, n);
}

/// Least-squares slope of y against x.
double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::string config_path(const std::string& name) {
  return (std::filesystem::path(PIKOOP_SOURCE_DIR) / "examples_cfg" / name).string();
}

double mean_rollout_error(const KoopmanModel& model, const TrajectoryDataset& test) {
  double total = 0.0;
  int count = 0;
  for (const auto& [b, e] : test.segments()) {
    std::vector<Vector> us;
    for (int i = b; i < e; ++i) us.push_back(test.u.col(i));
    const auto r = rollout(model, test.x.col(b), us);
    if (r.diverged_at >= 0) return std::numeric_limits<double>::infinity();
    for (int i = b; i < e; ++i) {
      total += (r.states.col(i - b + 1) - test.xp.col(i)).squaredNorm();
      ++count;
    }
  }
  return total / count;
}

// 1. exact linear recovery
Outcome linear_recovery() {
  Outcome o;
  std::mt19937_64 rng(101);
  const double dt = 0.1;
  const Matrix a = stable_matrix(3, rng);
  const Matrix b = random_matrix(3, 1, rng);
  // zero-order hold from the augmented exponential, Taylor oracle
  Matrix aug = Matrix::Zero(4, 4);
  aug.topLeftCorner(3, 3) = a * dt;
  aug.topRightCorner(3, 1) = b * dt;
  const Matrix e = taylor_exp(aug);
  Matrix pair(3, 4);
  pair << e.topLeftCorner(3, 3), e.topRightCorner(3, 1);

  TrajectoryDataset d1;
  d1.dt = dt;
  d1.x = random_matrix(3, 20, rng);
  d1.u = random_matrix(1, 20, rng);
  d1.xp = pair.leftCols(3) * d1.x + pair.rightCols(1) * d1.u;
  for (int i = 0; i < 20; ++i) {
    d1.traj.push_back(i);
    d1.step.push_back(0);
  }
  const auto model = edmd_fit(DictionarySpec::linear(3, 1), d1, exact_opts());
  const double err_d = (model.k.topRows(3) - pair).norm();
  check(o, err_d <= 1e-7, "[A_d B_d] error " + sfmt("%.2e", err_d));

  PhaseDataset d2;
  d2.x = random_matrix(3, 20, rng);
  d2.u = random_matrix(1, 20, rng);
  const Rhs f = [&](const Vector& x, const Vector& u) { return Vector(a * x + b * u); };
  const Matrix gen = gedmd_fit(DictionarySpec::linear(3, 1), d2, f, exact_opts());
  Matrix ab(3, 4);
  ab << a, b;
  const double err_c = (gen.topRows(3) - ab).norm();
  check(o, err_c <= 1e-6, "[A B] error " + sfmt("%.2e", err_c));
  return o;
}

// 2. matrix exponential against the Taylor oracle
Outcome matexp_oracle() {
  Outcome o;
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    Matrix a = random_matrix(8, 8, rng);
    const double target = std::uniform_real_distribution<double>(0.01, 2.0)(rng);
    a *= target / a.cwiseAbs().colwise().sum().maxCoeff();
    worst = std::max(worst, pikoop::testing::rel_fro(matexp(a), taylor_exp(a)));
  }
  check(o, worst <= 1e-10, "worst relative error " + sfmt("%.2e", worst) + " over 100 matrices");
  return o;
}

// 3. Strang splitting order
Outcome strang_order() {
  Outcome o;
  std::mt19937_64 rng(303);
  const std::vector<double> ts = {0.1, 0.05, 0.025, 0.0125};
  double lo = 1e9, hi = -1e9;
  for (int pair = 0; pair < 5; ++pair) {
    const Matrix a = random_matrix(4, 4, rng);
    const Matrix b = random_matrix(4, 4, rng);
    // one step errs by O(t^3); n = 1/t steps over a unit horizon by O(t^2)
    const Matrix exact = taylor_exp(a + b);
    std::vector<double> lt, lg;
    for (double t : ts) {
      const Matrix step = compose_split(matexp(a * t / 2), matexp(b * t));
      Matrix acc = Matrix::Identity(4, 4);
      for (long k = 0; k < std::lround(1.0 / t); ++k) acc = step * acc;
      lt.push_back(std::log(t));
      lg.push_back(std::log((acc - exact).norm()));
    }
    const double s = slope(lt, lg);
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  check(o, lo >= 1.8 && hi <= 2.2, "global-order slopes in [" + sfmt("%.3f", lo) + ", " + sfmt("%.3f", hi) + "]");

  double worst = 0.0;
  for (int pair = 0; pair < 5; ++pair) {
    const Matrix q = random_matrix(4, 4, rng) + 4 * Matrix::Identity(4, 4);
    const Matrix qi = q.inverse();
    const Matrix a = q * random_vector(4, rng).asDiagonal() * qi;
    const Matrix b = q * random_vector(4, rng).asDiagonal() * qi;
    worst = std::max(worst, (compose_split(matexp(a / 2), matexp(b)) - matexp(a + b)).norm());
  }
  check(o, worst <= 1e-10, "commuting pairs error " + sfmt("%.2e", worst));
  return o;
}

const Aggregate* find_agg(const std::vector<Aggregate>& aggs, Method m, int d1, int d2 = -1) {
  for (const auto& a : aggs) {
    if (a.method == m && a.d1_size == d1 && (d2 < 0 || a.d2_size == d2)) return &a;
  }
  return nullptr;
}

std::vector<double> pi_over_l(const std::vector<Aggregate>& aggs, const std::vector<int>& grid) {
  std::vector<double> r;
  for (int d1 : grid) {
    const auto* l = find_agg(aggs, Method::L, d1);
    const auto* pi = find_agg(aggs, Method::PI, d1);
    r.push_back(l && pi ? pi->shape.median / l->shape.median : std::nan(""));
  }
  return r;
}

std::string list(const std::vector<int>& grid, const std::vector<double>& r) {
  std::string s;
  for (std::size_t i = 0; i < r.size(); ++i) {
    s += (i ? " " : "") + std::to_string(grid[i]) + ":" + sfmt("%.3g", r[i]);
  }
  return s;
}

// 4. data efficiency on forced Duffing
Outcome data_efficiency() {
  Outcome o;
  ExperimentConfig c = load_config(config_path("duffing_efficiency.ini"));
  const auto grid = c.d1_grid();
  const auto ratios = pi_over_l(run_sweep(c).aggregates(), grid);
  double small_max = 0.0;
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] <= 128) small_max = std::max(small_max, ratios[i]);
    lx.push_back(std::log(grid[i]));
    ly.push_back(std::log(ratios[i]));
  }
  check(o, small_max <= 0.1, "PI/L median shape ratio " + list(grid, ratios));
  const double s = slope(lx, ly);
  check(o, ratios.back() > small_max && s > 0,
        "advantage shrinks: log-log slope " + sfmt("%.3f", s));

  // same sweep at the default alpha rule, reported only
  c.fit.alpha = AlphaRule{};
  const auto ref = pi_over_l(run_sweep(c).aggregates(), grid);
  o.detail += "; at alpha = 0.01 N: " + list(grid, ref);
  return o;
}

// 5. degenerate splits
Outcome degeneracies() {
  Outcome o;
  const auto sys = duffing();
  const double dt = 0.05;
  const DictionarySpec spec(2, 1, BaseKind::poly, 3, 0, DictForm::linear);
  {
    const auto d1 = make_d1(sys, 3, 40, dt, {}, 31);
    const auto d2 = sample_phase_lhs(sys.state_bounds, sys.control_bounds, 64, 32);
    const Rhs zero = [](const Vector& x, const Vector&) { return Vector(Vector::Zero(x.size())); };
    FitOptions opts;
    opts.split_prior = SplitPrior::zero;
    opts.lasso_max_iter = 20000;
    const auto pi = pi_edmdc_fit(spec, d1, d2, zero, dt, opts);
    const auto l = edmd_fit(spec, d1, opts);
    double worst = 0.0;
    for (int r : row_structure(spec).learned) {
      worst = std::max(worst, (pi.k.row(r) - l.k.row(r)).cwiseAbs().maxCoeff());
    }
    check(o, worst <= 1e-9, "f = 0: max learned-row difference " + sfmt("%.2e", worst));
  }
  {
    SplitSystem known = sys;
    known.h = [n = sys.n](const Vector&, const Vector&) { return Vector(Vector::Zero(n)); };
    const auto d1 = make_d1(known, 1, 4, dt, {}, 41);
    const auto d2 = sample_phase_lhs(known.state_bounds, known.control_bounds, 4096, 42);
    const auto test = make_d1(known, 10, 100, dt, {}, 43);
    const double e_pi = mean_rollout_error(pi_edmdc_fit(spec, d1, d2, known.f, dt), test);
    const double e_l = mean_rollout_error(edmd_fit(spec, d1), test);
    check(o, e_pi <= e_l, "h = 0, |D1| = 4: rollout MSE PI " + sfmt("%.3g", e_pi) + " vs L " + sfmt("%.3g", e_l));
  }
  return o;
}

// 6. LASSO
Outcome lasso_behaviour() {
  Outcome o;
  std::mt19937_64 rng(2024);
  const Matrix g = random_matrix(20, 50, rng);
  Matrix a0 = Matrix::Zero(3, 20);
  a0(0, 2) = 1.5;
  a0(0, 7) = -0.8;
  a0(1, 0) = 0.3;
  a0(1, 19) = 2.0;
  a0(2, 5) = -1.1;
  const Matrix y = a0 * g + 0.05 * random_matrix(3, 50, rng);

  const double err = (lasso_solve(g, y, 0.0).coef - lstsq(g, y)).cwiseAbs().maxCoeff();
  check(o, err <= 1e-8, "alpha = 0 vs lstsq " + sfmt("%.2e", err));
  long prev = std::numeric_limits<long>::max();
  bool mono = true;
  std::string counts;
  for (double alpha : {0.01, 0.1, 1.0, 10.0}) {
    const long nz = (lasso_solve(g, y, alpha, 20000, 1e-12).coef.array() != 0.0).count();
    mono = mono && nz <= prev;
    prev = nz;
    counts += (counts.empty() ? "" : " ") + std::to_string(nz);
  }
  check(o, mono, "nonzeros over alpha {0.01, 0.1, 1, 10}: " + counts);
  return o;
}

Vector tensions(double a, double b) {
  Vector u(2);
  u << a, b;
  return u;
}

// 7. rod statics and energy
Outcome rod_statics() {
  Outcome o;
  {
    RodParams p;
    const double ei = p.youngs * p.inertia;
    p.tip_moment = 0.8 * ei / p.length;
    const auto eq = static_shoot(p, tensions(0, 0));
    const double expected = p.tip_moment * p.length / ei;
    const double rel = std::abs(eq.state(kNodeDim * (p.nodes - 1) + PHI) / expected - 1.0);
    check(o, rel <= 0.01, "tip angle vs ML/EI " + sfmt("%.2e", rel));
  }
  {
    const RodParams p;
    double worst = 0.0;
    for (const auto& u : {tensions(4, 1), tensions(0.3, 2.2), tensions(5, 0)}) {
      Vector a = static_shoot(p, u).state;
      const Vector b = static_shoot(p, tensions(u(1), u(0))).state;
      for (Eigen::Index k = 0; k < a.size(); k += kNodeDim) {
        for (int c : {PY, PHI, VY, W, QY, OM}) a(k + c) = -a(k + c);
      }
      worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
    }
    check(o, worst <= 1e-8, "tendon-swap mirror " + sfmt("%.2e", worst));
  }
  {
    RodParams p;
    p.viscosity = 0.0;
    p.drag = 0.0;
    Vector x = static_shoot(p, tensions(2, 0)).state;
    const double e0 = rod_energy(p, x);
    const double sub = rod_stable_substep(p);
    const Rhs rhs = [&](const Vector& a, const Vector& b) { return rod_rhs(p, a, b).total(); };
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
      x = rk4_step(rhs, x, tensions(0, 0), sub);
      worst = std::max(worst, std::abs(rod_energy(p, x) / e0 - 1.0));
    }
    check(o, worst <= 0.01, "energy drift over 1000 substeps " + sfmt("%.2e", worst));
  }
  return o;
}

// 8. rod |D2| sweep: velocity error less sensitive to |D2| than shape error
Outcome rod_sweep() {
  Outcome o;
  const ExperimentConfig c = load_config(config_path("rod_sweep.ini"));
  const auto rep = run_sweep(c);
  const auto d2_grid = c.d2_grid();
  const int d1 = c.d1_grid().front();
  // per-replicate medians, then the median over replicates
  std::vector<double> shape, vel;
  for (int d2 : d2_grid) {
    std::vector<double> s_rep, v_rep;
    for (int r = 0; r < c.replicates; ++r) {
      std::vector<ErrorRow> rows;
      for (const auto& cell : rep.cells) {
        if (cell.method == Method::PI && cell.d1_size == d1 && cell.d2_size == d2 && cell.replicate == r) {
          rows.insert(rows.end(), cell.rows.begin(), cell.rows.end());
        }
      }
      const auto aggs = aggregate(rows);
      if (aggs.empty()) continue;
      s_rep.push_back(aggs.front().shape.median);
      v_rep.push_back(aggs.front().vel.median);
    }
    shape.push_back(summarize(s_rep).median);
    vel.push_back(summarize(v_rep).median);
  }
  auto spread = [](const std::vector<double>& v) {
    return (*std::max_element(v.begin(), v.end()) - *std::min_element(v.begin(), v.end())) / summarize(v).median;
  };
  std::string vals;
  for (std::size_t i = 0; i < d2_grid.size(); ++i) {
    vals += (i ? " " : "") + std::to_string(d2_grid[i]) + ":(" + sfmt("%.3g", shape[i]) + ", " + sfmt("%.3g", vel[i]) + ")";
  }
  const double ss = spread(shape), vs = spread(vel);
  check(o, vs < ss, "relative spread velocity " + sfmt("%.3f", vs) + " vs shape " + sfmt("%.3f", ss) +
                        "; |D2|:(shape, vel) " + vals);
  return o;
}

// 9. determinism of sweep reports
Outcome determinism() {
  Outcome o;
  ExperimentConfig c = load_config(config_path("duffing_quick.ini"));
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "pikoop_acceptance_9";
  fs::remove_all(root);
  std::vector<std::string> texts;
  for (int run = 0; run < 3; ++run) {
    SweepOptions so;
    so.jobs = run == 2 ? 2 : 1;
    const auto dir = (root / std::to_string(run)).string();
    write_report(run_sweep(c, so), c, dir);
    texts.push_back(io::detail::read_text((fs::path(dir) / "report.csv").string()));
  }
  check(o, !texts[0].empty() && texts[0] == texts[1], "two identical sweeps give byte-identical report.csv");
  check(o, texts[0] == texts[2], "jobs = 2 matches jobs = 1");
  fs::remove_all(root);
  return o;
}

struct Criterion {
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list = {
      {"exact linear recovery", 1, linear_recovery},
      {"matrix exponential oracle", 1, matexp_oracle},
      {"Strang order", 1, strang_order},
      {"Duffing data efficiency", 300, data_efficiency},
      {"PI degeneracies", 30, degeneracies},
      {"LASSO behaviour", 10, lasso_behaviour},
      {"rod statics", 30, rod_statics},
      {"rod |D2| sweep trend", 1200, rod_sweep},
      {"sweep determinism", 600, determinism},
  };
  return list;
}

bool run_one(int i) {
  const auto& c = criteria()[static_cast<std::size_t>(i - 1)];
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = c.run();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < c.budget_s;
  const bool pass = o.pass && in_time;
  std::printf("%s criterion %d (%s): %s; %.2f s (budget %g s)%s\n", pass ? "PASS" : "FAIL", i, c.name,
              o.detail.c_str(), secs, c.budget_s, in_time ? "" : " [over budget]");
  std::fflush(stdout);
  return pass;
}

}  // namespace

int main(int argc, char** argv) {
  const int n = static_cast<int>(criteria().size());
  if (argc > 2) {
    std::fprintf(stderr, "usage: acceptance [criterion 1..%d]\n", n);
    return 2;
  }
  if (argc == 2) {
    const int i = std::atoi(argv[1]);
    if (i < 1 || i > n) {
      std::fprintf(stderr, "criterion must be 1..%d\n", n);
      return 2;
    }
    return run_one(i) ? 0 : 1;
  }
  bool all = true;
  for (int i = 1; i <= n; ++i) all = run_one(i) && all;
  return all ? 0 : 1;
}

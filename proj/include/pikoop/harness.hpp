#pragma once

// Experiment harness: config file, dataset generation, fitting, rollout
// metrics, |D1| x |D2| sweeps and report files.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pikoop/io.hpp"
#include "pikoop/koopman.hpp"
#include "pikoop/rod.hpp"
#include "pikoop/systems.hpp"

#ifndef PIKOOP_BUILD_STAMP
#define PIKOOP_BUILD_STAMP "unknown"
#endif

namespace pikoop {

// ---------------------------------------------------------------------------
// config

struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::string system = "duffing";  // duffing | pendulum | rod
  double dt = 0.03;
  DuffingParams duffing;
  PendulumParams pendulum;
  RodParams rod;
  double rod_radius = 0.01;
  int rod_downsample = 6;

  BaseKind dict_base = BaseKind::identity;
  int dict_degree = 1;
  int dict_delays = 4;
  DictForm pi_form = DictForm::linear;

  int d1_trajectories = 8;
  int d1_steps = 200;
  ControlPolicySpec policy;

  int d2_size = 1024;
  int pilot_trajectories = 4;
  int pilot_steps = 100;

  FitOptions fit;
  /// "auto" masks the Kh rows whose observables ignore the components h
  /// drives; "none" fits every evolving row; otherwise an explicit list.
  std::string kh_mask = "auto";

  int eval_trajectories = 50;
  int eval_steps = 200;

  std::vector<int> d1_sizes;
  std::vector<int> d2_sizes;
  int replicates = 1;
  std::vector<Method> methods = {Method::L, Method::PI};

  [[nodiscard]] int d1_records() const { return d1_trajectories * d1_steps; }
  [[nodiscard]] bool has(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }
  /// Sweep grids with empty lists replaced by the full dataset size.
  [[nodiscard]] std::vector<int> d1_grid() const { return d1_sizes.empty() ? std::vector<int>{d1_records()} : d1_sizes; }
  [[nodiscard]] std::vector<int> d2_grid() const { return d2_sizes.empty() ? std::vector<int>{d2_size} : d2_sizes; }

  void validate() const {
    detail::require(system == "duffing" || system == "pendulum" || system == "rod",
                    "config: system.name must be duffing, pendulum or rod");
    detail::require(dt > 0, "config: system.dt must be > 0");
    detail::require(d1_trajectories >= 1 && d1_steps >= 1, "config: d1 trajectories and steps must be >= 1");
    detail::require(d2_size >= 1, "config: d2.size must be >= 1");
    detail::require(eval_trajectories >= 1 && eval_steps >= 1, "config: eval trajectories and steps must be >= 1");
    detail::require(replicates >= 1, "config: sweep.replicates must be >= 1");
    detail::require(!methods.empty(), "config: sweep.methods must not be empty");
    for (int v : d1_grid()) {
      detail::require(v >= 1 && v <= d1_records(),
                      "config: |D1| grid value " + std::to_string(v) + " outside 1.." + std::to_string(d1_records()));
    }
    for (int v : d2_grid()) {
      detail::require(v >= 1 && v <= d2_size,
                      "config: |D2| grid value " + std::to_string(v) + " outside 1.." + std::to_string(d2_size));
    }
    if (system == "rod") {
      detail::require(rod_downsample >= 2 && rod_downsample <= rod.nodes, "config: rod.downsample out of range");
      detail::require(pilot_trajectories >= 1 && pilot_steps >= 1, "config: d2 pilot trajectories and steps must be >= 1");
      rod.validate();
    }
    if (kh_mask != "auto" && kh_mask != "none") parse_mask(kh_mask);
  }

  static std::vector<int> parse_mask(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (item.empty()) continue;
      char* end = nullptr;
      const long v = std::strtol(item.c_str(), &end, 10);
      detail::require(*end == '\0' && v >= 0, "config: bad kh_mask entry '" + item + "'");
      out.push_back(static_cast<int>(v));
    }
    return out;
  }
};

namespace harness_detail {

using Entries = std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>>;

inline std::string fmt(double v) { return io::detail::fmt(v); }

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

inline std::vector<std::string> list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') throw ContractError("config: " + key + " = '" + v + "' is not a number");
  return d;
}

inline long long to_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long d = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw ContractError("config: " + key + " = '" + v + "' is not an integer");
  return d;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ContractError("config: " + key + " = '" + v + "' is not a boolean");
}

template <typename E>
E choose(const std::string& key, const std::string& v, const std::vector<std::pair<std::string, E>>& options) {
  for (const auto& [name, e] : options) {
    if (v == name) return e;
  }
  std::string names;
  for (const auto& o : options) names += (names.empty() ? "" : ", ") + o.first;
  throw ContractError("config: " + key + " = '" + v + "', expected one of " + names);
}

}  // namespace harness_detail

/// Canonical (section, key, value) listing of a config. Parsing the INI
/// rendering of these entries reproduces the config.
inline harness_detail::Entries config_entries(const ExperimentConfig& c) {
  using harness_detail::fmt;
  auto ints = [](const std::vector<int>& v) {
    return harness_detail::join<int>(v, [](const int& x) { return std::to_string(x); });
  };
  harness_detail::Entries e;
  e.push_back({"run", {{"seed", std::to_string(c.seed)}}});
  e.push_back({"system", {{"name", c.system}, {"dt", fmt(c.dt)}}});
  if (c.system == "duffing") {
    e.push_back({"duffing",
                 {{"delta", fmt(c.duffing.delta)}, {"alpha", fmt(c.duffing.alpha)}, {"beta", fmt(c.duffing.beta)},
                  {"c", fmt(c.duffing.c)}}});
  } else if (c.system == "pendulum") {
    e.push_back({"pendulum",
                 {{"g", fmt(c.pendulum.g)}, {"length", fmt(c.pendulum.length)}, {"mass", fmt(c.pendulum.mass)},
                  {"gamma", fmt(c.pendulum.gamma)}}});
  } else {
    const auto& r = c.rod;
    e.push_back({"rod",
                 {{"nodes", std::to_string(r.nodes)},
                  {"length", fmt(r.length)},
                  {"radius", fmt(c.rod_radius)},
                  {"density", fmt(r.density)},
                  {"youngs", fmt(r.youngs)},
                  {"shear", fmt(r.shear)},
                  {"viscosity", fmt(r.viscosity)},
                  {"drag", fmt(r.drag)},
                  {"tendon_offset", fmt(r.tendon_offset)},
                  {"axial_load", fmt(r.axial_load)},
                  {"gravity", fmt(r.gravity)},
                  {"max_tension", fmt(r.max_tension)},
                  {"downsample", std::to_string(c.rod_downsample)}}});
  }
  e.push_back({"dictionary",
               {{"base", to_string(c.dict_base)},
                {"degree", std::to_string(c.dict_degree)},
                {"delays", std::to_string(c.dict_delays)},
                {"pi_form", to_string(c.pi_form)}}});
  e.push_back({"d1",
               {{"trajectories", std::to_string(c.d1_trajectories)},
                {"steps", std::to_string(c.d1_steps)},
                {"policy", c.policy.kind == ControlPolicy::piecewise_constant ? "piecewise_constant" : "sinusoidal"},
                {"hold_steps", std::to_string(c.policy.hold_steps)}}});
  std::vector<std::pair<std::string, std::string>> d2{{"size", std::to_string(c.d2_size)}};
  if (c.system == "rod") {
    d2.emplace_back("pilot_trajectories", std::to_string(c.pilot_trajectories));
    d2.emplace_back("pilot_steps", std::to_string(c.pilot_steps));
  }
  e.push_back({"d2", d2});
  const auto& f = c.fit;
  e.push_back({"fit",
               {{"alpha", f.alpha.proportional ? "proportional" : "constant"},
                {"alpha_scale", fmt(f.alpha.scale)},
                {"rank_tol", fmt(f.rank_tol)},
                {"kf_source", to_string(f.kf_source)},
                {"delay_rows", to_string(f.delay_rows)},
                {"split_prior", to_string(f.split_prior)},
                {"kh_mask", c.kh_mask},
                {"lasso_max_iter", std::to_string(f.lasso_max_iter)},
                {"lasso_tol", fmt(f.lasso_tol)},
                {"spectral_tol", fmt(f.spectral_tol)}}});
  e.push_back({"eval", {{"trajectories", std::to_string(c.eval_trajectories)}, {"steps", std::to_string(c.eval_steps)}}});
  e.push_back({"sweep",
               {{"d1_sizes", ints(c.d1_sizes)},
                {"d2_sizes", ints(c.d2_sizes)},
                {"replicates", std::to_string(c.replicates)},
                {"methods", harness_detail::join<Method>(c.methods, [](const Method& m) { return to_string(m); })}}});
  return e;
}

inline std::string config_ini(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [section, kv] : config_entries(c)) {
    out += (out.empty() ? "[" : "\n[") + section + "]\n";
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  }
  return out;
}

/// Parses INI text: [section] headers, key = value lines, '#' or ';' comment
/// lines. Unknown sections or keys are errors. Missing keys keep defaults.
inline ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  using namespace harness_detail;
  ExperimentConfig c;
  c.rod = RodParams::with_radius(c.rod_radius);

  // Handlers are applied in a fixed order so [rod] radius is set before the
  // material constants that override it.
  using Handler = std::function<void(const std::string&, const std::string&)>;
  const std::vector<std::pair<std::string, std::vector<std::pair<std::string, Handler>>>> table = {
      {"run", {{"seed", [&](auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(to_int(k, v)); }}}},
      {"system",
       {{"name", [&](auto&, auto& v) { c.system = v; }},
        {"dt", [&](auto& k, auto& v) { c.dt = to_double(k, v); }}}},
      {"duffing",
       {{"delta", [&](auto& k, auto& v) { c.duffing.delta = to_double(k, v); }},
        {"alpha", [&](auto& k, auto& v) { c.duffing.alpha = to_double(k, v); }},
        {"beta", [&](auto& k, auto& v) { c.duffing.beta = to_double(k, v); }},
        {"c", [&](auto& k, auto& v) { c.duffing.c = to_double(k, v); }}}},
      {"pendulum",
       {{"g", [&](auto& k, auto& v) { c.pendulum.g = to_double(k, v); }},
        {"length", [&](auto& k, auto& v) { c.pendulum.length = to_double(k, v); }},
        {"mass", [&](auto& k, auto& v) { c.pendulum.mass = to_double(k, v); }},
        {"gamma", [&](auto& k, auto& v) { c.pendulum.gamma = to_double(k, v); }}}},
      {"rod",
       {{"radius",
         [&](auto& k, auto& v) {
           c.rod_radius = to_double(k, v);
           const auto r = RodParams::with_radius(c.rod_radius);
           c.rod.area = r.area;
           c.rod.inertia = r.inertia;
         }},
        {"nodes", [&](auto& k, auto& v) { c.rod.nodes = static_cast<int>(to_int(k, v)); }},
        {"length", [&](auto& k, auto& v) { c.rod.length = to_double(k, v); }},
        {"density", [&](auto& k, auto& v) { c.rod.density = to_double(k, v); }},
        {"youngs", [&](auto& k, auto& v) { c.rod.youngs = to_double(k, v); }},
        {"shear", [&](auto& k, auto& v) { c.rod.shear = to_double(k, v); }},
        {"viscosity", [&](auto& k, auto& v) { c.rod.viscosity = to_double(k, v); }},
        {"drag", [&](auto& k, auto& v) { c.rod.drag = to_double(k, v); }},
        {"tendon_offset", [&](auto& k, auto& v) { c.rod.tendon_offset = to_double(k, v); }},
        {"axial_load", [&](auto& k, auto& v) { c.rod.axial_load = to_double(k, v); }},
        {"gravity", [&](auto& k, auto& v) { c.rod.gravity = to_double(k, v); }},
        {"max_tension", [&](auto& k, auto& v) { c.rod.max_tension = to_double(k, v); }},
        {"downsample", [&](auto& k, auto& v) { c.rod_downsample = static_cast<int>(to_int(k, v)); }}}},
      {"dictionary",
       {{"base", [&](auto& k, auto& v) {
           c.dict_base = choose<BaseKind>(k, v, {{"identity", BaseKind::identity}, {"poly", BaseKind::poly}});
         }},
        {"degree", [&](auto& k, auto& v) { c.dict_degree = static_cast<int>(to_int(k, v)); }},
        {"delays", [&](auto& k, auto& v) { c.dict_delays = static_cast<int>(to_int(k, v)); }},
        {"pi_form", [&](auto& k, auto& v) {
           c.pi_form = choose<DictForm>(k, v, {{"linear", DictForm::linear}, {"bilinear", DictForm::bilinear}});
         }}}},
      {"d1",
       {{"trajectories", [&](auto& k, auto& v) { c.d1_trajectories = static_cast<int>(to_int(k, v)); }},
        {"steps", [&](auto& k, auto& v) { c.d1_steps = static_cast<int>(to_int(k, v)); }},
        {"policy", [&](auto& k, auto& v) {
           c.policy.kind = choose<ControlPolicy>(
               k, v, {{"piecewise_constant", ControlPolicy::piecewise_constant}, {"sinusoidal", ControlPolicy::sinusoidal}});
         }},
        {"hold_steps", [&](auto& k, auto& v) { c.policy.hold_steps = static_cast<int>(to_int(k, v)); }}}},
      {"d2",
       {{"size", [&](auto& k, auto& v) { c.d2_size = static_cast<int>(to_int(k, v)); }},
        {"pilot_trajectories", [&](auto& k, auto& v) { c.pilot_trajectories = static_cast<int>(to_int(k, v)); }},
        {"pilot_steps", [&](auto& k, auto& v) { c.pilot_steps = static_cast<int>(to_int(k, v)); }}}},
      {"fit",
       {{"alpha", [&](auto& k, auto& v) { c.fit.alpha.proportional = choose<bool>(k, v, {{"proportional", true}, {"constant", false}}); }},
        {"alpha_scale", [&](auto& k, auto& v) { c.fit.alpha.scale = to_double(k, v); }},
        {"rank_tol", [&](auto& k, auto& v) { c.fit.rank_tol = to_double(k, v); }},
        {"kf_source", [&](auto& k, auto& v) {
           c.fit.kf_source = choose<KfSource>(k, v, {{"generator", KfSource::generator}, {"flowmap", KfSource::flowmap}});
         }},
        {"delay_rows", [&](auto& k, auto& v) {
           c.fit.delay_rows = choose<DelayRows>(k, v, {{"shift", DelayRows::shift}, {"identity", DelayRows::identity}});
         }},
        {"split_prior", [&](auto& k, auto& v) {
           c.fit.split_prior = choose<SplitPrior>(k, v, {{"identity", SplitPrior::identity}, {"zero", SplitPrior::zero}});
         }},
        {"kh_mask", [&](auto&, auto& v) { c.kh_mask = v; }},
        {"lasso_max_iter", [&](auto& k, auto& v) { c.fit.lasso_max_iter = static_cast<int>(to_int(k, v)); }},
        {"lasso_tol", [&](auto& k, auto& v) { c.fit.lasso_tol = to_double(k, v); }},
        {"spectral_tol", [&](auto& k, auto& v) { c.fit.spectral_tol = to_double(k, v); }}}},
      {"eval",
       {{"trajectories", [&](auto& k, auto& v) { c.eval_trajectories = static_cast<int>(to_int(k, v)); }},
        {"steps", [&](auto& k, auto& v) { c.eval_steps = static_cast<int>(to_int(k, v)); }}}},
      {"sweep",
       {{"d1_sizes", [&](auto& k, auto& v) {
           c.d1_sizes.clear();
           for (const auto& s : list(v)) c.d1_sizes.push_back(static_cast<int>(to_int(k, s)));
         }},
        {"d2_sizes", [&](auto& k, auto& v) {
           c.d2_sizes.clear();
           for (const auto& s : list(v)) c.d2_sizes.push_back(static_cast<int>(to_int(k, s)));
         }},
        {"replicates", [&](auto& k, auto& v) { c.replicates = static_cast<int>(to_int(k, v)); }},
        {"methods", [&](auto&, auto& v) {
           c.methods.clear();
           for (const auto& s : list(v)) c.methods.push_back(io::method_from_string(s));
         }}}},
  };

  for (const auto& [section, body] : tree) {
    const auto sec = std::find_if(table.begin(), table.end(), [&](const auto& t) { return t.first == section; });
    if (sec == table.end()) throw ContractError("config: unknown section [" + section + "]");
    if (!body.data().empty()) throw ContractError("config: key '" + section + "' outside any section");
    for (const auto& [key, node] : body) {
      const auto it = std::find_if(sec->second.begin(), sec->second.end(), [&](const auto& h) { return h.first == key; });
      if (it == sec->second.end()) throw ContractError("config: unknown key " + section + "." + key);
    }
    for (const auto& [key, handler] : sec->second) {
      if (auto v = body.get_optional<std::string>(key)) handler(section + "." + key, trim(*v));
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  return parse_config(io::detail::read_text(path));
}

// ---------------------------------------------------------------------------
// systems and datasets

inline SplitSystem make_system(const ExperimentConfig& c) {
  if (c.system == "duffing") return duffing(c.duffing);
  if (c.system == "pendulum") return pendulum(c.pendulum);
  return rod_system(c.rod, c.rod_downsample, c.dt);
}

inline DictionarySpec make_dictionary(const ExperimentConfig& c, const SplitSystem& sys, Method m) {
  const DictForm form = m == Method::L ? DictForm::linear : m == Method::B ? DictForm::bilinear : c.pi_form;
  return {sys.learn_dim(), sys.m, c.dict_base, c.dict_degree, c.dict_delays, form};
}

/// Seeds of replicate r, one stream per dataset.
struct ReplicateSeeds {
  std::uint64_t d1, d2, test, pilot;
};

inline ReplicateSeeds replicate_seeds(std::uint64_t seed, int replicate) {
  const auto base = detail::derive_seed(seed, static_cast<std::uint64_t>(replicate));
  return {detail::derive_seed(base, 11), detail::derive_seed(base, 12), detail::derive_seed(base, 13),
          detail::derive_seed(base, 14)};
}

inline TrajectoryDataset make_master_d1(const ExperimentConfig& c, const SplitSystem& sys, std::uint64_t seed) {
  return make_d1(sys, c.d1_trajectories, c.d1_steps, c.dt, c.policy, seed);
}

/// Held-out trajectories; ids start at 1000000 so they never collide with D1.
inline TrajectoryDataset make_test_set(const ExperimentConfig& c, const SplitSystem& sys, std::uint64_t seed) {
  return make_d1(sys, c.eval_trajectories, c.eval_steps, c.dt, c.policy, seed, 1000000);
}

/// Phase samples: LHS over state x control for ODE systems, equilibria plus
/// Gaussian velocities for the rod (covariance from pilot trajectories).
inline PhaseDataset make_master_d2(const ExperimentConfig& c, const SplitSystem& sys, std::uint64_t seed,
                                   std::uint64_t pilot_seed) {
  const double flow_dt = c.fit.kf_source == KfSource::flowmap ? 0.5 * c.dt : 0.0;
  if (c.system != "rod") {
    PhaseDataset d = sample_phase_lhs(sys.state_bounds, sys.control_bounds, c.d2_size, seed);
    if (flow_dt > 0) {
      const Flow flow = rk4_flow(sys.f, flow_dt);
      d.known_flow.resize(d.x.rows(), d.x.cols());
      for (int i = 0; i < d.size(); ++i) d.known_flow.col(i) = flow(d.x.col(i), d.u.col(i));
      d.flow_dt = flow_dt;
    }
    return d;
  }
  const Matrix pilot = rod_pilot_states(c.rod, c.pilot_trajectories, c.pilot_steps, c.dt, c.policy, pilot_seed);
  const Matrix cov = rod_velocity_covariance(pilot, c.rod.nodes);
  PhaseDataset out;
  // Failed equilibria are skipped, so top up with fresh batches until full.
  for (int batch = 0; out.size() < c.d2_size; ++batch) {
    detail::require(batch < 8, "make_master_d2: too many failed equilibria");
    const int need = c.d2_size - out.size();
    const auto part = make_rod_d2(c.rod, c.rod_downsample, sys.control_bounds, cov, need,
                                  detail::derive_seed(seed, static_cast<std::uint64_t>(batch)), flow_dt)
                          .data;
    if (out.size() == 0) {
      out = part;
      continue;
    }
    auto cat = [](Matrix& a, const Matrix& b) {
      if (b.size() == 0) return;
      const Eigen::Index n0 = a.cols();
      a.conservativeResize(Eigen::NoChange, n0 + b.cols());
      a.rightCols(b.cols()) = b;
    };
    cat(out.x, part.x);
    cat(out.u, part.u);
    cat(out.known_rate, part.known_rate);
    cat(out.known_flow, part.known_flow);
  }
  return out;
}

inline FitOptions fit_options(const ExperimentConfig& c, const SplitSystem& sys, const DictionarySpec& spec) {
  FitOptions o = c.fit;
  if (c.kh_mask == "auto") {
    o.kh_row_mask = rows_independent_of(spec, sys.h_active);
  } else if (c.kh_mask != "none") {
    o.kh_row_mask = ExperimentConfig::parse_mask(c.kh_mask);
  }
  return o;
}

inline KoopmanModel fit_method(const ExperimentConfig& c, const SplitSystem& sys, Method m,
                               const TrajectoryDataset& d1, const PhaseDataset& d2) {
  const DictionarySpec spec = make_dictionary(c, sys, m);
  const FitOptions opts = fit_options(c, sys, spec);
  if (m != Method::PI) return edmd_fit(spec, d1, opts);
  // The rod's known term acts on the full state; its D2 carries the rates.
  const Rhs f = c.system == "rod" ? Rhs{} : sys.f;
  return pi_edmdc_fit(spec, d1, d2, f, c.dt, opts);
}

// ---------------------------------------------------------------------------
// metrics

/// Sum of squared differences over `idx` (all components when idx is empty).
inline double squared_error(const Vector& truth, const Vector& pred, const std::vector<int>& idx = {}) {
  if (truth.size() != pred.size()) {
    throw ContractError("squared_error: dimension mismatch " + std::to_string(truth.size()) + " vs " +
                        std::to_string(pred.size()));
  }
  if (idx.empty()) return (truth - pred).squaredNorm();
  double s = 0.0;
  for (int i : idx) {
    detail::require(i >= 0 && i < truth.size(), "squared_error: index out of range");
    const double d = truth(i) - pred(i);
    s += d * d;
  }
  return s;
}

/// Squared error of the concatenated positions; for ODE benchmarks the
/// position set is the whole state.
inline double shape_error(const Vector& truth, const Vector& pred, const std::vector<int>& position_idx = {}) {
  return squared_error(truth, pred, position_idx);
}

inline double distal_velocity_error(const Vector& truth, const Vector& pred, const std::vector<int>& velocity_idx) {
  detail::require(!velocity_idx.empty(), "distal_velocity_error: no velocity components");
  return squared_error(truth, pred, velocity_idx);
}

struct ErrorRow {
  Method method = Method::L;
  int d1_size = 0;
  int d2_size = 0;  // 0 for methods that do not use D2
  int replicate = 0;
  int traj = 0;
  int step = 0;
  double shape_err = 0.0;
  double vel_err = 0.0;
  bool capped = false;
};

/// Errors at or above this count as divergence, so aggregates stay finite.
inline constexpr double kErrorCeiling = 1e300;

/// Rolls the model out over every test trajectory (steps 1..len). Errors of
/// diverged steps are capped afterwards at 10x the worst finite error.
inline std::vector<ErrorRow> evaluate_model(const KoopmanModel& model, const SplitSystem& sys,
                                            const TrajectoryDataset& test, int* diverged_trajs = nullptr) {
  detail::require(test.state_dim() == model.spec.state_dim(), "evaluate_model: test set does not match model");
  std::vector<ErrorRow> rows;
  int diverged = 0;
  for (const auto& [start, end] : test.segments()) {
    std::vector<Vector> us;
    for (int i = start; i < end; ++i) us.emplace_back(test.u.col(i));
    const RolloutResult r = rollout(model, test.x.col(start), us);
    bool div = r.diverged_at >= 0;
    for (int k = 1; k <= end - start; ++k) {
      ErrorRow row;
      row.method = model.method;
      row.traj = test.traj[static_cast<std::size_t>(start)];
      row.step = k;
      if (k < r.states.cols()) {
        const Vector truth = test.xp.col(start + k - 1);
        const Vector pred = r.states.col(k);
        row.shape_err = shape_error(truth, pred, sys.position_idx);
        row.vel_err = distal_velocity_error(truth, pred, sys.velocity_idx);
      }
      const bool bad = k >= r.states.cols() || !std::isfinite(row.shape_err) || !std::isfinite(row.vel_err) ||
                       row.shape_err >= kErrorCeiling || row.vel_err >= kErrorCeiling;
      row.capped = bad;
      div = div || bad;
      rows.push_back(row);
    }
    if (div) ++diverged;
  }
  double worst_shape = 0.0, worst_vel = 0.0;
  bool any = false;
  for (const auto& r : rows) {
    if (r.capped) continue;
    any = true;
    worst_shape = std::max(worst_shape, r.shape_err);
    worst_vel = std::max(worst_vel, r.vel_err);
  }
  const double cap_shape = any ? std::min(10.0 * worst_shape, kErrorCeiling) : kErrorCeiling;
  const double cap_vel = any ? std::min(10.0 * worst_vel, kErrorCeiling) : kErrorCeiling;
  for (auto& r : rows) {
    if (!r.capped) continue;
    r.shape_err = cap_shape;
    r.vel_err = cap_vel;
  }
  if (diverged_trajs) *diverged_trajs = diverged;
  return rows;
}

// ---------------------------------------------------------------------------
// aggregation

/// Linear interpolation between order statistics (position q (n - 1)).
inline double quantile_sorted(const std::vector<double>& s, double q) {
  detail::require(!s.empty(), "quantile: empty sample");
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, s.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return w == 0.0 ? s[lo] : s[lo] + w * (s[hi] - s[lo]);
}

struct Summary {
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  double mean = 0.0;
};

inline Summary summarize(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  Summary s;
  s.median = quantile_sorted(v, 0.5);
  s.q25 = quantile_sorted(v, 0.25);
  s.q75 = quantile_sorted(v, 0.75);
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  return s;
}

struct Aggregate {
  Method method = Method::L;
  int d1_size = 0;
  int d2_size = 0;
  int records = 0;
  int capped = 0;
  Summary shape;
  Summary vel;
};

/// Per (method, |D1|, |D2|) statistics pooled over replicates, test
/// trajectories and steps, in order of first appearance.
inline std::vector<Aggregate> aggregate(const std::vector<ErrorRow>& rows) {
  std::vector<std::tuple<Method, int, int>> order;
  std::map<std::tuple<int, int, int>, std::pair<std::vector<double>, std::vector<double>>> groups;
  std::map<std::tuple<int, int, int>, int> capped;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(static_cast<int>(r.method), r.d1_size, r.d2_size);
    auto [it, fresh] = groups.try_emplace(key);
    if (fresh) order.emplace_back(r.method, r.d1_size, r.d2_size);
    it->second.first.push_back(r.shape_err);
    it->second.second.push_back(r.vel_err);
    capped[key] += r.capped ? 1 : 0;
  }
  std::vector<Aggregate> out;
  for (const auto& [m, a, b] : order) {
    const auto key = std::make_tuple(static_cast<int>(m), a, b);
    const auto& g = groups.at(key);
    Aggregate ag;
    ag.method = m;
    ag.d1_size = a;
    ag.d2_size = b;
    ag.records = static_cast<int>(g.first.size());
    ag.capped = capped.at(key);
    ag.shape = summarize(g.first);
    ag.vel = summarize(g.second);
    out.push_back(ag);
  }
  return out;
}

// ---------------------------------------------------------------------------
// sweep

/// One fitted model of the sweep: a method at one (|D1|, |D2|) grid point of
/// one replicate.
struct CellResult {
  Method method = Method::L;
  int d1_size = 0;
  int d2_size = 0;
  int replicate = 0;
  bool ok = false;
  std::string error;
  FitReport fit;
  int diverged_trajs = 0;
  std::vector<ErrorRow> rows;
};

struct ErrorReport {
  std::vector<CellResult> cells;

  [[nodiscard]] std::vector<ErrorRow> rows() const {
    std::vector<ErrorRow> out;
    for (const auto& c : cells) out.insert(out.end(), c.rows.begin(), c.rows.end());
    return out;
  }
  [[nodiscard]] std::vector<Aggregate> aggregates() const { return aggregate(rows()); }
};

struct SweepOptions {
  int jobs = 1;
  std::function<void(const std::string&)> log;
};

/// Runs `count` independent jobs on up to `workers` threads.
inline void parallel_for(int count, int workers, const std::function<void(int)>& job) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) job(i);
    });
  }
  for (auto& t : pool) t.join();
}

/// Generates the master datasets of every replicate up front, then fits and
/// evaluates each grid cell. D1 and D2 subsets are prefixes of the masters,
/// so a smaller grid value sees a subset of the data of a larger one. A
/// failed fit is recorded in its cell and the sweep continues.
inline ErrorReport run_sweep(const ExperimentConfig& c, const SweepOptions& so = {}) {
  c.validate();
  const SplitSystem sys = make_system(c);
  auto log = [&](const std::string& s) {
    if (so.log) so.log(s);
  };

  struct Masters {
    TrajectoryDataset d1, test;
    PhaseDataset d2;
  };
  std::vector<Masters> masters(static_cast<std::size_t>(c.replicates));
  const bool need_d2 = c.has(Method::PI);
  for (int r = 0; r < c.replicates; ++r) {
    const auto s = replicate_seeds(c.seed, r);
    auto& m = masters[static_cast<std::size_t>(r)];
    log("replicate " + std::to_string(r) + ": generating datasets");
    m.d1 = make_master_d1(c, sys, s.d1);
    if (need_d2) m.d2 = make_master_d2(c, sys, s.d2, s.pilot);
    m.test = make_test_set(c, sys, s.test);
  }

  ErrorReport report;
  for (Method method : c.methods) {
    for (int a : c.d1_grid()) {
      const std::vector<int> bs = method == Method::PI ? c.d2_grid() : std::vector<int>{0};
      for (int b : bs) {
        for (int r = 0; r < c.replicates; ++r) {
          CellResult cell;
          cell.method = method;
          cell.d1_size = a;
          cell.d2_size = b;
          cell.replicate = r;
          report.cells.push_back(cell);
        }
      }
    }
  }

  std::mutex log_mutex;
  parallel_for(static_cast<int>(report.cells.size()), so.jobs, [&](int i) {
    auto& cell = report.cells[static_cast<std::size_t>(i)];
    const auto& m = masters[static_cast<std::size_t>(cell.replicate)];
    try {
      const auto d1 = m.d1.prefix(cell.d1_size);
      const auto d2 = cell.d2_size > 0 ? m.d2.prefix(cell.d2_size) : PhaseDataset{};
      const KoopmanModel model = fit_method(c, sys, cell.method, d1, d2);
      cell.fit = model.report;
      cell.rows = evaluate_model(model, sys, m.test, &cell.diverged_trajs);
      for (auto& row : cell.rows) {
        row.d1_size = cell.d1_size;
        row.d2_size = cell.d2_size;
        row.replicate = cell.replicate;
      }
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    std::lock_guard<std::mutex> lock(log_mutex);
    log(to_string(cell.method) + " |D1|=" + std::to_string(cell.d1_size) + " |D2|=" +
        std::to_string(cell.d2_size) + " rep " + std::to_string(cell.replicate) +
        (cell.ok ? "" : " FAILED: " + cell.error));
  });
  return report;
}

// ---------------------------------------------------------------------------
// report files

inline constexpr const char* kReportHeader = "method,d1_size,d2_size,replicate,traj,step,shape_err,vel_err,capped";

inline std::string report_csv(const std::vector<ErrorRow>& rows) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) {
    out += to_string(r.method) + "," + std::to_string(r.d1_size) + "," + std::to_string(r.d2_size) + "," +
           std::to_string(r.replicate) + "," + std::to_string(r.traj) + "," + std::to_string(r.step) + "," +
           io::detail::fmt(r.shape_err) + "," + io::detail::fmt(r.vel_err) + "," + (r.capped ? "1" : "0") + "\n";
  }
  return out;
}

inline std::vector<ErrorRow> parse_report_csv(const std::string& text, const std::string& where = "report.csv") {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kReportHeader) throw IoError(where + ": unexpected header");
  std::vector<ErrorRow> rows;
  int no = 1;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty()) continue;
    const auto f = io::detail::split(line);
    const std::string at = where + ":" + std::to_string(no);
    if (f.size() != 9) throw IoError(at + ": expected 9 fields");
    ErrorRow r;
    try {
      r.method = io::method_from_string(f[0]);
    } catch (const ContractError&) {
      throw IoError(at + ": unknown method '" + f[0] + "'");
    }
    r.d1_size = io::detail::parse_int(f[1], at);
    r.d2_size = io::detail::parse_int(f[2], at);
    r.replicate = io::detail::parse_int(f[3], at);
    r.traj = io::detail::parse_int(f[4], at);
    r.step = io::detail::parse_int(f[5], at);
    r.shape_err = io::detail::parse_double(f[6], at);
    r.vel_err = io::detail::parse_double(f[7], at);
    r.capped = f[8] == "1";
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json summary_json(const Summary& s) {
  return {{"median", s.median}, {"q25", s.q25}, {"q75", s.q75}, {"mean", s.mean}};
}

inline nlohmann::json aggregates_json(const std::vector<Aggregate>& aggs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& a : aggs) {
    out.push_back({{"method", to_string(a.method)},
                   {"d1_size", a.d1_size},
                   {"d2_size", a.d2_size},
                   {"records", a.records},
                   {"capped", a.capped},
                   {"shape_err", summary_json(a.shape)},
                   {"vel_err", summary_json(a.vel)}});
  }
  return out;
}

inline nlohmann::json report_json(const ErrorReport& rep, const ExperimentConfig& c) {
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [section, kv] : config_entries(c)) {
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [k, v] : kv) s[k] = v;
    cfg[section] = s;
  }
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : rep.cells) {
    nlohmann::json j = {{"method", to_string(cell.method)},
                        {"d1_size", cell.d1_size},
                        {"d2_size", cell.d2_size},
                        {"replicate", cell.replicate},
                        {"ok", cell.ok}};
    if (cell.ok) {
      j["unstable"] = cell.fit.unstable;
      j["spectral_radius"] = cell.fit.spectral_radius;
      j["lasso_converged"] = cell.fit.lasso_converged;
      j["diverged_trajectories"] = cell.diverged_trajs;
      if (!cell.fit.notes.empty()) j["notes"] = cell.fit.notes;
    } else {
      j["error"] = cell.error;
    }
    cells.push_back(std::move(j));
  }
  const std::string policy = c.policy.kind == ControlPolicy::piecewise_constant
                                 ? "piecewise-constant uniform random, held " + std::to_string(c.policy.hold_steps) +
                                       " steps"
                                 : "random sinusoids";
  return {{"build", PIKOOP_BUILD_STAMP},
          {"config", cfg},
          {"assumptions",
           {"D1 control excitation is an assumed policy: " + policy,
            "aggregates pool all replicates, test trajectories and steps 1..eval.steps",
            "diverged steps are capped at 10x the worst finite error of their cell"}},
          {"aggregates", aggregates_json(rep.aggregates())},
          {"cells", cells}};
}

/// Writes report.csv and report.json into out_dir.
inline void write_report(const ErrorReport& rep, const ExperimentConfig& c, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  io::detail::write_text((std::filesystem::path(out_dir) / "report.csv").string(), report_csv(rep.rows()));
  io::detail::write_text((std::filesystem::path(out_dir) / "report.json").string(),
                         report_json(rep, c).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// summary tables and plots

inline std::string summary_table(const std::vector<Aggregate>& aggs) {
  std::string out = "method  |D1|     |D2|     shape median [q25, q75]                 vel median [q25, q75]\n";
  char buf[256];
  for (const auto& a : aggs) {
    std::snprintf(buf, sizeof buf, "%-6s  %-7d  %-7d  %-10.4g [%-10.4g, %-10.4g]  %-10.4g [%-10.4g, %-10.4g]%s\n",
                  to_string(a.method).c_str(), a.d1_size, a.d2_size, a.shape.median, a.shape.q25, a.shape.q75,
                  a.vel.median, a.vel.q25, a.vel.q75, a.capped ? "  (capped rows)" : "");
    out += buf;
  }
  return out;
}

/// Median error vs |D1| on log-log axes, one line per (method, |D2|) with a
/// shaded 25-75 percentile band.
inline std::string svg_plot(const std::vector<Aggregate>& aggs, bool velocity, const std::string& title) {
  const double w = 640, h = 420, left = 70, right = 150, top = 40, bottom = 50;
  auto val = [&](const Aggregate& a) { return velocity ? a.vel : a.shape; };
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& a : aggs) {
    const auto s = val(a);
    xmin = std::min(xmin, std::log2(a.d1_size));
    xmax = std::max(xmax, std::log2(a.d1_size));
    for (double v : {s.q25, s.q75, s.median}) {
      if (v > 0) {
        ymin = std::min(ymin, std::log10(v));
        ymax = std::max(ymax, std::log10(v));
      }
    }
  }
  if (aggs.empty() || ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (xmax - xmin < 1e-9) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  ymin = std::floor(ymin);
  ymax = std::max(std::ceil(ymax), ymin + 1);
  auto px = [&](double lx) { return left + (lx - xmin) / (xmax - xmin) * (w - left - right); };
  auto py = [&](double v) {
    const double ly = v > 0 ? std::log10(v) : ymin;
    return top + (ymax - ly) / (ymax - ymin) * (h - top - bottom);
  };
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
                  "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(left) + "\" y=\"22\" font-size=\"14\">" + title + "</text>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(h - bottom) + "\" x2=\"" + num(w - right) + "\" y2=\"" +
       num(h - bottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" + num(h - bottom) +
       "\" stroke=\"black\"/>\n";
  for (int e = static_cast<int>(std::ceil(xmin)); e <= static_cast<int>(std::floor(xmax)); ++e) {
    s += "<text x=\"" + num(px(e)) + "\" y=\"" + num(h - bottom + 16) + "\" text-anchor=\"middle\">2^" +
         std::to_string(e) + "</text>\n";
  }
  for (int e = static_cast<int>(ymin); e <= static_cast<int>(ymax); ++e) {
    s += "<text x=\"" + num(left - 6) + "\" y=\"" + num(py(std::pow(10.0, e)) + 4) + "\" text-anchor=\"end\">1e" +
         std::to_string(e) + "</text>\n";
  }
  s += "<text x=\"" + num((left + w - right) / 2) + "\" y=\"" + num(h - 12) + "\" text-anchor=\"middle\">|D1|</text>\n";

  std::vector<std::pair<Method, int>> series;
  for (const auto& a : aggs) {
    const auto key = std::make_pair(a.method, a.d2_size);
    if (std::find(series.begin(), series.end(), key) == series.end()) series.push_back(key);
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::vector<Aggregate> pts;
    for (const auto& a : aggs) {
      if (a.method == series[k].first && a.d2_size == series[k].second) pts.push_back(a);
    }
    std::sort(pts.begin(), pts.end(), [](const auto& x, const auto& y) { return x.d1_size < y.d1_size; });
    const char* color = colors[k % 7];
    std::string band, line;
    for (const auto& p : pts) band += num(px(std::log2(p.d1_size))) + "," + num(py(val(p).q75)) + " ";
    for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
      band += num(px(std::log2(it->d1_size))) + "," + num(py(val(*it).q25)) + " ";
    }
    for (const auto& p : pts) line += num(px(std::log2(p.d1_size))) + "," + num(py(val(p).median)) + " ";
    s += "<polygon points=\"" + band + "\" fill=\"" + color + "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
    s += "<polyline points=\"" + line + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    const std::string label =
        to_string(series[k].first) + (series[k].second > 0 ? " |D2|=" + std::to_string(series[k].second) : "");
    const double ly = top + 18.0 * static_cast<double>(k);
    s += "<line x1=\"" + num(w - right + 10) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(w - right + 30) + "\" y2=\"" +
         num(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(w - right + 35) + "\" y=\"" + num(ly + 4) + "\">" + label + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace pikoop

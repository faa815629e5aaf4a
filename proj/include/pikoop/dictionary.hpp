#pragma once

// Observable dictionaries Theta(x, u).
//
// Layout of a lifted vector (M entries), in order:
//   [ base(x) | base(x_-1) | ... | base(x_-d) ]            state part, M_x = (d+1) * n_base
//   linear form:   [ state part | u ]                        M = M_x + m
//   bilinear form: [ state part | u_1 * state part | ... ]   M = (m+1) * M_x
// The base map always starts with the identity monomials x_1..x_n, so the
// first n lifted entries are the current state.

#include <algorithm>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "pikoop/errors.hpp"
#include "pikoop/numkit.hpp"

namespace pikoop {

enum class BaseKind { identity, poly };
enum class DictForm { linear, bilinear };
/// How delay coordinates advance under the full-step operator.
enum class DelayRows { shift, identity };

inline std::string to_string(BaseKind k) { return k == BaseKind::identity ? "identity" : "poly"; }
inline std::string to_string(DictForm f) { return f == DictForm::linear ? "linear" : "bilinear"; }
inline std::string to_string(DelayRows r) { return r == DelayRows::shift ? "shift" : "identity"; }

/// One monomial prod_k x[var_k]^pow_k.
struct Monomial {
  std::vector<std::pair<int, int>> factors;  // (variable, power), power >= 1

  [[nodiscard]] bool involves(int var) const {
    return std::any_of(factors.begin(), factors.end(),
                       [var](const auto& f) { return f.first == var; });
  }
};

class DictionarySpec {
 public:
  DictionarySpec() = default;

  DictionarySpec(int state_dim, int control_dim, BaseKind base, int degree, int delays,
                 DictForm form)
      : n_(state_dim), m_(control_dim), base_(base), degree_(degree), delays_(delays),
        form_(form) {
    detail::require(n_ >= 1, "dictionary: state_dim must be >= 1");
    detail::require(m_ >= 1, "dictionary: control_dim must be >= 1");
    detail::require(delays_ >= 0, "dictionary: delays must be >= 0");
    if (base_ == BaseKind::identity) degree_ = 1;
    detail::require(degree_ >= 1, "dictionary: poly degree must be >= 1");
    build_monomials();
  }

  static DictionarySpec linear(int n, int m, int delays = 0) {
    return {n, m, BaseKind::identity, 1, delays, DictForm::linear};
  }
  static DictionarySpec bilinear(int n, int m, int delays = 0) {
    return {n, m, BaseKind::identity, 1, delays, DictForm::bilinear};
  }

  [[nodiscard]] int state_dim() const { return n_; }
  [[nodiscard]] int control_dim() const { return m_; }
  [[nodiscard]] BaseKind base() const { return base_; }
  [[nodiscard]] int degree() const { return degree_; }
  [[nodiscard]] int delays() const { return delays_; }
  [[nodiscard]] DictForm form() const { return form_; }

  [[nodiscard]] int base_dim() const { return static_cast<int>(monomials_.size()); }
  /// Rows of the state part (current plus delay blocks).
  [[nodiscard]] int state_part_dim() const { return (delays_ + 1) * base_dim(); }
  [[nodiscard]] int lifted_dim() const {
    return form_ == DictForm::linear ? state_part_dim() + m_ : (m_ + 1) * state_part_dim();
  }
  [[nodiscard]] const std::vector<Monomial>& monomials() const { return monomials_; }

  /// Same spec with a different form (L and B methods share everything else).
  [[nodiscard]] DictionarySpec with_form(DictForm f) const {
    return {n_, m_, base_, degree_, delays_, f};
  }

  friend bool operator==(const DictionarySpec& a, const DictionarySpec& b) {
    return a.n_ == b.n_ && a.m_ == b.m_ && a.base_ == b.base_ && a.degree_ == b.degree_ &&
           a.delays_ == b.delays_ && a.form_ == b.form_;
  }

 private:
  void build_monomials() {
    monomials_.clear();
    if (base_ == BaseKind::identity) {
      for (int i = 0; i < n_; ++i) monomials_.push_back({{{i, 1}}});
      return;
    }
    // Graded order; inside a degree, exponent vectors in descending lexicographic
    // order so degree 1 yields x_1, ..., x_n.
    std::vector<int> exps(static_cast<std::size_t>(n_), 0);
    for (int deg = 1; deg <= degree_; ++deg) enumerate(0, deg, exps);
  }

  void enumerate(int var, int remaining, std::vector<int>& exps) {
    if (var == n_ - 1) {
      exps[static_cast<std::size_t>(var)] = remaining;
      Monomial mono;
      for (int k = 0; k < n_; ++k) {
        if (exps[static_cast<std::size_t>(k)] > 0) {
          mono.factors.emplace_back(k, exps[static_cast<std::size_t>(k)]);
        }
      }
      monomials_.push_back(std::move(mono));
      exps[static_cast<std::size_t>(var)] = 0;
      return;
    }
    for (int e = remaining; e >= 0; --e) {
      exps[static_cast<std::size_t>(var)] = e;
      enumerate(var + 1, remaining - e, exps);
    }
    exps[static_cast<std::size_t>(var)] = 0;
  }

  int n_ = 1;
  int m_ = 1;
  BaseKind base_ = BaseKind::identity;
  int degree_ = 1;
  int delays_ = 0;
  DictForm form_ = DictForm::linear;
  std::vector<Monomial> monomials_ = {{{{0, 1}}}};
};

/// Most recent past states, newest first, at most `capacity` entries.
class DelayBuffer {
 public:
  explicit DelayBuffer(int capacity = 0) : capacity_(capacity) {
    detail::require(capacity >= 0, "DelayBuffer: negative capacity");
  }

  void push(const Vector& x) {
    if (capacity_ == 0) return;
    history_.push_front(x);
    while (static_cast<int>(history_.size()) > capacity_) history_.pop_back();
  }
  void clear() { history_.clear(); }

  [[nodiscard]] int capacity() const { return capacity_; }
  [[nodiscard]] int size() const { return static_cast<int>(history_.size()); }
  [[nodiscard]] const Vector& at(int lag) const { return history_.at(static_cast<std::size_t>(lag)); }

 private:
  int capacity_;
  std::deque<Vector> history_;
};

namespace detail {

inline void check_dims(const DictionarySpec& spec, const Vector& x, const Vector& u) {
  if (x.size() != spec.state_dim() || u.size() != spec.control_dim()) {
    throw ContractError("dictionary: expected x in R^" + std::to_string(spec.state_dim()) +
                        " and u in R^" + std::to_string(spec.control_dim()) + ", got " +
                        std::to_string(x.size()) + " and " + std::to_string(u.size()));
  }
}

inline void eval_base(const DictionarySpec& spec, const Vector& x,
                      Eigen::Ref<Vector> out) {
  if (spec.base() == BaseKind::identity) {
    out = x;
    return;
  }
  const auto& monos = spec.monomials();
  for (std::size_t k = 0; k < monos.size(); ++k) {
    double v = 1.0;
    for (const auto& [var, pw] : monos[k].factors) v *= std::pow(x(var), pw);
    out(static_cast<Eigen::Index>(k)) = v;
  }
}

}  // namespace detail

/// Lifts (x, u) with the past states in `buf`.
///
/// Lags the buffer does not hold yet repeat the oldest known state (the
/// current x when the buffer is empty), i.e. the history before the first
/// sample is taken to be constant.
inline Vector lift(const DictionarySpec& spec, const Vector& x, const Vector& u,
                   const DelayBuffer& buf = DelayBuffer{}) {
  detail::check_dims(spec, x, u);
  const int nb = spec.base_dim();
  const int mx = spec.state_part_dim();
  Vector z(spec.lifted_dim());

  detail::eval_base(spec, x, z.segment(0, nb));
  for (int lag = 1; lag <= spec.delays(); ++lag) {
    const Vector* src = &x;
    if (buf.size() > 0) src = &buf.at(std::min(lag, buf.size()) - 1);
    if (src->size() != spec.state_dim()) throw ContractError("lift: buffered state has wrong size");
    detail::eval_base(spec, *src, z.segment(lag * nb, nb));
  }

  if (spec.form() == DictForm::linear) {
    z.segment(mx, spec.control_dim()) = u;
  } else {
    for (int j = 0; j < spec.control_dim(); ++j) {
      z.segment((j + 1) * mx, mx) = u(j) * z.segment(0, mx);
    }
  }
  return z;
}

/// Analytic d lift / d x with respect to the current state only; delay and
/// control rows are zero.
inline Matrix jacobian_x(const DictionarySpec& spec, const Vector& x, const Vector& u) {
  detail::check_dims(spec, x, u);
  const int n = spec.state_dim();
  const int nb = spec.base_dim();
  const int mx = spec.state_part_dim();
  Matrix jac = Matrix::Zero(spec.lifted_dim(), n);

  if (spec.base() == BaseKind::identity) {
    jac.topRows(n).setIdentity();
  } else {
    const auto& monos = spec.monomials();
    for (int k = 0; k < nb; ++k) {
      const auto& fac = monos[static_cast<std::size_t>(k)].factors;
      for (std::size_t a = 0; a < fac.size(); ++a) {
        double d = fac[a].second * std::pow(x(fac[a].first), fac[a].second - 1);
        for (std::size_t b = 0; b < fac.size(); ++b) {
          if (b != a) d *= std::pow(x(fac[b].first), fac[b].second);
        }
        jac(k, fac[a].first) = d;
      }
    }
  }
  if (spec.form() == DictForm::bilinear) {
    for (int j = 0; j < spec.control_dim(); ++j) {
      jac.block((j + 1) * mx, 0, nb, n) = u(j) * jac.topRows(nb);
    }
  }
  return jac;
}

/// First n lifted entries.
inline Vector extract_state(const DictionarySpec& spec, const Vector& z) {
  detail::require(z.size() == spec.lifted_dim(), "extract_state: lifted size mismatch");
  return z.head(spec.state_dim());
}

struct StructuralRow {
  int row;
  int source;
  double weight;
};

/// Rows fitted from data versus rows with a fixed pass-through map.
struct RowStructure {
  std::vector<int> learned;
  std::vector<StructuralRow> structural;
};

/// Learned rows: current base block, plus every u-scaled block for the
/// bilinear form. Structural rows: delay blocks (shift to the next lag, or
/// identity) and, for the linear form, the control identity.
inline RowStructure row_structure(const DictionarySpec& spec,
                                  DelayRows delay_rows = DelayRows::shift) {
  RowStructure rs;
  const int nb = spec.base_dim();
  const int mx = spec.state_part_dim();
  for (int r = 0; r < nb; ++r) rs.learned.push_back(r);
  for (int lag = 1; lag <= spec.delays(); ++lag) {
    for (int r = 0; r < nb; ++r) {
      const int row = lag * nb + r;
      const int src = delay_rows == DelayRows::shift ? row - nb : row;
      rs.structural.push_back({row, src, 1.0});
    }
  }
  if (spec.form() == DictForm::linear) {
    for (int j = 0; j < spec.control_dim(); ++j) rs.structural.push_back({mx + j, mx + j, 1.0});
  } else {
    for (int r = mx; r < spec.lifted_dim(); ++r) rs.learned.push_back(r);
  }
  return rs;
}

/// Row map for operators that advance less than one sampling step (the split
/// factors). Only rows of observables of the current state evolve: the current
/// base block and, for the bilinear form, the u-scaled current blocks. Delay
/// and control rows are identity because the delay register moves once per
/// full step.
inline RowStructure half_step_structure(const DictionarySpec& spec) {
  RowStructure rs;
  const int nb = spec.base_dim();
  const int mx = spec.state_part_dim();
  std::vector<bool> evolving(static_cast<std::size_t>(spec.lifted_dim()), false);
  for (int r = 0; r < nb; ++r) evolving[static_cast<std::size_t>(r)] = true;
  if (spec.form() == DictForm::bilinear) {
    for (int j = 0; j < spec.control_dim(); ++j) {
      for (int r = 0; r < nb; ++r) evolving[static_cast<std::size_t>((j + 1) * mx + r)] = true;
    }
  }
  for (int r = 0; r < spec.lifted_dim(); ++r) {
    if (evolving[static_cast<std::size_t>(r)]) {
      rs.learned.push_back(r);
    } else {
      rs.structural.push_back({r, r, 1.0});
    }
  }
  return rs;
}

/// Overwrites every structural row of k with its pass-through map.
inline void install_structure(Matrix& k, const RowStructure& rs) {
  for (const auto& s : rs.structural) {
    k.row(s.row).setZero();
    k(s.row, s.source) = s.weight;
  }
}

/// Applies only the structural rows to a lifted vector; learned entries are
/// left as they are.
inline Vector apply_structure(const RowStructure& rs, const Vector& z) {
  Vector out = z;
  for (const auto& s : rs.structural) out(s.row) = s.weight * z(s.source);
  return out;
}

/// Columns that depend on the current state and control only (no delays).
/// Phase-space samples carry no history, so generator and flow-map fits
/// regress on these columns alone.
inline std::vector<int> instantaneous_columns(const DictionarySpec& spec) {
  std::vector<int> cols;
  const int nb = spec.base_dim();
  const int mx = spec.state_part_dim();
  for (int r = 0; r < nb; ++r) cols.push_back(r);
  if (spec.form() == DictForm::linear) {
    for (int j = 0; j < spec.control_dim(); ++j) cols.push_back(mx + j);
  } else {
    for (int j = 0; j < spec.control_dim(); ++j) {
      for (int r = 0; r < nb; ++r) cols.push_back((j + 1) * mx + r);
    }
  }
  return cols;
}

/// Evolving rows (see half_step_structure) whose observable does not depend on any of `components`.
/// If h only drives those components, these rows have zero h-Lie derivative.
inline std::vector<int> rows_independent_of(const DictionarySpec& spec,
                                            const std::vector<int>& components) {
  const int mx = spec.state_part_dim();
  std::vector<int> rows;
  for (int r : half_step_structure(spec).learned) {
    const int within = r < mx ? r : (r - mx) % mx;
    const auto& mono = spec.monomials()[static_cast<std::size_t>(within)];
    const bool touched = std::any_of(components.begin(), components.end(),
                                     [&](int c) { return mono.involves(c); });
    if (!touched) rows.push_back(r);
  }
  return rows;
}

}  // namespace pikoop

#pragma once

// Dataset and model files.
//
// Binary containers start with a 4-byte magic and a u32 format version; all
// scalars are little-endian, matrices are written row-major as float64 with
// u64 row and column counts. CSV files use %.17g so doubles round-trip.

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pikoop/koopman.hpp"
#include "pikoop/systems.hpp"

namespace pikoop {

namespace io {

inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot open " + path + " for writing");
  }
  template <typename T>
  void put(T v) {
    v = to_le(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void matrix(const Matrix& a) {
    put<std::uint64_t>(static_cast<std::uint64_t>(a.rows()));
    put<std::uint64_t>(static_cast<std::uint64_t>(a.cols()));
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) put<double>(a(i, j));
    }
  }
  void close() {
    os_.close();
    if (!os_) throw IoError("write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream os_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), is_(path, std::ios::binary) {
    if (!is_) throw IoError("cannot open " + path);
  }
  template <typename T>
  T get() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw IoError(path_ + ": truncated file");
    return to_le(v);
  }
  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) throw IoError(path_ + ": truncated file");
    return s;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    if (n > (1u << 24)) throw IoError(path_ + ": implausible string length");
    return bytes(n);
  }
  Matrix matrix() {
    const auto r = get<std::uint64_t>();
    const auto c = get<std::uint64_t>();
    if (r > (1ull << 32) || c > (1ull << 32) || (r > 0 && c > (1ull << 34) / r)) {
      throw IoError(path_ + ": implausible matrix size");
    }
    Matrix a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = get<double>();
    }
    return a;
  }
  void header(const char* magic) {
    if (bytes(4) != std::string(magic, 4)) throw IoError(path_ + ": not a " + magic + " file");
    const auto v = get<std::uint32_t>();
    if (v != kVersion) {
      throw IoError(path_ + ": unsupported format version " + std::to_string(v));
    }
  }
  void expect_end() {
    is_.peek();
    if (!is_.eof()) throw IoError(path_ + ": trailing bytes");
  }
  [[nodiscard]] const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream is_;
};

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw IoError(where + ": bad number '" + s + "'");
  return v;
}

inline int parse_int(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) throw IoError(where + ": bad integer '" + s + "'");
  return static_cast<int>(v);
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << text;
  os.close();
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<std::string> named_columns(const char* prefix, Eigen::Index n) {
  std::vector<std::string> names;
  for (Eigen::Index i = 1; i <= n; ++i) names.push_back(prefix + std::to_string(i));
  return names;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// trajectory datasets

/// CSV with a "# dt=" line, then header traj_id,step,x1..xn,xp1..xpn,u1..um.
inline std::string dataset_csv(const TrajectoryDataset& d) {
  std::string out = "# dt=" + detail::fmt(d.dt) + "\ntraj_id,step";
  for (const auto& c : detail::named_columns("x", d.x.rows())) out += "," + c;
  for (const auto& c : detail::named_columns("xp", d.xp.rows())) out += "," + c;
  for (const auto& c : detail::named_columns("u", d.u.rows())) out += "," + c;
  out += "\n";
  for (int i = 0; i < d.size(); ++i) {
    out += std::to_string(d.traj[static_cast<std::size_t>(i)]) + "," +
           std::to_string(d.step[static_cast<std::size_t>(i)]);
    for (Eigen::Index r = 0; r < d.x.rows(); ++r) out += "," + detail::fmt(d.x(r, i));
    for (Eigen::Index r = 0; r < d.xp.rows(); ++r) out += "," + detail::fmt(d.xp(r, i));
    for (Eigen::Index r = 0; r < d.u.rows(); ++r) out += "," + detail::fmt(d.u(r, i));
    out += "\n";
  }
  return out;
}

inline TrajectoryDataset parse_dataset_csv(const std::string& text, const std::string& where = "csv") {
  std::istringstream is(text);
  std::string line;
  TrajectoryDataset d;
  if (!std::getline(is, line) || line.rfind("# dt=", 0) != 0) throw IoError(where + ": missing '# dt=' line");
  d.dt = detail::parse_double(line.substr(5), where);
  if (!std::getline(is, line)) throw IoError(where + ": missing header");
  const auto head = detail::split(line);
  if (head.size() < 2 || head[0] != "traj_id" || head[1] != "step") throw IoError(where + ": bad header");
  Eigen::Index n = 0, np = 0, m = 0;
  for (std::size_t c = 2; c < head.size(); ++c) {
    if (head[c].rfind("xp", 0) == 0) {
      ++np;
    } else if (head[c].rfind("x", 0) == 0) {
      ++n;
    } else if (head[c].rfind("u", 0) == 0) {
      ++m;
    } else {
      throw IoError(where + ": unknown column '" + head[c] + "'");
    }
  }
  if (n != np || n == 0 || m == 0) throw IoError(where + ": header needs matching x and xp columns and u columns");
  if (head != [&] {
        std::vector<std::string> want{"traj_id", "step"};
        for (const auto& c : detail::named_columns("x", n)) want.push_back(c);
        for (const auto& c : detail::named_columns("xp", n)) want.push_back(c);
        for (const auto& c : detail::named_columns("u", m)) want.push_back(c);
        return want;
      }()) {
    throw IoError(where + ": columns out of order");
  }

  std::vector<std::vector<double>> rows;
  int line_no = 2;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split(line);
    const std::string at = where + ":" + std::to_string(line_no);
    if (cells.size() != head.size()) throw IoError(at + ": expected " + std::to_string(head.size()) + " fields");
    d.traj.push_back(detail::parse_int(cells[0], at));
    d.step.push_back(detail::parse_int(cells[1], at));
    std::vector<double> vals;
    for (std::size_t c = 2; c < cells.size(); ++c) vals.push_back(detail::parse_double(cells[c], at));
    rows.push_back(std::move(vals));
  }
  const auto count = static_cast<Eigen::Index>(rows.size());
  d.x.resize(n, count);
  d.xp.resize(n, count);
  d.u.resize(m, count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto& v = rows[static_cast<std::size_t>(i)];
    for (Eigen::Index r = 0; r < n; ++r) {
      d.x(r, i) = v[static_cast<std::size_t>(r)];
      d.xp(r, i) = v[static_cast<std::size_t>(n + r)];
    }
    for (Eigen::Index r = 0; r < m; ++r) d.u(r, i) = v[static_cast<std::size_t>(2 * n + r)];
  }
  return d;
}

inline void save_dataset_csv(const TrajectoryDataset& d, const std::string& path) {
  detail::write_text(path, dataset_csv(d));
}

inline TrajectoryDataset load_dataset_csv(const std::string& path) {
  return parse_dataset_csv(detail::read_text(path), path);
}

inline void save_dataset(const TrajectoryDataset& d, const std::string& path) {
  detail::Writer w(path);
  w.bytes("PKD1");
  w.put<std::uint32_t>(kVersion);
  w.put<double>(d.dt);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(d.size()));
  for (int v : d.traj) w.put<std::int32_t>(v);
  for (int v : d.step) w.put<std::int32_t>(v);
  w.matrix(d.x);
  w.matrix(d.xp);
  w.matrix(d.u);
  w.close();
}

inline TrajectoryDataset load_dataset(const std::string& path) {
  detail::Reader r(path);
  r.header("PKD1");
  TrajectoryDataset d;
  d.dt = r.get<double>();
  const auto count = r.get<std::uint64_t>();
  if (count > (1ull << 31)) throw IoError(path + ": implausible record count");
  for (std::uint64_t i = 0; i < count; ++i) d.traj.push_back(r.get<std::int32_t>());
  for (std::uint64_t i = 0; i < count; ++i) d.step.push_back(r.get<std::int32_t>());
  d.x = r.matrix();
  d.xp = r.matrix();
  d.u = r.matrix();
  r.expect_end();
  const auto c = static_cast<Eigen::Index>(count);
  if (d.x.cols() != c || d.xp.cols() != c || d.u.cols() != c || d.x.rows() != d.xp.rows()) {
    throw IoError(path + ": inconsistent matrix shapes");
  }
  return d;
}

// ---------------------------------------------------------------------------
// phase datasets

inline void save_phase(const PhaseDataset& d, const std::string& path) {
  detail::Writer w(path);
  w.bytes("PKD2");
  w.put<std::uint32_t>(kVersion);
  w.put<double>(d.flow_dt);
  w.matrix(d.x);
  w.matrix(d.u);
  w.matrix(d.known_rate);
  w.matrix(d.known_flow);
  w.close();
}

inline PhaseDataset load_phase(const std::string& path) {
  detail::Reader r(path);
  r.header("PKD2");
  PhaseDataset d;
  d.flow_dt = r.get<double>();
  d.x = r.matrix();
  d.u = r.matrix();
  d.known_rate = r.matrix();
  d.known_flow = r.matrix();
  r.expect_end();
  auto ok = [&](const Matrix& a) { return a.size() == 0 || (a.cols() == d.x.cols() && a.rows() == d.x.rows()); };
  if (d.u.cols() != d.x.cols() || !ok(d.known_rate) || !ok(d.known_flow)) {
    throw IoError(path + ": inconsistent matrix shapes");
  }
  return d;
}

/// Header x1..xn,u1..um, then r1..rn and f1..fn when those columns are present.
inline std::string phase_csv(const PhaseDataset& d) {
  std::string out = "# flow_dt=" + detail::fmt(d.flow_dt) + "\n";
  std::vector<std::string> head = detail::named_columns("x", d.x.rows());
  for (const auto& c : detail::named_columns("u", d.u.rows())) head.push_back(c);
  if (d.known_rate.size() > 0) {
    for (const auto& c : detail::named_columns("r", d.known_rate.rows())) head.push_back(c);
  }
  if (d.known_flow.size() > 0) {
    for (const auto& c : detail::named_columns("f", d.known_flow.rows())) head.push_back(c);
  }
  for (std::size_t i = 0; i < head.size(); ++i) out += (i ? "," : "") + head[i];
  out += "\n";
  for (int i = 0; i < d.size(); ++i) {
    std::string row;
    auto add = [&](const Matrix& a) {
      for (Eigen::Index r = 0; r < a.rows(); ++r) row += (row.empty() ? "" : ",") + detail::fmt(a(r, i));
    };
    add(d.x);
    add(d.u);
    if (d.known_rate.size() > 0) add(d.known_rate);
    if (d.known_flow.size() > 0) add(d.known_flow);
    out += row + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// models

inline nlohmann::json spec_json(const DictionarySpec& s) {
  return {{"state_dim", s.state_dim()}, {"control_dim", s.control_dim()}, {"base", to_string(s.base())},
          {"degree", s.degree()},       {"delays", s.delays()},           {"form", to_string(s.form())}};
}

inline DictionarySpec spec_from_json(const nlohmann::json& j) {
  const std::string base = j.at("base");
  const std::string form = j.at("form");
  if ((base != "identity" && base != "poly") || (form != "linear" && form != "bilinear")) {
    throw IoError("model: unknown dictionary base or form");
  }
  return {j.at("state_dim").get<int>(), j.at("control_dim").get<int>(),
          base == "identity" ? BaseKind::identity : BaseKind::poly, j.at("degree").get<int>(),
          j.at("delays").get<int>(), form == "linear" ? DictForm::linear : DictForm::bilinear};
}

inline Method method_from_string(const std::string& s) {
  if (s == "L" || s == "l") return Method::L;
  if (s == "B" || s == "b") return Method::B;
  if (s == "PI" || s == "pi") return Method::PI;
  throw ContractError("unknown method '" + s + "' (expected l, b or pi)");
}

inline void save_model(const KoopmanModel& m, const std::string& path) {
  detail::Writer w(path);
  w.bytes("PKMD");
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.method));
  w.put<double>(m.dt);
  const auto& s = m.spec;
  for (int v : {s.state_dim(), s.control_dim(), static_cast<int>(s.base()), s.degree(), s.delays(),
                static_cast<int>(s.form()), static_cast<int>(m.delay_rows)}) {
    w.put<std::int32_t>(v);
  }
  w.put<std::uint8_t>(m.report.unstable ? 1 : 0);
  w.put<std::uint8_t>(m.report.lasso_converged ? 1 : 0);
  w.put<double>(m.report.spectral_radius);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.report.notes.size()));
  for (const auto& n : m.report.notes) w.str(n);
  w.matrix(m.k);
  w.matrix(m.kf_half);
  w.matrix(m.kh);
  w.close();
}

inline KoopmanModel load_model(const std::string& path) {
  detail::Reader r(path);
  r.header("PKMD");
  KoopmanModel m;
  const auto method = r.get<std::uint8_t>();
  if (method > 2) throw IoError(path + ": unknown method tag");
  m.method = static_cast<Method>(method);
  m.dt = r.get<double>();
  int v[7];
  for (int& x : v) x = r.get<std::int32_t>();
  if (v[2] < 0 || v[2] > 1 || v[5] < 0 || v[5] > 1 || v[6] < 0 || v[6] > 1) {
    throw IoError(path + ": bad dictionary enum");
  }
  try {
    m.spec = DictionarySpec(v[0], v[1], static_cast<BaseKind>(v[2]), v[3], v[4], static_cast<DictForm>(v[5]));
  } catch (const ContractError& e) {
    throw IoError(path + ": " + e.what());
  }
  m.delay_rows = static_cast<DelayRows>(v[6]);
  m.report.unstable = r.get<std::uint8_t>() != 0;
  m.report.lasso_converged = r.get<std::uint8_t>() != 0;
  m.report.spectral_radius = r.get<double>();
  const auto nn = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nn; ++i) m.report.notes.push_back(r.str());
  m.k = r.matrix();
  m.kf_half = r.matrix();
  m.kh = r.matrix();
  r.expect_end();
  const auto md = m.spec.lifted_dim();
  if (m.k.rows() != md || m.k.cols() != md) throw IoError(path + ": K does not match the dictionary");
  return m;
}

inline nlohmann::json matrix_json(const Matrix& a) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < a.cols(); ++j) row.push_back(a(i, j));
    rows.push_back(std::move(row));
  }
  return {{"rows", a.rows()}, {"cols", a.cols()}, {"data", rows}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto r = j.at("rows").get<Eigen::Index>();
  const auto c = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != r) throw IoError("model json: row count mismatch");
  Matrix a(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    const auto& row = data.at(static_cast<std::size_t>(i));
    if (static_cast<Eigen::Index>(row.size()) != c) throw IoError("model json: column count mismatch");
    for (Eigen::Index k = 0; k < c; ++k) a(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
  }
  return a;
}

inline nlohmann::json model_json(const KoopmanModel& m) {
  return {{"format", "pikoop-model"},
          {"version", kVersion},
          {"method", to_string(m.method)},
          {"dt", m.dt},
          {"dictionary", spec_json(m.spec)},
          {"delay_rows", to_string(m.delay_rows)},
          {"report",
           {{"unstable", m.report.unstable},
            {"lasso_converged", m.report.lasso_converged},
            {"spectral_radius", m.report.spectral_radius},
            {"notes", m.report.notes}}},
          {"k", matrix_json(m.k)},
          {"kf_half", matrix_json(m.kf_half)},
          {"kh", matrix_json(m.kh)}};
}

inline KoopmanModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "pikoop-model") throw IoError("model json: wrong format tag");
    if (j.at("version").get<std::uint32_t>() != kVersion) throw IoError("model json: unsupported version");
    KoopmanModel m;
    m.method = method_from_string(j.at("method").get<std::string>());
    m.dt = j.at("dt").get<double>();
    m.spec = spec_from_json(j.at("dictionary"));
    m.delay_rows = j.at("delay_rows") == "shift" ? DelayRows::shift : DelayRows::identity;
    const auto& rep = j.at("report");
    m.report.unstable = rep.at("unstable").get<bool>();
    m.report.lasso_converged = rep.at("lasso_converged").get<bool>();
    m.report.spectral_radius = rep.at("spectral_radius").get<double>();
    m.report.notes = rep.at("notes").get<std::vector<std::string>>();
    m.k = matrix_from_json(j.at("k"));
    m.kf_half = matrix_from_json(j.at("kf_half"));
    m.kh = matrix_from_json(j.at("kh"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("model json: ") + e.what());
  }
}

inline void save_model_json(const KoopmanModel& m, const std::string& path) {
  detail::write_text(path, model_json(m).dump(1) + "\n");
}

inline KoopmanModel load_model_json(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace io
}  // namespace pikoop

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "pikoop/io.hpp"
#include "test_util.hpp"

using namespace pikoop;
using pikoop::testing::random_matrix;

namespace {

std::string tmp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "pikoop_io_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

// Values that trip naive formatting: subnormals, extremes, negative zero,
// integers above 2^53, and ordinary random doubles.
TrajectoryDataset awkward_dataset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TrajectoryDataset d;
  d.dt = 0.1 + 1e-17;
  d.x = random_matrix(3, 7, rng, -1e3, 1e3);
  d.xp = random_matrix(3, 7, rng);
  d.u = random_matrix(2, 7, rng);
  d.x(0, 0) = std::numeric_limits<double>::denorm_min();
  d.x(1, 0) = std::numeric_limits<double>::max();
  d.x(2, 0) = -0.0;
  d.xp(0, 1) = 9007199254740993.0;
  d.u(1, 2) = 1.0 / 3.0;
  for (int i = 0; i < 7; ++i) {
    d.traj.push_back(i < 4 ? 3 : -2);
    d.step.push_back(i < 4 ? i : i - 4);
  }
  return d;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

void expect_same(const TrajectoryDataset& a, const TrajectoryDataset& b) {
  EXPECT_EQ(std::memcmp(&a.dt, &b.dt, sizeof(double)), 0);
  EXPECT_TRUE(bit_equal(a.x, b.x));
  EXPECT_TRUE(bit_equal(a.xp, b.xp));
  EXPECT_TRUE(bit_equal(a.u, b.u));
  EXPECT_EQ(a.traj, b.traj);
  EXPECT_EQ(a.step, b.step);
}

KoopmanModel small_model() {
  std::mt19937_64 rng(5);
  KoopmanModel m;
  m.method = Method::PI;
  m.dt = 0.03;
  m.spec = DictionarySpec(2, 1, BaseKind::poly, 3, 2, DictForm::bilinear);
  m.delay_rows = DelayRows::identity;
  const auto md = m.spec.lifted_dim();
  m.k = random_matrix(md, md, rng);
  m.kf_half = random_matrix(md, md, rng);
  m.kh = random_matrix(md, md, rng);
  m.report.unstable = true;
  m.report.lasso_converged = false;
  m.report.spectral_radius = 1.0000001;
  m.report.notes = {"kf: spectral radius 1.0000001", ""};
  return m;
}

void expect_same(const KoopmanModel& a, const KoopmanModel& b) {
  EXPECT_EQ(a.method, b.method);
  EXPECT_EQ(a.dt, b.dt);
  EXPECT_TRUE(a.spec == b.spec);
  EXPECT_EQ(a.delay_rows, b.delay_rows);
  EXPECT_TRUE(bit_equal(a.k, b.k));
  EXPECT_TRUE(bit_equal(a.kf_half, b.kf_half));
  EXPECT_TRUE(bit_equal(a.kh, b.kh));
  EXPECT_EQ(a.report.unstable, b.report.unstable);
  EXPECT_EQ(a.report.lasso_converged, b.report.lasso_converged);
  EXPECT_EQ(a.report.spectral_radius, b.report.spectral_radius);
  EXPECT_EQ(a.report.notes, b.report.notes);
}

}  // namespace

TEST(DatasetCsv, HeaderLayout) {
  const auto text = io::dataset_csv(awkward_dataset(1));
  const auto second = text.substr(text.find('\n') + 1);
  EXPECT_EQ(second.substr(0, second.find('\n')), "traj_id,step,x1,x2,x3,xp1,xp2,xp3,u1,u2");
}

TEST(DatasetCsv, RoundTripIsExact) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto d = awkward_dataset(seed);
    expect_same(d, io::parse_dataset_csv(io::dataset_csv(d)));
  }
}

TEST(DatasetCsv, FileRoundTrip) {
  const auto d = awkward_dataset(3);
  const auto path = tmp_path("d1.csv");
  io::save_dataset_csv(d, path);
  expect_same(d, io::load_dataset_csv(path));
}

TEST(DatasetCsv, RejectsMalformedInput) {
  const auto good = io::dataset_csv(awkward_dataset(1));
  EXPECT_THROW(io::parse_dataset_csv(good.substr(good.find('\n') + 1)), IoError);
  std::string bad_num = good;
  bad_num.replace(bad_num.rfind(','), 1, ",x");
  EXPECT_THROW(io::parse_dataset_csv(bad_num), IoError);
  std::string short_row = good.substr(0, good.size() - 1);
  short_row = short_row.substr(0, short_row.rfind(','));
  EXPECT_THROW(io::parse_dataset_csv(short_row + "\n"), IoError);
  EXPECT_THROW(io::parse_dataset_csv("# dt=0.1\ntraj_id,step,x1,u1\n"), IoError);
}

TEST(DatasetBinary, RoundTripIsExact) {
  const auto path = tmp_path("d1.bin");
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto d = awkward_dataset(seed);
    io::save_dataset(d, path);
    expect_same(d, io::load_dataset(path));
  }
}

TEST(DatasetBinary, LittleEndianLayout) {
  TrajectoryDataset d;
  d.dt = 1.0;
  d.x = Matrix::Constant(1, 1, 2.0);
  d.xp = Matrix::Constant(1, 1, 3.0);
  d.u = Matrix::Constant(1, 1, 4.0);
  d.traj = {1};
  d.step = {0};
  const auto path = tmp_path("le.bin");
  io::save_dataset(d, path);
  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  ASSERT_GE(b.size(), 16u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "PKD1");
  EXPECT_EQ(b[4], 1);  // version 1, low byte first
  EXPECT_EQ(b[5], 0);
  // dt = 1.0 is 0x3FF0000000000000; little-endian puts 0xF0 0x3F last
  EXPECT_EQ(b[8 + 6], 0xF0);
  EXPECT_EQ(b[8 + 7], 0x3F);
}

TEST(DatasetBinary, TruncatedOrForeignFilesAreRejected) {
  const auto path = tmp_path("trunc.bin");
  io::save_dataset(awkward_dataset(2), path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  EXPECT_THROW(io::load_dataset(path), IoError);
  io::detail::write_text(path, "PKMD\x01\x00\x00\x00");
  EXPECT_THROW(io::load_dataset(path), IoError);
  EXPECT_THROW(io::load_dataset(tmp_path("does_not_exist.bin")), IoError);
}

TEST(DatasetBinary, SimulatedDatasetRoundTrip) {
  const auto d = make_d1(duffing(), 3, 20, 0.03, {}, 9);
  const auto path = tmp_path("duffing.bin");
  io::save_dataset(d, path);
  expect_same(d, io::load_dataset(path));
}

TEST(PhaseBinary, RoundTripWithOptionalColumns) {
  auto d = sample_phase_lhs(make_box({-1, -1}, {1, 1}), make_box({0}, {1}), 11, 4);
  const auto path = tmp_path("d2.bin");
  io::save_phase(d, path);
  auto back = io::load_phase(path);
  EXPECT_TRUE(bit_equal(d.x, back.x));
  EXPECT_TRUE(bit_equal(d.u, back.u));
  EXPECT_EQ(back.known_rate.size(), 0);

  d.known_rate = d.x * 2.0;
  d.known_flow = d.x * 0.5;
  d.flow_dt = 0.015;
  io::save_phase(d, path);
  back = io::load_phase(path);
  EXPECT_TRUE(bit_equal(d.known_rate, back.known_rate));
  EXPECT_TRUE(bit_equal(d.known_flow, back.known_flow));
  EXPECT_EQ(back.flow_dt, 0.015);
}

TEST(PhaseCsv, HeaderNamesOptionalColumns) {
  auto d = sample_phase_lhs(make_box({-1, -1}, {1, 1}), make_box({0}, {1}), 3, 4);
  d.known_rate = d.x;
  const auto text = io::phase_csv(d);
  EXPECT_NE(text.find("x1,x2,u1,r1,r2\n"), std::string::npos);
}

TEST(ModelBinary, RoundTripIsExact) {
  const auto m = small_model();
  const auto path = tmp_path("model.bin");
  io::save_model(m, path);
  expect_same(m, io::load_model(path));
}

TEST(ModelBinary, EmptySplitFactorsForEdmdModels) {
  auto m = small_model();
  m.method = Method::L;
  m.kf_half.resize(0, 0);
  m.kh.resize(0, 0);
  const auto path = tmp_path("model_l.bin");
  io::save_model(m, path);
  expect_same(m, io::load_model(path));
}

TEST(ModelBinary, VersionIsChecked) {
  const auto path = tmp_path("model_v.bin");
  io::save_model(small_model(), path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    f.put(7);
  }
  try {
    io::load_model(path);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("version 7"), std::string::npos);
  }
}

TEST(ModelJson, RoundTripIsExact) {
  const auto m = small_model();
  const auto path = tmp_path("model.json");
  io::save_model_json(m, path);
  expect_same(m, io::load_model_json(path));
}

TEST(ModelJson, FittedModelRollsOutIdentically) {
  const auto sys = duffing();
  const auto d1 = make_d1(sys, 4, 50, 0.03, {}, 2);
  const auto spec = DictionarySpec::linear(2, 1, 2);
  const auto m = edmd_fit(spec, d1);
  const auto path = tmp_path("fitted.json");
  io::save_model_json(m, path);
  const auto back = io::load_model_json(path);
  std::vector<Vector> us(30, Vector::Constant(1, 0.3));
  Vector x0(2);
  x0 << 0.5, -0.2;
  EXPECT_TRUE(bit_equal(rollout(m, x0, us).states, rollout(back, x0, us).states));
}

TEST(ModelJson, WrongFormatTagIsRejected) {
  auto j = io::model_json(small_model());
  j["format"] = "other";
  EXPECT_THROW(io::model_from_json(j), IoError);
  j = io::model_json(small_model());
  j.erase("k");
  EXPECT_THROW(io::model_from_json(j), IoError);
}

TEST(Method, ParsesCliSpellings) {
  EXPECT_EQ(io::method_from_string("l"), Method::L);
  EXPECT_EQ(io::method_from_string("PI"), Method::PI);
  EXPECT_THROW(io::method_from_string("x"), ContractError);
}
